//! Doubly robust e-invariance test: sample splitting, per-environment
//! outcome nuisances, pseudo-outcomes, and a generalized-covariance-measure
//! finish against environment indicators.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Subset, TestMethod, TestReport};
use crate::error::{Error, Result};
use crate::num;
use crate::seeding;

/// Propensity clipping bounds for the pseudo-outcome denominators.
const PI_CLIP: f64 = 1e-6;

/// Outcome regressor family for the nuisances and the GCM stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Linear,
    Knn,
}

/// Source of the propensity nuisance π̄.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityKind {
    /// Pass through the recorded behavior propensities.
    Given,
    /// Pooled logistic model of T on (1, X).
    Logistic,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DrConfig {
    pub regressor: RegressorKind,
    pub propensity: PropensityKind,
}

impl Default for DrConfig {
    fn default() -> Self {
        DrConfig {
            regressor: RegressorKind::Knn,
            propensity: PropensityKind::Given,
        }
    }
}

/// Per-environment outcome model μ̄^e(x, t).
#[derive(Debug, Clone)]
pub enum MuModel {
    /// Coefficients for the design (1, x, t, t·x).
    Linear { coef: DVector<f64> },
    /// One kNN table per treatment arm: (covariates, outcomes, k).
    Knn { arms: Vec<(DMatrix<f64>, Vec<f64>, usize)> },
    /// Identically zero; a deliberately misspecified stand-in.
    Zero,
}

impl MuModel {
    /// Evaluates μ̄ at each row of `x` for fixed treatment `t`.
    fn eval_batch(&self, x: &DMatrix<f64>, t: usize) -> Result<Vec<f64>> {
        let m = x.nrows();
        match self {
            MuModel::Zero => Ok(vec![0.0; m]),
            MuModel::Linear { coef } => {
                let d = x.ncols();
                assert_eq!(coef.len(), 2 * d + 2);
                Ok((0..m)
                    .map(|i| {
                        let mut v = coef[0] + coef[d + 1] * t as f64;
                        for j in 0..d {
                            v += coef[1 + j] * x[(i, j)]
                                + coef[d + 2 + j] * t as f64 * x[(i, j)];
                        }
                        v
                    })
                    .collect())
            }
            MuModel::Knn { arms } => {
                let (train, ys, k) = &arms[t];
                num::knn_regress_batch(train, ys, x, *k)
            }
        }
    }
}

/// Propensity nuisance π̄(1 | x).
#[derive(Debug, Clone)]
pub enum PiBar {
    /// Recovered from the stored behavior propensity of each row.
    Given,
    /// Logistic coefficients on (1, x).
    Logistic { coef: DVector<f64> },
    /// Constant probability; a deliberately misspecified stand-in.
    Fixed(f64),
}

impl PiBar {
    /// π̄(1|x) for one row, clipped into [1e−6, 1−1e−6]. `Given` reads the
    /// stored propensity of the observed treatment.
    fn eval(&self, x: &[f64], t: usize, p_obs: Option<f64>) -> Result<f64> {
        let raw = match self {
            PiBar::Given => {
                let p = p_obs.ok_or(Error::MissingPropensity)?;
                if t == 1 {
                    p
                } else {
                    1.0 - p
                }
            }
            PiBar::Logistic { coef } => {
                let mut z = coef[0];
                for (j, &xi) in x.iter().enumerate() {
                    z += coef[j + 1] * xi;
                }
                num::sigmoid(z)
            }
            PiBar::Fixed(p) => *p,
        };
        Ok(raw.clamp(PI_CLIP, 1.0 - PI_CLIP))
    }
}

/// Fitted nuisances: one outcome model per environment plus the propensity.
#[derive(Debug, Clone)]
pub struct NuisanceModels {
    pub mu: Vec<MuModel>,
    pub pi_bar: PiBar,
}

/// Fits the nuisances on the auxiliary half-sample: μ̄^e separately per
/// environment, π̄ pooled.
pub fn fit_nuisances(
    d1: &Dataset,
    regressor: RegressorKind,
    propensity: PropensityKind,
) -> Result<NuisanceModels> {
    if d1.k() != 2 {
        return Err(Error::MultiLevelTreatmentUnsupported);
    }
    let d = d1.d();
    let mut mu = Vec::with_capacity(d1.env_count());
    for e in 0..d1.env_count() {
        let idx = d1.rows_of_env(e);
        if idx.len() < 2 * d1.k() {
            return Err(Error::EnvironmentTooSmall(d1.env_labels()[e].clone()));
        }
        let model = match regressor {
            RegressorKind::Linear => {
                let design = DMatrix::from_fn(idx.len(), 2 * d + 2, |i, j| {
                    let row = &d1.rows()[idx[i]];
                    let t = row.t as f64;
                    match j {
                        0 => 1.0,
                        j if j <= d => row.x[j - 1],
                        j if j == d + 1 => t,
                        j => t * row.x[j - d - 2],
                    }
                });
                let y = DVector::from_fn(idx.len(), |i, _| d1.rows()[idx[i]].y);
                MuModel::Linear {
                    coef: num::least_squares(&design, &y)?.coef,
                }
            }
            RegressorKind::Knn => {
                let mut arms = Vec::with_capacity(2);
                for t in 0..2 {
                    let arm_idx: Vec<usize> = idx
                        .iter()
                        .copied()
                        .filter(|&i| d1.rows()[i].t == t)
                        .collect();
                    if arm_idx.is_empty() {
                        return Err(Error::EnvironmentTooSmall(d1.env_labels()[e].clone()));
                    }
                    let train = DMatrix::from_fn(arm_idx.len(), d, |i, j| {
                        d1.rows()[arm_idx[i]].x[j]
                    });
                    let ys: Vec<f64> = arm_idx.iter().map(|&i| d1.rows()[i].y).collect();
                    let k = num::default_knn_k(arm_idx.len());
                    arms.push((train, ys, k));
                }
                MuModel::Knn { arms }
            }
        };
        mu.push(model);
    }
    let pi_bar = match propensity {
        PropensityKind::Given => {
            if !d1.has_propensity() {
                return Err(Error::MissingPropensity);
            }
            PiBar::Given
        }
        PropensityKind::Logistic => {
            let design = DMatrix::from_fn(d1.n(), d + 1, |i, j| {
                if j == 0 {
                    1.0
                } else {
                    d1.rows()[i].x[j - 1]
                }
            });
            let t: Vec<f64> = d1.rows().iter().map(|r| r.t as f64).collect();
            PiBar::Logistic {
                coef: num::logistic_fit(&design, &t, 100, 1e-8)?,
            }
        }
    };
    Ok(NuisanceModels { mu, pi_bar })
}

/// Doubly robust pseudo-outcomes Oᵢ on the evaluation half-sample:
/// Oᵢ = μ̄(xᵢ,1) − μ̄(xᵢ,0)
///     + 1{tᵢ=1}(yᵢ−μ̄(xᵢ,1))/π̄(1|xᵢ) − 1{tᵢ=0}(yᵢ−μ̄(xᵢ,0))/(1−π̄(1|xᵢ)).
pub fn pseudo_outcomes(d2: &Dataset, nm: &NuisanceModels) -> Result<Vec<f64>> {
    if d2.k() != 2 {
        return Err(Error::MultiLevelTreatmentUnsupported);
    }
    let mut out = vec![0.0; d2.n()];
    for e in 0..d2.env_count() {
        let idx = d2.rows_of_env(e);
        let x = DMatrix::from_fn(idx.len(), d2.d(), |i, j| d2.rows()[idx[i]].x[j]);
        let mu1 = nm.mu[e].eval_batch(&x, 1)?;
        let mu0 = nm.mu[e].eval_batch(&x, 0)?;
        for (pos, &i) in idx.iter().enumerate() {
            let row = &d2.rows()[i];
            let p1 = nm.pi_bar.eval(&row.x, row.t, row.p_obs)?;
            let mut o = mu1[pos] - mu0[pos];
            if row.t == 1 {
                o += (row.y - mu1[pos]) / p1;
            } else {
                o -= (row.y - mu0[pos]) / (1.0 - p1);
            }
            if !o.is_finite() {
                return Err(Error::PropensityUnderflow);
            }
            out[i] = o;
        }
    }
    Ok(out)
}

/// Regresses each column of `responses` on `xs` with the chosen family and
/// returns residuals; an empty `xs` regresses on the mean.
fn residualize(
    responses: &[Vec<f64>],
    xs: &DMatrix<f64>,
    regressor: RegressorKind,
) -> Result<Vec<Vec<f64>>> {
    let n = xs.nrows();
    let q = xs.ncols();
    if q == 0 {
        return Ok(responses
            .iter()
            .map(|r| {
                let mean = r.iter().sum::<f64>() / n as f64;
                r.iter().map(|v| v - mean).collect()
            })
            .collect());
    }
    match regressor {
        RegressorKind::Linear => {
            let design = DMatrix::from_fn(n, q + 1, |i, j| {
                if j == 0 {
                    1.0
                } else {
                    xs[(i, j - 1)]
                }
            });
            responses
                .iter()
                .map(|r| {
                    let y = DVector::from_fn(n, |i, _| r[i]);
                    Ok(num::least_squares(&design, &y)?.residuals.iter().copied().collect())
                })
                .collect()
        }
        RegressorKind::Knn => {
            let k = num::default_knn_k(n);
            responses
                .iter()
                .map(|r| {
                    let fitted = num::knn_regress_batch(xs, r, xs, k)?;
                    Ok(r.iter().zip(fitted).map(|(v, f)| v - f).collect())
                })
                .collect()
        }
    }
}

/// Generalized covariance measure of the pseudo-outcomes against the
/// reference-coded environment indicators, conditional on X^S.
pub fn gcm_test(
    o: &[f64],
    xs: &DMatrix<f64>,
    env: &[usize],
    env_count: usize,
    alpha: f64,
    regressor: RegressorKind,
    subset: &Subset,
) -> Result<TestReport> {
    let n = o.len();
    assert_eq!(xs.nrows(), n);
    assert_eq!(env.len(), n);
    if env_count < 2 {
        return Err(Error::SingleEnvironment);
    }
    let l1 = env_count - 1;

    let mut responses: Vec<Vec<f64>> = vec![o.to_vec()];
    for e in 1..env_count {
        responses.push(env.iter().map(|&ei| f64::from(u8::from(ei == e))).collect());
    }
    let residuals = residualize(&responses, xs, regressor)?;
    let eps = &residuals[0];

    // A perfect fit of O on X^S leaves nothing to correlate with the
    // environment: report a zero statistic instead of a 0/0 quadratic form.
    let o_scale = (o.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let eps_scale = (eps.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if eps_scale <= 1e-10 * o_scale.max(f64::MIN_POSITIVE) {
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("degenerate_residuals".to_string(), "true".to_string());
        return Ok(TestReport {
            subset: subset.clone(),
            statistic: 0.0,
            dof: l1,
            p_value: 1.0,
            reject: false,
            alpha,
            method: TestMethod::Dr,
            diagnostics,
        });
    }

    // Rᵢ = ε̂ᵢ · δ̂ᵢ, statistic n R̄ᵀ Σ̂⁻¹ R̄ with the sample covariance Σ̂.
    let r = DMatrix::from_fn(n, l1, |i, j| eps[i] * residuals[j + 1][i]);
    let r_bar = DVector::from_fn(l1, |j, _| r.column(j).sum() / n as f64);
    let mut sigma = DMatrix::zeros(l1, l1);
    for i in 0..n {
        for a in 0..l1 {
            for b in 0..l1 {
                sigma[(a, b)] += (r[(i, a)] - r_bar[a]) * (r[(i, b)] - r_bar[b]);
            }
        }
    }
    sigma /= n as f64;

    let mut diagnostics = BTreeMap::new();
    let mut dof = l1;
    let statistic = match sigma.clone().lu().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => {
            n as f64 * (r_bar.transpose() * inv * &r_bar)[(0, 0)]
        }
        _ => {
            let (pinv, rank) = num::pseudo_inverse(&sigma, 1e-10);
            diagnostics.insert(
                "product_covariance_pseudo_inverse_rank".to_string(),
                rank.to_string(),
            );
            if rank == 0 {
                // Degenerate products (e.g. residuals identically zero):
                // nothing to test against, so the statistic vanishes.
                0.0
            } else {
                dof = rank;
                n as f64 * (r_bar.transpose() * pinv * &r_bar)[(0, 0)]
            }
        }
    };
    let statistic = statistic.max(0.0);
    let p_value = num::chi_square_tail(statistic, dof)?;
    Ok(TestReport {
        subset: subset.clone(),
        statistic,
        dof,
        p_value,
        reject: p_value < alpha,
        alpha,
        method: TestMethod::Dr,
        diagnostics,
    })
}

/// DR-learner e-invariance test: environment-stratified 50/50 split,
/// nuisances on the first half, pseudo-outcomes and GCM on the second.
pub fn dr_einv_test(
    ds: &Dataset,
    s: &Subset,
    alpha: f64,
    split_seed: u64,
    config: &DrConfig,
) -> Result<TestReport> {
    s.validate(ds.d())?;
    if ds.env_count() < 2 {
        return Err(Error::SingleEnvironment);
    }
    for e in 0..ds.env_count() {
        if ds.rows_of_env(e).len() < 2 * ds.k() {
            return Err(Error::EnvironmentTooSmall(ds.env_labels()[e].clone()));
        }
    }
    let mut fit_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for e in 0..ds.env_count() {
        let mut idx = ds.rows_of_env(e);
        let mut rng = seeding::stream_rng(split_seed, e as u64);
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        fit_idx.extend_from_slice(&idx[..half]);
        eval_idx.extend_from_slice(&idx[half..]);
    }
    fit_idx.sort_unstable();
    eval_idx.sort_unstable();
    let d1 = ds.select_rows(&fit_idx)?;
    let d2 = ds.select_rows(&eval_idx)?;

    let nm = fit_nuisances(&d1, config.regressor, config.propensity)?;
    let o = pseudo_outcomes(&d2, &nm)?;
    let xs = d2.project_subset(s)?;
    let env: Vec<usize> = d2.rows().iter().map(|r| r.env).collect();
    let mut report = gcm_test(&o, &xs, &env, d2.env_count(), alpha, config.regressor, s)?;
    report
        .diagnostics
        .insert("n_fit".to_string(), d1.n().to_string());
    report
        .diagnostics
        .insert("n_eval".to_string(), d2.n().to_string());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, PolicySpec};
    use crate::synth::{oracle_cate, sample_dataset, EnvParams, ScmConfig, ScmVariant};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_env_cfg(variant: ScmVariant) -> ScmConfig {
        ScmConfig::new(
            variant,
            vec![
                (
                    "A".to_string(),
                    EnvParams::Example1 {
                        gamma1: 1.0,
                        gamma2: 2.0,
                        gamma3: -0.5,
                        mu: 0.0,
                    },
                ),
                (
                    "B".to_string(),
                    EnvParams::Example1 {
                        gamma1: -1.5,
                        gamma2: 2.0,
                        gamma3: 0.8,
                        mu: 1.0,
                    },
                ),
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn linear_nuisance_recovers_noiseless_model() {
        // y = 2 + x − t + 3·t·x exactly; the linear family contains it.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Observation> = (0..200)
            .map(|i| {
                let x: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                let t = i % 2;
                Observation {
                    env: 0,
                    x: vec![x],
                    t,
                    y: 2.0 + x - t as f64 + 3.0 * t as f64 * x,
                    p_obs: Some(0.5),
                }
            })
            .collect();
        let ds = Dataset::new(rows, 1, 2, vec!["A".to_string()], false).unwrap();
        let nm = fit_nuisances(&ds, RegressorKind::Linear, PropensityKind::Given).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.3, -0.7]);
        let mu1 = nm.mu[0].eval_batch(&x, 1).unwrap();
        let mu0 = nm.mu[0].eval_batch(&x, 0).unwrap();
        assert_abs_diff_eq!(mu1[0], 2.0 + 0.3 - 1.0 + 0.9, epsilon = 1e-8);
        assert_abs_diff_eq!(mu0[1], 2.0 - 0.7, epsilon = 1e-8);
    }

    #[test]
    fn given_propensity_is_passthrough() {
        let pi = PiBar::Given;
        assert_abs_diff_eq!(pi.eval(&[0.0], 1, Some(0.5)).unwrap(), 0.5);
        assert_abs_diff_eq!(pi.eval(&[0.0], 0, Some(0.3)).unwrap(), 0.7);
    }

    #[test]
    fn tiny_environment_rejected() {
        let rows = vec![
            Observation {
                env: 0,
                x: vec![0.0],
                t: 0,
                y: 0.0,
                p_obs: Some(0.5),
            },
            Observation {
                env: 1,
                x: vec![1.0],
                t: 1,
                y: 1.0,
                p_obs: Some(0.5),
            },
        ];
        let mut big = Vec::new();
        for i in 0..8 {
            big.push(Observation {
                env: 0,
                x: vec![i as f64],
                t: i % 2,
                y: i as f64,
                p_obs: Some(0.5),
            });
        }
        big.push(rows[1].clone());
        let ds = Dataset::new(big, 1, 2, vec!["A".to_string(), "B".to_string()], false).unwrap();
        assert!(matches!(
            fit_nuisances(&ds, RegressorKind::Linear, PropensityKind::Given),
            Err(Error::EnvironmentTooSmall(label)) if label == "B"
        ));
    }

    #[test]
    fn pseudo_outcome_formula_collapse() {
        let rows = vec![
            Observation {
                env: 0,
                x: vec![0.0],
                t: 1,
                y: 1.0,
                p_obs: Some(0.5),
            },
            Observation {
                env: 0,
                x: vec![0.0],
                t: 0,
                y: 1.0,
                p_obs: Some(0.5),
            },
        ];
        let ds = Dataset::new(rows, 1, 2, vec!["A".to_string()], false).unwrap();
        let nm = NuisanceModels {
            mu: vec![MuModel::Zero],
            pi_bar: PiBar::Fixed(0.5),
        };
        let o = pseudo_outcomes(&ds, &nm).unwrap();
        assert_abs_diff_eq!(o[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o[1], -2.0, epsilon = 1e-12);
    }

    /// Bins pseudo-outcomes on X² and compares against the exact CATE.
    fn binned_pseudo_outcome_check(nm_override: Option<NuisanceModels>, logistic_behavior: bool) {
        let cfg = two_env_cfg(ScmVariant::Example1Linear);
        // Mild coefficients keep the propensities bounded away from 0 and 1,
        // which keeps the inverse-propensity terms from dominating the bins.
        let behavior = if logistic_behavior {
            PolicySpec::Logistic {
                subset: Subset::new(vec![0, 1, 2]),
                coef: vec![0.3, 0.4, -0.2, 0.1],
            }
        } else {
            PolicySpec::Uniform { k: 2 }
        };
        // IPW-only pseudo-outcomes are heavy-tailed; a large sample keeps the
        // binned means inside the tolerance.
        let n = if nm_override.is_some() { 200_000 } else { 50_000 };
        let ds = sample_dataset(&cfg, &cfg.labels(), n / 2, &behavior, 77).unwrap();
        // Interleaved split so both halves keep both environments.
        let half: Vec<usize> = (0..ds.n()).step_by(2).collect();
        let rest: Vec<usize> = (1..ds.n()).step_by(2).collect();
        let d1 = ds.select_rows(&half).unwrap();
        let d2 = ds.select_rows(&rest).unwrap();
        let nm = nm_override.unwrap_or_else(|| {
            fit_nuisances(&d1, RegressorKind::Linear, PropensityKind::Given).unwrap()
        });
        let o = pseudo_outcomes(&d2, &nm).unwrap();
        assert!(o.iter().all(|v| v.is_finite()));
        let s = Subset::new(vec![1]);
        for &x0 in &[-1.0, 0.0, 1.0] {
            let (mut sum, mut m) = (0.0, 0usize);
            for (i, row) in d2.rows().iter().enumerate() {
                if (row.x[1] - x0).abs() <= 0.4 {
                    sum += o[i];
                    m += 1;
                }
            }
            assert!(m > 500, "bin at {x0} too small: {m}");
            let mean = sum / m as f64;
            let oracle = oracle_cate(&cfg, "A", &[x0], &s, 1).unwrap();
            assert!(
                (mean - oracle).abs() < 0.1,
                "bin {x0}: pseudo-outcome mean {mean} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn pseudo_outcomes_match_oracle_with_correct_mu() {
        binned_pseudo_outcome_check(None, false);
    }

    #[test]
    fn double_robustness_wrong_mu_right_pi() {
        // μ̄ ≡ 0 but the recorded propensities are exact.
        let nm = NuisanceModels {
            mu: vec![MuModel::Zero, MuModel::Zero],
            pi_bar: PiBar::Given,
        };
        binned_pseudo_outcome_check(Some(nm), true);
    }

    #[test]
    fn double_robustness_right_mu_wrong_pi() {
        // Correct μ̄ but π̄ fixed at 0.5 against a logistic behavior policy.
        let cfg = two_env_cfg(ScmVariant::Example1Linear);
        let behavior = PolicySpec::Logistic {
            subset: Subset::new(vec![0, 1, 2]),
            coef: vec![0.5, 1.0, -0.5, 0.3],
        };
        let ds = sample_dataset(&cfg, &cfg.labels(), 25_000, &behavior, 78).unwrap();
        let half: Vec<usize> = (0..ds.n()).step_by(2).collect();
        let rest: Vec<usize> = (1..ds.n()).step_by(2).collect();
        let d1 = ds.select_rows(&half).unwrap();
        let d2 = ds.select_rows(&rest).unwrap();
        let mut nm = fit_nuisances(&d1, RegressorKind::Linear, PropensityKind::Given).unwrap();
        nm.pi_bar = PiBar::Fixed(0.5);
        let o = pseudo_outcomes(&d2, &nm).unwrap();
        let s = Subset::new(vec![1]);
        for &x0 in &[-1.0, 1.0] {
            let (mut sum, mut m) = (0.0, 0usize);
            for (i, row) in d2.rows().iter().enumerate() {
                if (row.x[1] - x0).abs() <= 0.25 {
                    sum += o[i];
                    m += 1;
                }
            }
            let mean = sum / m as f64;
            let oracle = oracle_cate(&cfg, "A", &[x0], &s, 1).unwrap();
            assert!(
                (mean - oracle).abs() < 0.1,
                "bin {x0}: mean {mean} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn gcm_zero_products_give_unit_p_value() {
        // O is an exact linear function of X^S: residuals vanish identically.
        let n = 60;
        let xs = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        let o: Vec<f64> = (0..n).map(|i| 2.0 + 3.0 * xs[(i, 0)]).collect();
        let env: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let report = gcm_test(
            &o,
            &xs,
            &env,
            2,
            0.05,
            RegressorKind::Linear,
            &Subset::new(vec![0]),
        )
        .unwrap();
        assert!(report.statistic.abs() < 1e-12);
        assert_abs_diff_eq!(report.p_value, 1.0, epsilon = 1e-9);
        assert!(!report.reject);
    }

    #[test]
    fn gcm_null_p_values_roughly_uniform() {
        // O independent of (X^S, env): p-values should be uniform.
        let reps = 200;
        let mut pvals: Vec<f64> = (0..reps)
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix_seed(55, rep));
                let n = 300;
                let xs = DMatrix::from_fn(n, 1, |_, _| rng.gen::<f64>());
                let o: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
                let env: Vec<usize> = (0..n).map(|_| usize::from(rng.gen::<f64>() < 0.5)).collect();
                gcm_test(
                    &o,
                    &xs,
                    &env,
                    2,
                    0.05,
                    RegressorKind::Linear,
                    &Subset::new(vec![0]),
                )
                .unwrap()
                .p_value
            })
            .collect();
        pvals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = pvals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let lo = i as f64 / reps as f64;
                let hi = (i + 1) as f64 / reps as f64;
                (p - lo).abs().max((p - hi).abs())
            })
            .fold(0.0_f64, f64::max);
        assert!(ks < 0.12, "KS distance {ks}");
    }

    #[test]
    fn dr_test_is_deterministic_and_level_holds_on_x2() {
        let cfg = two_env_cfg(ScmVariant::Example1Linear);
        let ds = sample_dataset(&cfg, &cfg.labels(), 1000, &PolicySpec::Uniform { k: 2 }, 5)
            .unwrap();
        let s = Subset::new(vec![1]);
        let cfg_dr = DrConfig::default();
        let a = dr_einv_test(&ds, &s, 0.05, 9, &cfg_dr).unwrap();
        let b = dr_einv_test(&ds, &s, 0.05, 9, &cfg_dr).unwrap();
        assert_eq!(a.statistic.to_bits(), b.statistic.to_bits());
        assert_eq!(a.p_value.to_bits(), b.p_value.to_bits());
        assert_eq!(a.dof, 1);
        assert_eq!(a.diagnostics["n_fit"], "1000");
        assert_eq!(a.diagnostics["n_eval"], "1000");

        // Light level check on the invariant subset.
        let mut rejections = 0;
        for rep in 0..40 {
            let ds = sample_dataset(
                &cfg,
                &cfg.labels(),
                1000,
                &PolicySpec::Uniform { k: 2 },
                200 + rep,
            )
            .unwrap();
            if dr_einv_test(&ds, &s, 0.05, rep, &cfg_dr).unwrap().reject {
                rejections += 1;
            }
        }
        assert!(rejections <= 8, "rejected {rejections}/40 on invariant subset");
    }

    #[test]
    fn dr_test_power_against_shifted_effect() {
        // Hand-built alternative: the treatment-effect intercept differs by
        // environment, which shifts E[O | X^S, env] and the GCM must see it.
        let cfg_dr = DrConfig {
            regressor: RegressorKind::Linear,
            propensity: PropensityKind::Given,
        };
        let s = Subset::new(vec![0]);
        let mut rejections = 0;
        for rep in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix_seed(300, rep));
            let rows: Vec<Observation> = (0..3000)
                .map(|i| {
                    let env = i % 2;
                    let x: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                    let t = usize::from(rng.gen::<f64>() < 0.5);
                    let tau = 1.0 + 0.5 * x + 0.8 * env as f64;
                    let y = x + t as f64 * tau + rng.gen::<f64>() - 0.5;
                    Observation {
                        env,
                        x: vec![x],
                        t,
                        y,
                        p_obs: Some(0.5),
                    }
                })
                .collect();
            let ds =
                Dataset::new(rows, 1, 2, vec!["A".to_string(), "B".to_string()], false).unwrap();
            if dr_einv_test(&ds, &s, 0.05, rep, &cfg_dr).unwrap().reject {
                rejections += 1;
            }
        }
        assert!(rejections >= 9, "rejected only {rejections}/10");
    }
}
