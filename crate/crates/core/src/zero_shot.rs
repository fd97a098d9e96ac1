//! Zero-shot policy generalization: test candidate subsets for
//! e-invariance, fit pooled CATE models on the accepted ones, build greedy
//! policies, and pick the subset whose policy promises the most on the test
//! environment's covariates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CateForm, CateModel, Dataset, PolicySpec, Subset, TestReport};
use crate::dr::{self, DrConfig};
use crate::error::{Error, Result};
use crate::num;
use crate::seeding;
use crate::wald;

/// Which e-invariance test gates the candidate subsets.
#[derive(Debug, Clone)]
pub enum TestSpec {
    Wald { tilde_q: f64 },
    Dr { split_seed: u64, config: DrConfig },
}

/// Pooled CATE estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CateEstimator {
    /// Centered/weighted linear regression (the Wald working model with the
    /// environment × treatment block forced to zero).
    LinearWls,
    /// kNN regression of cross-fitted doubly robust pseudo-outcomes on X^S.
    DrKnn,
}

/// Outcome of the zero-shot pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroShotReport {
    /// Accepted subsets with their p-values.
    pub accepted_sets: Vec<(Subset, f64)>,
    pub s_star: Subset,
    /// Eq.-style per-set scores, aligned with `accepted_sets`.
    pub per_set_scores: Vec<f64>,
    pub policy: PolicySpec,
    pub warnings: Vec<String>,
}

/// Runs the chosen test on every candidate subset and keeps those whose
/// p-value exceeds `alpha`. A failing test excludes the candidate with a
/// warning rather than aborting the sweep.
pub fn find_einv_sets(
    ds: &Dataset,
    candidates: &[Subset],
    test: &TestSpec,
    alpha: f64,
) -> Result<(Vec<(Subset, TestReport)>, Vec<String>)> {
    assert!(!candidates.is_empty(), "candidate list must be nonempty");
    let mut accepted = Vec::new();
    let mut warnings = Vec::new();
    for s in candidates {
        let outcome = match test {
            TestSpec::Wald { tilde_q } => {
                wald::wald_einv_test(ds, s, alpha, &PolicySpec::bernoulli(*tilde_q))
            }
            TestSpec::Dr { split_seed, config } => {
                dr::dr_einv_test(ds, s, alpha, *split_seed, config)
            }
        };
        match outcome {
            Ok(report) => {
                if report.p_value > alpha {
                    accepted.push((s.clone(), report));
                }
            }
            Err(err) => warnings.push(format!("subset {s} excluded: test failed ({err})")),
        }
    }
    Ok((accepted, warnings))
}

/// Builds the pooled design [X̃ | u_e⊗X̃ for e ≠ ref | c·X̃^S] (the Wald
/// design without the interaction block) and returns the treatment-effect
/// block coefficients.
fn fit_linear_wls(ds: &Dataset, s: &Subset) -> Result<CateModel> {
    if ds.k() != 2 {
        return Err(Error::MultiLevelTreatmentUnsupported);
    }
    if !ds.has_propensity() {
        return Err(Error::MissingPropensity);
    }
    s.validate(ds.d())?;
    let tilde = PolicySpec::bernoulli(0.5);
    let n = ds.n();
    let d = ds.d();
    let q = s.len();
    let l = ds.env_count();
    let p_main = (1 + d) * l;
    let p = p_main + 1 + q;
    let mut design = DMatrix::zeros(n, p);
    let mut weights = DVector::zeros(n);
    let y = DVector::from_fn(n, |i, _| ds.rows()[i].y);
    for (i, row) in ds.rows().iter().enumerate() {
        let probs = tilde.probabilities(&row.x)?;
        let c = if row.t == 1 { 1.0 - probs[1] } else { -probs[1] };
        weights[i] = probs[row.t] / row.p_obs.ok_or(Error::MissingPropensity)?;
        design[(i, 0)] = 1.0;
        for j in 0..d {
            design[(i, 1 + j)] = row.x[j];
        }
        if row.env > 0 {
            design[(i, (1 + d) * row.env)] = 1.0;
            for j in 0..d {
                design[(i, (1 + d) * row.env + 1 + j)] = row.x[j];
            }
        }
        design[(i, p_main)] = c;
        for (j, &idx) in s.indices().iter().enumerate() {
            design[(i, p_main + 1 + j)] = c * row.x[idx];
        }
    }
    let fit = num::weighted_least_squares(&design, &y, &weights)?;
    Ok(CateModel {
        subset: s.clone(),
        form: CateForm::Linear {
            intercept: fit.coef[p_main],
            coef: (0..q).map(|j| fit.coef[p_main + 1 + j]).collect(),
        },
    })
}

/// Two-fold cross-fitted pseudo-outcomes (folds interleaved within each
/// environment), then a kNN table of O on X^S over the pooled rows.
fn fit_dr_knn(ds: &Dataset, s: &Subset) -> Result<CateModel> {
    s.validate(ds.d())?;
    let mut fold_a = Vec::new();
    let mut fold_b = Vec::new();
    for e in 0..ds.env_count() {
        for (pos, i) in ds.rows_of_env(e).into_iter().enumerate() {
            if pos % 2 == 0 {
                fold_a.push(i);
            } else {
                fold_b.push(i);
            }
        }
    }
    fold_a.sort_unstable();
    fold_b.sort_unstable();
    let mut o_all = vec![0.0; ds.n()];
    for (fit_fold, eval_fold) in [(&fold_a, &fold_b), (&fold_b, &fold_a)] {
        let d_fit = ds.select_rows(fit_fold)?;
        let d_eval = ds.select_rows(eval_fold)?;
        let nm = dr::fit_nuisances(&d_fit, dr::RegressorKind::Knn, dr::PropensityKind::Given)?;
        let o = dr::pseudo_outcomes(&d_eval, &nm)?;
        for (pos, &i) in eval_fold.iter().enumerate() {
            o_all[i] = o[pos];
        }
    }
    let train_xs: Vec<Vec<f64>> = ds.rows().iter().map(|r| s.project(&r.x)).collect();
    Ok(CateModel {
        subset: s.clone(),
        form: CateForm::Knn {
            train_xs,
            train_o: o_all,
            k: num::default_knn_k(ds.n()),
        },
    })
}

/// Fits one CATE model on the pooled training environments.
pub fn fit_pooled_cate(ds: &Dataset, s: &Subset, estimator: CateEstimator) -> Result<CateModel> {
    match estimator {
        CateEstimator::LinearWls => fit_linear_wls(ds, s),
        CateEstimator::DrKnn => fit_dr_knn(ds, s),
    }
}

/// Greedy policy over a fitted CATE: all mass on the value-maximizing
/// treatment (baseline counts as value 0); near-ties share mass equally.
pub fn greedy_policy(cm: &CateModel) -> PolicySpec {
    PolicySpec::CateGreedy { model: cm.clone() }
}

/// Scores each model by the average promised gain of its greedy policy on
/// the test covariates — for binary treatment, mean of max(0, τ̂(x, 1)) —
/// and returns the argmax. Exact ties are broken uniformly at random from
/// the given seed.
pub fn select_optimal_set(
    models: &[CateModel],
    x_test: &DMatrix<f64>,
    seed: u64,
) -> Result<(usize, Vec<f64>)> {
    if models.is_empty() {
        return Err(Error::EmptyModelList);
    }
    assert!(x_test.nrows() >= 1, "need at least one test covariate row");
    let m = x_test.nrows() as f64;
    let scores: Vec<f64> = models
        .iter()
        .map(|cm| {
            cm.eval_rows(x_test)
                .into_iter()
                .map(|tau| tau.max(0.0))
                .sum::<f64>()
                / m
        })
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..models.len())
        .filter(|&i| scores[i] == best)
        .collect();
    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        let mut rng = seeding::stream_rng(seed, 0);
        tied[rng.gen_range(0..tied.len())]
    };
    Ok((winner, scores))
}

/// Pipeline configuration; `candidates` defaults to all 2^d subsets.
#[derive(Debug, Clone)]
pub struct ZeroShotConfig {
    pub test: TestSpec,
    pub alpha: f64,
    pub estimator: CateEstimator,
    pub candidates: Option<Vec<Subset>>,
    /// Tie-break seed for the subset selection.
    pub seed: u64,
}

impl ZeroShotConfig {
    pub fn wald(alpha: f64, seed: u64) -> Self {
        ZeroShotConfig {
            test: TestSpec::Wald { tilde_q: 0.5 },
            alpha,
            estimator: CateEstimator::LinearWls,
            candidates: None,
            seed,
        }
    }

    pub fn dr(alpha: f64, split_seed: u64, seed: u64) -> Self {
        ZeroShotConfig {
            test: TestSpec::Dr {
                split_seed,
                config: DrConfig::default(),
            },
            alpha,
            estimator: CateEstimator::DrKnn,
            candidates: None,
            seed,
        }
    }
}

/// Full zero-shot pipeline. When nothing is accepted the pipeline falls
/// back to the marginal (S = ∅) policy and flags it: that policy is only
/// justified when the average effect happens to be invariant.
pub fn zero_shot_pipeline(
    train: &Dataset,
    x_test: &DMatrix<f64>,
    config: &ZeroShotConfig,
) -> Result<ZeroShotReport> {
    if x_test.ncols() != train.d() {
        return Err(Error::DimensionMismatch {
            expected: train.d(),
            got: x_test.ncols(),
        });
    }
    let candidates = match &config.candidates {
        Some(c) => c.clone(),
        None => Subset::all_subsets(train.d())?,
    };
    let (accepted, mut warnings) = find_einv_sets(train, &candidates, &config.test, config.alpha)?;
    warnings.push("p-values are per-set; no multiple-testing correction applied".to_string());

    if accepted.is_empty() {
        warnings.push(
            "no candidate subset accepted; falling back to the marginal constant policy"
                .to_string(),
        );
        let cm = fit_pooled_cate(train, &Subset::empty(), config.estimator)?;
        let policy = greedy_policy(&cm);
        return Ok(ZeroShotReport {
            accepted_sets: Vec::new(),
            s_star: Subset::empty(),
            per_set_scores: Vec::new(),
            policy,
            warnings,
        });
    }

    let mut models = Vec::with_capacity(accepted.len());
    for (s, _) in &accepted {
        models.push(fit_pooled_cate(train, s, config.estimator)?);
    }
    let (winner, scores) = select_optimal_set(&models, x_test, config.seed)?;
    let policy = greedy_policy(&models[winner]);
    Ok(ZeroShotReport {
        accepted_sets: accepted
            .into_iter()
            .map(|(s, r)| (s, r.p_value))
            .collect(),
        s_star: models[winner].subset.clone(),
        per_set_scores: scores,
        policy,
        warnings,
    })
}

/// Semi-synthetic policy evaluation on a held-out environment: fit a linear
/// outcome model y = α̂ᵀ(1,x) + β̂ᵀ(1,x^{S_f})·t, resample covariate/residual
/// pairs with replacement, roll out the policy, and report the value
/// relative to the always-baseline policy on the same resamples.
pub fn semireal_evaluate(
    d_test: &Dataset,
    policy: &PolicySpec,
    feature_subset: &Subset,
    n_eval: usize,
    seed: u64,
) -> Result<f64> {
    if d_test.env_count() != 1 {
        return Err(Error::Config(
            "semi-synthetic evaluation expects a single-environment dataset".to_string(),
        ));
    }
    if d_test.k() != 2 {
        return Err(Error::MultiLevelTreatmentUnsupported);
    }
    feature_subset.validate(d_test.d())?;
    let n = d_test.n();
    let d = d_test.d();
    let qf = feature_subset.len();
    let p = (1 + d) + (1 + qf);
    let design = DMatrix::from_fn(n, p, |i, j| {
        let row = &d_test.rows()[i];
        if j == 0 {
            1.0
        } else if j <= d {
            row.x[j - 1]
        } else if j == d + 1 {
            row.t as f64
        } else {
            row.t as f64 * row.x[feature_subset.indices()[j - d - 2]]
        }
    });
    let y = DVector::from_fn(n, |i, _| d_test.rows()[i].y);
    let fit = num::least_squares(&design, &y)?;

    let mut rng = seeding::stream_rng(seed, 0);
    let mut total = 0.0;
    for _ in 0..n_eval {
        let i = rng.gen_range(0..n);
        let row = &d_test.rows()[i];
        let t = policy.sample(&row.x, &mut rng)?;
        // Relative to t₀ = 0, the α̂ part and the resampled residual cancel.
        if t == 1 {
            let mut effect = fit.coef[d + 1];
            for (j, &idx) in feature_subset.indices().iter().enumerate() {
                effect += fit.coef[d + 2 + j] * row.x[idx];
            }
            total += effect;
        }
    }
    Ok(total / n_eval as f64)
}
