//! Few-shot adaptation: keep the training CATE on the invariant subset S
//! fixed and fit only the non-invariant linear component θ^N on a small
//! labeled sample from the test environment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CateModel, Dataset, Subset};
use crate::dr;
use crate::error::{Error, Result};
use crate::num;

/// Linear model of E[X^N | X^S = ·] on the test environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearConditional {
    pub subset: Subset,
    pub targets: Subset,
    /// One intercept per target coordinate.
    pub intercepts: Vec<f64>,
    /// |N| × |S| coefficients.
    pub coef: Vec<Vec<f64>>,
}

impl LinearConditional {
    /// Predicted x^N from subset covariates x^S.
    pub fn predict(&self, x_s: &[f64]) -> Vec<f64> {
        assert_eq!(x_s.len(), self.subset.len());
        self.intercepts
            .iter()
            .zip(&self.coef)
            .map(|(b, row)| b + row.iter().zip(x_s).map(|(c, x)| c * x).sum::<f64>())
            .collect()
    }
}

/// OLS of every non-subset coordinate X^N on (1, X^S) over the test
/// covariates.
pub fn fit_xn_given_xs(x_test: &DMatrix<f64>, s: &Subset) -> Result<LinearConditional> {
    let d = x_test.ncols();
    s.validate(d)?;
    let m = x_test.nrows();
    if m <= s.len() + 1 {
        return Err(Error::TestSampleTooSmall {
            m,
            required: s.len() + 2,
        });
    }
    let targets = s.complement(d);
    let design = DMatrix::from_fn(m, 1 + s.len(), |i, j| {
        if j == 0 {
            1.0
        } else {
            x_test[(i, s.indices()[j - 1])]
        }
    });
    let mut intercepts = Vec::with_capacity(targets.len());
    let mut coef = Vec::with_capacity(targets.len());
    for &t in targets.indices() {
        let y = DVector::from_fn(m, |i, _| x_test[(i, t)]);
        let fit = num::least_squares(&design, &y)?;
        intercepts.push(fit.coef[0]);
        coef.push((1..=s.len()).map(|j| fit.coef[j]).collect());
    }
    Ok(LinearConditional {
        subset: s.clone(),
        targets,
        intercepts,
        coef,
    })
}

/// Training CATE plus a test-environment linear correction:
/// τ̂(x, 1) = τ^S_tr(x^S, 1) + θ·(x^N − q̂(x^S)), and τ̂(·, 0) ≡ 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotModel {
    pub s: Subset,
    pub tau_tr: CateModel,
    /// One coefficient per non-subset coordinate.
    pub theta_n: Vec<f64>,
    pub qhat: LinearConditional,
}

impl FewShotModel {
    pub fn eval(&self, x: &[f64], t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let x_s = self.s.project(x);
        let mut tau = self.tau_tr.eval(&x_s, 1);
        if !self.theta_n.is_empty() {
            let pred = self.qhat.predict(&x_s);
            for ((&idx, &theta), q) in self
                .qhat
                .targets
                .indices()
                .iter()
                .zip(&self.theta_n)
                .zip(&pred)
            {
                tau += theta * (x[idx] - q);
            }
        }
        tau
    }
}

/// Fits θ^N on a small test-environment sample: cross-fitted doubly robust
/// pseudo-outcomes (linear nuisances, recorded propensities), then a
/// closed-form least-squares solve of
/// θ̂ = argmin Σᵢ (Oᵢ − τ^S_tr(xᵢ^S, 1) − θ·(xᵢ^N − q̂(xᵢ^S)))².
pub fn few_shot_fit(d_test: &Dataset, tau_tr: &CateModel, s: &Subset) -> Result<FewShotModel> {
    s.validate(d_test.d())?;
    let m = d_test.n();
    let targets = s.complement(d_test.d());
    let required = 4 * (targets.len() + 1);
    if m < required {
        return Err(Error::TestSampleTooSmall { m, required });
    }
    if targets.is_empty() {
        // S covers everything: the constraint pins the training CATE.
        return Ok(FewShotModel {
            s: s.clone(),
            tau_tr: tau_tr.clone(),
            theta_n: Vec::new(),
            qhat: LinearConditional {
                subset: s.clone(),
                targets,
                intercepts: Vec::new(),
                coef: Vec::new(),
            },
        });
    }
    let qhat = fit_xn_given_xs(&d_test.covariate_matrix(), s)?;
    let o = cross_fit_pseudo_outcomes(d_test)?;

    // Least squares in θ; the regressors are the OLS residuals of X^N on
    // (1, X^S), so no intercept is needed.
    let design = DMatrix::from_fn(m, targets.len(), |i, j| {
        let row = &d_test.rows()[i];
        let pred = qhat.predict(&s.project(&row.x));
        row.x[qhat.targets.indices()[j]] - pred[j]
    });
    let resp = DVector::from_fn(m, |i, _| {
        let row = &d_test.rows()[i];
        o[i] - tau_tr.eval(&s.project(&row.x), 1)
    });
    let fit = num::least_squares(&design, &resp)?;
    Ok(FewShotModel {
        s: s.clone(),
        tau_tr: tau_tr.clone(),
        theta_n: fit.coef.iter().copied().collect(),
        qhat,
    })
}

/// Synthetic single-environment benchmark sample with a separable CATE:
/// d = 2, S = {0}, x^S standard normal, x^N = 0.7·x^S + noise, uniform
/// binary behavior, true effect 1 + 0.5·x^S + θ*·(x^N − 0.7·x^S).
pub fn separable_test_env(m: usize, theta_star: f64, seed: u64) -> Dataset {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<crate::data::Observation> = (0..m)
        .map(|_| {
            let xs: f64 = rng.sample(rand_distr::StandardNormal);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let xn = 0.7 * xs + e;
            let t = usize::from(rng.gen::<f64>() < 0.5);
            let tau = 1.0 + 0.5 * xs + theta_star * (xn - 0.7 * xs);
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            crate::data::Observation {
                env: 0,
                x: vec![xs, xn],
                t,
                y: 0.4 * xs - 0.2 * xn + t as f64 * tau + noise,
                p_obs: Some(0.5),
            }
        })
        .collect();
    Dataset::new(rows, 2, 2, vec!["tst".to_string()], false).expect("valid synthetic sample")
}

/// Two-fold cross-fitted pseudo-outcomes on the test sample itself
/// (interleaved folds within each environment, linear outcome nuisances,
/// recorded propensities).
fn cross_fit_pseudo_outcomes(d_test: &Dataset) -> Result<Vec<f64>> {
    let mut fold_a = Vec::new();
    let mut fold_b = Vec::new();
    for e in 0..d_test.env_count() {
        for (pos, i) in d_test.rows_of_env(e).into_iter().enumerate() {
            if pos % 2 == 0 {
                fold_a.push(i);
            } else {
                fold_b.push(i);
            }
        }
    }
    fold_a.sort_unstable();
    fold_b.sort_unstable();
    let mut o_all = vec![0.0; d_test.n()];
    for (fit_fold, eval_fold) in [(&fold_a, &fold_b), (&fold_b, &fold_a)] {
        let d_fit = d_test.select_rows(fit_fold)?;
        let d_eval = d_test.select_rows(eval_fold)?;
        let nm = dr::fit_nuisances(&d_fit, dr::RegressorKind::Linear, dr::PropensityKind::Given)?;
        let o = dr::pseudo_outcomes(&d_eval, &nm)?;
        for (pos, &i) in eval_fold.iter().enumerate() {
            o_all[i] = o[pos];
        }
    }
    Ok(o_all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CateForm, PolicySpec};
    use crate::seeding;
    use crate::synth::{sample_dataset, EnvParams, ScmConfig, ScmVariant};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn duplicated_column_gives_identity_map() {
        let m = 50;
        let x = DMatrix::from_fn(m, 2, |i, _| i as f64 / 10.0 - 2.0);
        let q = fit_xn_given_xs(&x, &Subset::new(vec![0])).unwrap();
        assert_abs_diff_eq!(q.intercepts[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q.coef[0][0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn independent_target_gives_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = 20_000;
        let x = DMatrix::from_fn(m, 2, |_, j| {
            let z: f64 = rng.sample(StandardNormal);
            if j == 0 {
                z
            } else {
                3.0 + z
            }
        });
        let q = fit_xn_given_xs(&x, &Subset::new(vec![0])).unwrap();
        assert!((q.intercepts[0] - 3.0).abs() < 0.05);
        assert!(q.coef[0][0].abs() < 0.05);
    }

    #[test]
    fn example1_conditional_matches_gaussian_oracle() {
        let cfg = ScmConfig::new(
            ScmVariant::Example1Linear,
            vec![(
                "T".to_string(),
                EnvParams::Example1 {
                    gamma1: 1.2,
                    gamma2: 0.8,
                    gamma3: -0.9,
                    mu: 0.0,
                },
            )],
            0,
        )
        .unwrap();
        let ds = sample_dataset(
            &cfg,
            &["T".to_string()],
            10_000,
            &PolicySpec::Uniform { k: 2 },
            3,
        )
        .unwrap();
        let q = fit_xn_given_xs(&ds.covariate_matrix(), &Subset::new(vec![1])).unwrap();
        // X¹ = X² + γ¹U¹ + ε with U¹ ⊥ X², so E[X¹|X²=x] = x; X³ ⊥ X².
        assert!((q.coef[0][0] - 1.0).abs() < 0.05, "X¹ slope {}", q.coef[0][0]);
        assert!(q.coef[1][0].abs() < 0.05, "X³ slope {}", q.coef[1][0]);
        assert!(q.intercepts.iter().all(|b| b.abs() < 0.05));
    }

    #[test]
    fn sample_too_small() {
        let x = DMatrix::from_fn(2, 2, |i, j| (i + j) as f64);
        assert!(matches!(
            fit_xn_given_xs(&x, &Subset::new(vec![0])),
            Err(Error::TestSampleTooSmall { m: 2, required: 3 })
        ));
    }

    fn linear_tau(intercept: f64, coef: Vec<f64>, subset: Subset) -> CateModel {
        CateModel {
            subset,
            form: CateForm::Linear { intercept, coef },
        }
    }

    #[test]
    fn full_subset_keeps_training_cate() {
        let ds = separable_test_env(100, 0.8, 1);
        let tau_tr = linear_tau(1.0, vec![0.5, 0.1], Subset::new(vec![0, 1]));
        let fs = few_shot_fit(&ds, &tau_tr, &Subset::new(vec![0, 1])).unwrap();
        assert!(fs.theta_n.is_empty());
        let x = [0.3, -0.6];
        assert_abs_diff_eq!(fs.eval(&x, 1), tau_tr.eval(&x, 1), epsilon = 1e-12);
        assert_eq!(fs.eval(&x, 0), 0.0);
    }

    #[test]
    fn theta_recovered_on_generative_oracle() {
        let theta_star = 0.8;
        let ds = separable_test_env(10_000, theta_star, 2);
        let tau_tr = linear_tau(1.0, vec![0.5], Subset::new(vec![0]));
        let fs = few_shot_fit(&ds, &tau_tr, &Subset::new(vec![0])).unwrap();
        assert!(
            (fs.theta_n[0] - theta_star).abs() < 0.1,
            "theta {}",
            fs.theta_n[0]
        );
    }

    #[test]
    fn tiny_sample_rejected() {
        let ds = separable_test_env(3, 0.8, 3);
        let tau_tr = linear_tau(1.0, vec![0.5], Subset::new(vec![0]));
        assert!(matches!(
            few_shot_fit(&ds, &tau_tr, &Subset::new(vec![0])),
            Err(Error::TestSampleTooSmall { m: 3, required: 8 })
        ));
    }

    #[test]
    fn constraint_satisfied_algebraically() {
        // Projecting τ̂(·,1) back onto (1, X^S) over the fitting sample
        // returns the training CATE exactly: the correction term is an OLS
        // residual, hence empirically orthogonal to (1, X^S).
        let ds = separable_test_env(500, 0.8, 4);
        let tau_tr = linear_tau(1.0, vec![0.5], Subset::new(vec![0]));
        let s = Subset::new(vec![0]);
        let fs = few_shot_fit(&ds, &tau_tr, &s).unwrap();
        let m = ds.n();
        let design = DMatrix::from_fn(m, 2, |i, j| {
            if j == 0 {
                1.0
            } else {
                ds.rows()[i].x[0]
            }
        });
        let tau_hat = DVector::from_fn(m, |i, _| fs.eval(&ds.rows()[i].x, 1));
        let fit = num::least_squares(&design, &tau_hat).unwrap();
        for i in 0..m {
            let projected = fit.coef[0] + fit.coef[1] * ds.rows()[i].x[0];
            let training = tau_tr.eval(&[ds.rows()[i].x[0]], 1);
            assert_abs_diff_eq!(projected, training, epsilon = 1e-8);
        }
    }

    #[test]
    fn constrained_beats_unconstrained_at_small_m() {
        // At m = 50 the constrained fit estimates one parameter against the
        // unconstrained full linear CATE's three; compare out-of-sample MSE
        // against the true effect over 200 replications.
        let theta_star = 0.8;
        let tau_tr = linear_tau(1.0, vec![0.5], Subset::new(vec![0]));
        let s = Subset::new(vec![0]);
        let true_tau = |x: &[f64]| 1.0 + 0.5 * x[0] + theta_star * (x[1] - 0.7 * x[0]);
        let eval_grid = separable_test_env(2000, theta_star, 999);
        let (mut mse_con, mut mse_unc) = (0.0, 0.0);
        for rep in 0..200u64 {
            let ds = separable_test_env(50, theta_star, seeding::mix_seed(10, rep));
            let fs = few_shot_fit(&ds, &tau_tr, &s).unwrap();
            // Unconstrained comparator: least squares of the same
            // pseudo-outcomes on (1, x¹, x²).
            let o = cross_fit_pseudo_outcomes(&ds).unwrap();
            let design = DMatrix::from_fn(ds.n(), 3, |i, j| {
                if j == 0 {
                    1.0
                } else {
                    ds.rows()[i].x[j - 1]
                }
            });
            let yv = DVector::from_fn(ds.n(), |i, _| o[i]);
            let unc = num::least_squares(&design, &yv).unwrap();
            for row in eval_grid.rows() {
                let truth = true_tau(&row.x);
                let con = fs.eval(&row.x, 1);
                let u = unc.coef[0] + unc.coef[1] * row.x[0] + unc.coef[2] * row.x[1];
                mse_con += (con - truth) * (con - truth);
                mse_unc += (u - truth) * (u - truth);
            }
        }
        assert!(
            mse_con <= mse_unc,
            "constrained MSE {mse_con} vs unconstrained {mse_unc}"
        );
    }

    #[test]
    fn theta_error_shrinks_with_m() {
        let theta_star = 0.8;
        let tau_tr = linear_tau(1.0, vec![0.5], Subset::new(vec![0]));
        let s = Subset::new(vec![0]);
        // Average |θ̂ − θ*| over a few replications per sample size.
        let mean_err = |m: usize| -> f64 {
            (0..8u64)
                .map(|rep| {
                    let ds = separable_test_env(m, theta_star, seeding::mix_seed(77 + m as u64, rep));
                    let fs = few_shot_fit(&ds, &tau_tr, &s).unwrap();
                    (fs.theta_n[0] - theta_star).abs()
                })
                .sum::<f64>()
                / 8.0
        };
        let e100 = mean_err(100);
        let e1000 = mean_err(1000);
        let e10000 = mean_err(10_000);
        assert!(e1000 < e100, "{e100} -> {e1000}");
        assert!(e10000 < e1000, "{e1000} -> {e10000}");
    }
}
