//! Self-contained numerical kernel: weighted least squares, sandwich
//! covariance, chi-square distribution functions, k-nearest-neighbor
//! regression and logistic fitting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for the numerical rank of a design matrix.
const RANK_TOL: f64 = 1e-10;

/// Result of a (weighted) least-squares fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    /// (XᵀWX)⁻¹, symmetric.
    pub xtwx_inverse: DMatrix<f64>,
    /// Estimated condition number of the weighted design (≥ 1).
    pub condition: f64,
}

/// Minimizes Σ wᵢ (yᵢ − designᵢ·coef)² via a column-pivoted QR factorization
/// of the row-scaled design. Fails with `RankDeficient` when the numerical
/// rank drops below the column count.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<FitResult> {
    let n = design.nrows();
    let p = design.ncols();
    assert_eq!(y.len(), n, "response length must match design rows");
    assert_eq!(w.len(), n, "weight length must match design rows");
    assert!(n >= p, "need at least as many rows as columns");
    assert!(w.iter().all(|&wi| wi > 0.0), "weights must be positive");

    let sqrt_w: Vec<f64> = w.iter().map(|wi| wi.sqrt()).collect();
    let mut a = design.clone();
    for i in 0..n {
        for j in 0..p {
            a[(i, j)] *= sqrt_w[i];
        }
    }
    let yw = DVector::from_fn(n, |i, _| y[i] * sqrt_w[i]);

    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    // Column pivoting sorts |r_jj| in decreasing order; the ratio of the
    // extreme diagonal entries estimates the condition number.
    let r_max = (0..p).map(|j| r[(j, j)].abs()).fold(0.0_f64, f64::max);
    let r_min = (0..p).map(|j| r[(j, j)].abs()).fold(f64::INFINITY, f64::min);
    let rank = (0..p).filter(|&j| r[(j, j)].abs() > RANK_TOL * r_max).count();
    if rank < p || r_max == 0.0 {
        return Err(Error::RankDeficient { rank, cols: p });
    }
    let condition = if r_min > 0.0 { r_max / r_min } else { f64::INFINITY };

    let r_inv = r
        .try_inverse()
        .ok_or(Error::RankDeficient { rank, cols: p })?;
    // AP = QR (thin), so the minimizer is β = P R⁻¹ Q₁ᵀ y_w.
    let mut coef = &r_inv * (qr.q().transpose() * &yw);
    qr.p().inv_permute_rows(&mut coef);
    let residuals = y - design * &coef;

    // (XᵀWX)⁻¹ = P R⁻¹ R⁻ᵀ Pᵀ from the pivoted factorization.
    let mut inv = &r_inv * r_inv.transpose();
    qr.p().inv_permute_rows(&mut inv);
    let mut inv_t = inv.transpose();
    qr.p().inv_permute_rows(&mut inv_t);
    let xtwx_inverse = inv_t.transpose();

    Ok(FitResult {
        coef,
        residuals,
        xtwx_inverse,
        condition,
    })
}

/// Ordinary least squares (unit weights).
pub fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<FitResult> {
    let w = DVector::from_element(design.nrows(), 1.0);
    weighted_least_squares(design, y, &w)
}

/// Estimating-equation sandwich covariance
/// (n⁻¹ΣJᵢ)⁻¹ (n⁻¹ΣGᵢGᵢᵀ) (n⁻¹ΣJᵢ)⁻ᵀ, symmetrized.
///
/// `scores` holds the per-observation scores Gᵢ as rows; `jacobians` the
/// per-observation Jacobians Jᵢ of the score.
pub fn sandwich_covariance(
    scores: &DMatrix<f64>,
    jacobians: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    let n = scores.nrows();
    let p = scores.ncols();
    assert_eq!(jacobians.len(), n, "one Jacobian per score row");
    let mut mean_j = DMatrix::zeros(p, p);
    for j in jacobians {
        mean_j += j;
    }
    mean_j /= n as f64;
    let bread = mean_j.lu().try_inverse().ok_or(Error::SingularJacobian)?;
    let max_bread = bread.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !max_bread.is_finite() || max_bread > 1.0 / (RANK_TOL * RANK_TOL) {
        return Err(Error::SingularJacobian);
    }
    let meat = scores.transpose() * scores / n as f64;
    let v = &bread * meat * bread.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

/// Moore-Penrose pseudo-inverse with the numerical rank actually used.
pub fn pseudo_inverse(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cut = tol * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cut).count();
    let pinv = svd.pseudo_inverse(cut).expect("svd computed with u and v");
    (pinv, rank)
}

// ---------------------------------------------------------------------------
// Chi-square distribution
// ---------------------------------------------------------------------------

/// ln Γ(x) (Lanczos approximation, x > 0).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for (j, &c) in COEFFS.iter().enumerate() {
        ser += c / (x + 1.0 + j as f64);
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Regularized lower incomplete gamma P(a, x) by series expansion (x < a+1).
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction (x ≥ a+1).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper tail Q(dof/2, x/2) of the chi-square distribution.
pub fn chi_square_tail(stat: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidDof);
    }
    assert!(stat >= 0.0, "chi-square statistic must be nonnegative");
    if stat == 0.0 {
        return Ok(1.0);
    }
    let a = dof as f64 / 2.0;
    let x = stat / 2.0;
    let q = if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Quantile x with CDF(x) = p, by bisection on the tail function.
pub fn chi_square_quantile(p: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidDof);
    }
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0,1)");
    let target = 1.0 - p; // tail probability
    let mut hi = dof as f64;
    while chi_square_tail(hi, dof)? > target {
        hi *= 2.0;
        if hi > 1e9 {
            break;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_square_tail(mid, dof)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// k-nearest-neighbor regression
// ---------------------------------------------------------------------------

/// Default neighborhood size: max(10, ⌈√m⌉), capped at m.
pub fn default_knn_k(m: usize) -> usize {
    (10usize.max((m as f64).sqrt().ceil() as usize)).min(m.max(1))
}

/// Mean of the k nearest training outcomes under Euclidean distance; exact
/// distance ties are broken by lower row index.
pub fn knn_regress(
    train_x: &DMatrix<f64>,
    train_y: &[f64],
    query: &[f64],
    k: usize,
) -> Result<f64> {
    let m = train_x.nrows();
    if m == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    assert!(k >= 1 && k <= m, "k must lie in [1, m]");
    assert_eq!(query.len(), train_x.ncols(), "query dimension mismatch");
    let mut dist: Vec<(f64, usize)> = (0..m)
        .map(|i| {
            let d2: f64 = (0..train_x.ncols())
                .map(|j| {
                    let diff = train_x[(i, j)] - query[j];
                    diff * diff
                })
                .sum();
            (d2, i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
    };
    if k < m {
        dist.select_nth_unstable_by(k - 1, cmp);
    }
    let sum: f64 = dist[..k].iter().map(|&(_, i)| train_y[i]).sum();
    Ok(sum / k as f64)
}

/// Batch kNN regression over many queries. Uses a sorted sliding window for
/// one-dimensional features and falls back to per-query selection otherwise.
pub fn knn_regress_batch(
    train_x: &DMatrix<f64>,
    train_y: &[f64],
    queries: &DMatrix<f64>,
    k: usize,
) -> Result<Vec<f64>> {
    let m = train_x.nrows();
    if m == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    assert!(k >= 1 && k <= m);
    assert_eq!(queries.ncols(), train_x.ncols());
    if train_x.ncols() == 1 {
        return Ok(knn_batch_1d(train_x, train_y, queries, k));
    }
    if train_x.ncols() == 0 {
        // Zero-dimensional features: every point is equidistant; the k lowest
        // row indices win.
        let mean_k: f64 = train_y[..k].iter().sum::<f64>() / k as f64;
        return Ok(vec![mean_k; queries.nrows()]);
    }
    (0..queries.nrows())
        .map(|q| {
            let row: Vec<f64> = (0..queries.ncols()).map(|j| queries[(q, j)]).collect();
            knn_regress(train_x, train_y, &row, k)
        })
        .collect()
}

fn knn_batch_1d(
    train_x: &DMatrix<f64>,
    train_y: &[f64],
    queries: &DMatrix<f64>,
    k: usize,
) -> Vec<f64> {
    let m = train_x.nrows();
    // Sort by position with the original index as tie-break, so that window
    // expansion reproduces the lower-row-index rule on exact ties.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        train_x[(a, 0)]
            .partial_cmp(&train_x[(b, 0)])
            .unwrap()
            .then(a.cmp(&b))
    });
    let xs: Vec<f64> = order.iter().map(|&i| train_x[(i, 0)]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| train_y[i]).collect();
    let idx: Vec<usize> = order;

    (0..queries.nrows())
        .map(|qi| {
            let q = queries[(qi, 0)];
            let start = xs.partition_point(|&x| x < q);
            let mut left = start; // next candidate to the left is left-1
            let mut right = start; // next candidate to the right is right
            let mut sum = 0.0;
            for _ in 0..k {
                let take_left = if left == 0 {
                    false
                } else if right == m {
                    true
                } else {
                    let dl = (q - xs[left - 1]).abs();
                    let dr = (xs[right] - q).abs();
                    if dl != dr {
                        dl < dr
                    } else {
                        idx[left - 1] < idx[right]
                    }
                };
                if take_left {
                    left -= 1;
                    sum += ys[left];
                } else {
                    sum += ys[right];
                    right += 1;
                }
            }
            sum / k as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logistic_loglik(design: &DMatrix<f64>, t: &[f64], coef: &DVector<f64>) -> f64 {
    let eta = design * coef;
    eta.iter()
        .zip(t)
        .map(|(&z, &ti)| {
            // log p if ti = 1, log(1-p) otherwise, in a stable form
            let log1pe = if z > 30.0 { z } else { (1.0 + z.exp()).ln() };
            ti * z - log1pe
        })
        .sum()
}

/// Newton-Raphson maximum-likelihood logistic fit of a binary response.
/// Converges when the gradient ∞-norm drops below `tol`; a coefficient norm
/// above 1e3 is treated as separable data.
pub fn logistic_fit(
    design: &DMatrix<f64>,
    t: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    logistic_fit_traced(design, t, max_iter, tol).map(|(coef, _)| coef)
}

/// As `logistic_fit`, additionally returning the Newton decrement
/// √(gᵀH⁻¹g) recorded at each accepted iteration.
pub fn logistic_fit_traced(
    design: &DMatrix<f64>,
    t: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = design.nrows();
    let p = design.ncols();
    assert_eq!(t.len(), n);
    let ones = t.iter().filter(|&&ti| ti > 0.5).count();
    if ones == 0 || ones == n {
        return Err(Error::SeparableData);
    }
    let mut coef = DVector::zeros(p);
    let mut ll = logistic_loglik(design, t, &coef);
    let mut grad_norm = f64::INFINITY;
    let mut decrements = Vec::new();
    for _ in 0..max_iter {
        let eta = design * &coef;
        let probs: Vec<f64> = eta.iter().map(|&z| sigmoid(z)).collect();
        let grad = DVector::from_fn(p, |j, _| {
            (0..n).map(|i| design[(i, j)] * (t[i] - probs[i])).sum()
        });
        grad_norm = grad.amax();
        if grad_norm < tol {
            return Ok((coef, decrements));
        }
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let wi = (probs[i] * (1.0 - probs[i])).max(1e-12);
            for a in 0..p {
                for b in a..p {
                    hess[(a, b)] += wi * design[(i, a)] * design[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let step = hess
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&grad))
            .ok_or(Error::SeparableData)?;
        decrements.push(grad.dot(&step).max(0.0).sqrt());
        // Step halving keeps the log-likelihood nondecreasing.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &coef + &step * scale;
            let ll_new = logistic_loglik(design, t, &candidate);
            if ll_new >= ll - 1e-12 {
                coef = candidate;
                ll = ll_new;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::DidNotConverge { grad_norm });
        }
        if coef.norm() > 1e3 {
            return Err(Error::SeparableData);
        }
    }
    Err(Error::DidNotConverge { grad_norm })
}
