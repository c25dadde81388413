//! Observed-information standard errors for the latent-process parameters.
//!
//! The regression parameters are held at their estimates, so the standard
//! errors are plug-in values. The information is
//! `E(−L_c'' | y) − Var(L_c' | y)` for the complete-data latent
//! log-likelihood `L_c`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{estep, forward_backward, log_emissions, ForwardBackward};
use crate::model::{LatentModel, ObservedSeries, Responsibilities, Theta};
use crate::mstep::{update_latent_iid, update_latent_markov};

pub const BOUNDARY: f64 = 1e-6;
pub const FIXED_POINT_TOL: f64 = 1e-6;
/// Largest series accepted by the quadratic-cost Markov information.
pub const MARKOV_MAX_N: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationMatrix {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    /// Regression parameters were treated as known.
    pub plug_in: bool,
}

impl InformationMatrix {
    /// Requires the smallest eigenvalue to exceed `1e-10` times the scale of
    /// the complete-data information `scale`.
    fn assemble(names: Vec<String>, estimates: Vec<f64>, info: DMatrix<f64>, scale: f64) -> Result<Self> {
        let sym = (&info + info.transpose()) * 0.5;
        let min_eig = sym.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > 1e-10 * scale) {
            return Err(Error::PositiveDefiniteViolation);
        }
        let chol = sym.clone().cholesky().ok_or(Error::PositiveDefiniteViolation)?;
        let cov = chol.inverse();
        let std_errors = cov.diagonal().iter().map(|v| v.sqrt()).collect();
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect();
        Ok(Self {
            names,
            estimates,
            matrix: rows(&sym),
            covariance: rows(&cov),
            std_errors,
            plug_in: true,
        })
    }

    pub fn info(&self) -> DMatrix<f64> {
        let k = self.matrix.len();
        DMatrix::from_fn(k, k, |r, c| self.matrix[r][c])
    }
}

fn check_interior(name: &str, v: f64) -> Result<()> {
    if !(BOUNDARY..=1.0 - BOUNDARY).contains(&v) {
        return Err(Error::BoundaryEstimate {
            name: name.to_string(),
            value: v,
        });
    }
    Ok(())
}

/// Information for `p_1..p_{J−1}` of an iid latent model, with
/// `p_J = 1 − Σ_{k<J} p_k`. `p_hat` must be the column means of `resp`.
pub fn info_iid(resp: &Responsibilities, p_hat: &[f64]) -> Result<InformationMatrix> {
    let j = p_hat.len();
    if j < 2 || resp.n_states() != j {
        return Err(Error::Config("iid information needs J ≥ 2 matching responsibilities".into()));
    }
    for (k, &p) in p_hat.iter().enumerate() {
        check_interior(&format!("p{}", k + 1), p)?;
    }
    let n = resp.n();
    let means: Vec<f64> = resp.mass().iter().map(|m| m / n as f64).collect();
    let deviation = means
        .iter()
        .zip(p_hat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if deviation > FIXED_POINT_TOL {
        return Err(Error::NotAtFixedPoint { deviation });
    }
    let (info, scale) = iid_information(resp, p_hat);
    InformationMatrix::assemble(
        (1..j).map(|k| format!("p{k}")).collect(),
        p_hat[..j - 1].to_vec(),
        info,
        scale,
    )
}

/// `E(−L_c'' | y) − Var(L_c' | y)` for `p_1..p_{J−1}` at any `p`, together
/// with the size of the first term. At the fixed point the first term
/// reduces to `n (δ_ab / p_a + 1 / p_J)`.
pub fn iid_information(resp: &Responsibilities, p: &[f64]) -> (DMatrix<f64>, f64) {
    let j = p.len();
    let free = j - 1;
    let pj = p[free];
    let mass = resp.mass();
    let mut info = DMatrix::from_fn(free, free, |a, b| {
        mass[free] / (pj * pj) + if a == b { mass[a] / (p[a] * p[a]) } else { 0.0 }
    });
    let scale = info.amax();
    // Σ_i Cov(g_i) with g_i(k) = z_ik / p_k − z_iJ / p_J
    for i in 0..resp.n() {
        let q = resp.probs.row(i);
        let mean: Vec<f64> = (0..free).map(|k| q[k] / p[k] - q[free] / pj).collect();
        for a in 0..free {
            for b in 0..free {
                let second = if a == b { q[a] / (p[a] * p[a]) } else { 0.0 } + q[free] / (pj * pj);
                info[(a, b)] -= second - mean[a] * mean[b];
            }
        }
    }
    (info, scale)
}

/// Score contribution of one transition `r → s` with respect to
/// `(a_12, a_21)`.
fn score(r: usize, s: usize, a12: f64, a21: f64) -> Vector2<f64> {
    match (r, s) {
        (0, 0) => Vector2::new(-1.0 / (1.0 - a12), 0.0),
        (0, 1) => Vector2::new(1.0 / a12, 0.0),
        (1, 0) => Vector2::new(0.0, 1.0 / a21),
        _ => Vector2::new(0.0, -1.0 / (1.0 - a21)),
    }
}

/// Information for `(a_12, a_21)` of a two-state chain with the initial
/// distribution held fixed.
///
/// The cross terms `E(g_i g_kᵀ | y)` over transitions `i < k` are
/// accumulated through the scaled forward-backward quantities:
/// `Σ_{s,t} L_i(s) [M̃_{i+1} ⋯ M̃_{k−1}](s, t) R_k(t)` with
/// `L_i(s) = Σ_r α̂_{i−1}(r) M̃_i(r, s) g(r, s)` and
/// `R_k(t) = Σ_u M̃_k(t, u) β̂_k(u) g(t, u)`.
pub fn info_markov2_fb(fb: &ForwardBackward, a12: f64, a21: f64) -> Result<InformationMatrix> {
    let (info, scale) = markov2_information(fb, a12, a21)?;
    InformationMatrix::assemble(
        vec!["a12".into(), "a21".into()],
        vec![a12, a21],
        DMatrix::from_fn(2, 2, |r, c| info[(r, c)]),
        scale,
    )
}

/// The information of [`info_markov2_fb`] without the definiteness check,
/// with the size of `E(−L_c'' | y)`.
pub fn markov2_information(fb: &ForwardBackward, a12: f64, a21: f64) -> Result<(Matrix2<f64>, f64)> {
    check_interior("a12", a12)?;
    check_interior("a21", a21)?;
    if fb.n_states() != 2 {
        return Err(Error::Config("Markov information is limited to J = 2".into()));
    }
    let n = fb.n();
    if n > MARKOV_MAX_N {
        return Err(Error::ComplexityGuard { n, limit: MARKOV_MAX_N });
    }
    let alpha = fb.alpha();
    let beta = fb.beta();
    let g = |r: usize, s: usize| score(r, s, a12, a21);
    // per transition i = 1..n−1 (0-based target index)
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    let mut mean = Vec::with_capacity(n);
    let mut neg_hess = Matrix2::zeros();
    let mut own = Matrix2::zeros();
    for i in 1..n {
        let m = fb.step(i);
        let mut li = [Vector2::zeros(); 2];
        let mut ri = [Vector2::zeros(); 2];
        let mut ei = Vector2::zeros();
        for r in 0..2 {
            for s in 0..2 {
                let xi = alpha[(i - 1, r)] * m[(r, s)] * beta[(i, s)];
                let gv = g(r, s);
                li[s] += gv * (alpha[(i - 1, r)] * m[(r, s)]);
                ri[r] += gv * (m[(r, s)] * beta[(i, s)]);
                ei += gv * xi;
                own += gv * gv.transpose() * xi;
                let h = match (r, s) {
                    (0, 0) => Vector2::new(1.0 / (1.0 - a12).powi(2), 0.0),
                    (0, 1) => Vector2::new(1.0 / (a12 * a12), 0.0),
                    (1, 0) => Vector2::new(0.0, 1.0 / (a21 * a21)),
                    _ => Vector2::new(0.0, 1.0 / (1.0 - a21).powi(2)),
                };
                neg_hess += Matrix2::from_diagonal(&h) * xi;
            }
        }
        left.push(li);
        right.push(ri);
        mean.push(ei);
    }
    let total_mean: Vector2<f64> = mean.iter().sum();
    // Var(L') = Σ_i E(g_i g_iᵀ) + Σ_{i≠k} E(g_i g_kᵀ) − (Σ E g_i)(Σ E g_i)ᵀ
    let mut cross = Matrix2::zeros();
    let t = n - 1;
    for a in 0..t {
        // carried[s] = Σ_s' L_a(s') Bridge(s', s): one row per score component
        let mut carried = [left[a][0], left[a][1]];
        for b in a + 1..t {
            for tt in 0..2 {
                cross += carried[tt] * right[b][tt].transpose();
            }
            // extend the bridge by M̃ at target index b + 1
            let m = fb.step(b + 1);
            carried = [
                carried[0] * m[(0, 0)] + carried[1] * m[(1, 0)],
                carried[0] * m[(0, 1)] + carried[1] * m[(1, 1)],
            ];
        }
    }
    let var = own + cross + cross.transpose() - total_mean * total_mean.transpose();
    Ok((neg_hess - var, neg_hess.amax()))
}

pub fn info_markov2(series: &ObservedSeries, theta: &Theta) -> Result<InformationMatrix> {
    let LatentModel::Markov { initial, .. } = &theta.latent else {
        return Err(Error::Config("Markov information needs a Markov latent model".into()));
    };
    let a = theta.latent.transition_matrix().expect("markov");
    if a.nrows() != 2 {
        return Err(Error::Config("Markov information is limited to J = 2".into()));
    }
    let fb = forward_backward(&log_emissions(series, theta), initial, &a)?;
    info_markov2_fb(&fb, a[(0, 1)], a[(1, 0)])
}

fn latent_vector(l: &LatentModel) -> DVector<f64> {
    match l {
        LatentModel::Iid { probs } => DVector::from_row_slice(probs),
        LatentModel::Markov { transition, .. } => {
            DVector::from_iterator(transition.len().pow(2), transition.iter().flatten().copied())
        }
    }
}

/// Iterates the latent-parameter EM update with the regression parameters
/// fixed until the latent parameters move by less than `tol`. For Markov
/// models the initial distribution is held fixed.
pub fn refine_latent(series: &ObservedSeries, theta: &Theta, tol: f64, max_iter: usize) -> Result<Theta> {
    let mut t = theta.clone();
    for _ in 0..max_iter {
        let resp = estep(series, &t)?.resp;
        let next = match &t.latent {
            LatentModel::Iid { .. } => LatentModel::Iid {
                probs: update_latent_iid(&resp),
            },
            LatentModel::Markov { initial, .. } => {
                let (LatentModel::Markov { transition, .. }, _) = update_latent_markov(&resp)? else {
                    unreachable!()
                };
                LatentModel::Markov {
                    initial: initial.clone(),
                    transition,
                }
            }
        };
        let moved = (latent_vector(&next) - latent_vector(&t.latent)).amax();
        t.latent = next;
        if moved < tol {
            break;
        }
    }
    Ok(t)
}

/// Plug-in standard errors at `theta`: iid with any `J ≥ 2`, Markov with
/// `J = 2`. The latent parameters are first driven to their fixed point for
/// the given regression parameters; the refined estimates are reported.
pub fn standard_errors(series: &ObservedSeries, theta: &Theta) -> Result<InformationMatrix> {
    let refined = refine_latent(series, theta, 1e-12, 10_000)?;
    match &refined.latent {
        LatentModel::Iid { probs } => {
            let resp = estep(series, &refined)?.resp;
            info_iid(&resp, probs)
        }
        LatentModel::Markov { .. } => info_markov2(series, &refined),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::log_emission_density;
    use crate::model::{BayesianFunctions, KernelParams, NoiseModel, RegimeFunctions};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Log-likelihood by summing over every state path.
    fn brute_loglik(le: &DMatrix<f64>, initial: &[f64], a: &DMatrix<f64>) -> f64 {
        let (n, j) = le.shape();
        let mut total = 0.0;
        for code in 0..j.pow(n as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..n)
                .map(|_| {
                    let s = c % j;
                    c /= j;
                    s
                })
                .collect();
            let mut lp = initial[path[0]].ln() + le[(0, path[0])];
            for i in 1..n {
                lp += a[(path[i - 1], path[i])].ln() + le[(i, path[i])];
            }
            total += lp.exp();
        }
        total.ln()
    }

    fn random_log_emis(n: usize, j: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let means: Vec<f64> = (0..j).map(|k| k as f64 * 0.8).collect();
        DMatrix::from_fn(n, j, |_, k| {
            let y: f64 = rng.random_range(-0.5..2.0);
            log_emission_density(y, means[k], 0.5)
        })
    }

    fn markov_info_and_fd(seed: u64) -> (Matrix2<f64>, Matrix2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=10);
        let le = random_log_emis(n, 2, &mut rng);
        let initial = [0.5, 0.5];
        let a12 = rng.random_range(0.15..0.85);
        let a21 = rng.random_range(0.15..0.85);
        let mk = |x: f64, y: f64| DMatrix::from_row_slice(2, 2, &[1.0 - x, x, y, 1.0 - y]);
        let fb = forward_backward(&le, &initial, &mk(a12, a21)).unwrap();
        let (info, _) = markov2_information(&fb, a12, a21).unwrap();
        let h = 1e-4;
        let l = |x: f64, y: f64| brute_loglik(&le, &initial, &mk(x, y));
        let mut fd = Matrix2::zeros();
        fd[(0, 0)] = -(l(a12 + h, a21) - 2.0 * l(a12, a21) + l(a12 - h, a21)) / (h * h);
        fd[(1, 1)] = -(l(a12, a21 + h) - 2.0 * l(a12, a21) + l(a12, a21 - h)) / (h * h);
        let off = -(l(a12 + h, a21 + h) - l(a12 + h, a21 - h) - l(a12 - h, a21 + h) + l(a12 - h, a21 - h))
            / (4.0 * h * h);
        fd[(0, 1)] = off;
        fd[(1, 0)] = off;
        (info, fd)
    }

    #[test]
    fn markov_matches_finite_difference_hessian() {
        for seed in 0..10 {
            let (info, fd) = markov_info_and_fd(seed);
            let scale = fd.amax();
            for r in 0..2 {
                for c in 0..2 {
                    assert!(
                        (info[(r, c)] - fd[(r, c)]).abs() < 1e-4 * scale,
                        "seed {seed} ({r},{c}): {} vs {}",
                        info[(r, c)],
                        fd[(r, c)]
                    );
                }
            }
        }
    }

    /// `Var(L_c' | y)` by direct enumeration of paths, an independent check
    /// of the bridged cross terms.
    #[test]
    fn markov_score_variance_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 7;
        let le = random_log_emis(n, 2, &mut rng);
        let (a12, a21) = (0.3, 0.6);
        let a = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.6, 0.4]);
        let fb = forward_backward(&le, &[0.4, 0.6], &a).unwrap();
        let (info, _) = markov2_information(&fb, a12, a21).unwrap();
        let mut w_tot = 0.0;
        let mut m1 = Vector2::zeros();
        let mut m2 = Matrix2::zeros();
        let mut nh = Matrix2::zeros();
        for code in 0..(1 << n) {
            let path: Vec<usize> = (0..n).map(|i| (code >> i) & 1).collect();
            let mut lp = [0.4f64, 0.6][path[0]].ln() + le[(0, path[0])];
            let mut gsum = Vector2::zeros();
            let mut hsum = Matrix2::zeros();
            for i in 1..n {
                let (r, s) = (path[i - 1], path[i]);
                lp += a[(r, s)].ln() + le[(i, s)];
                let gv = score(r, s, a12, a21);
                gsum += gv;
                hsum += Matrix2::from_diagonal(&gv.component_mul(&gv));
            }
            let w = lp.exp();
            w_tot += w;
            m1 += gsum * w;
            m2 += gsum * gsum.transpose() * w;
            nh += hsum * w;
        }
        m1 /= w_tot;
        m2 /= w_tot;
        nh /= w_tot;
        let oracle = nh - (m2 - m1 * m1.transpose());
        for r in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(info[(r, c)], oracle[(r, c)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn hard_assignments_give_multinomial_information() {
        let n = 10;
        let probs = DMatrix::from_fn(n, 2, |i, k| if (i < 7) == (k == 0) { 1.0 } else { 0.0 });
        let resp = Responsibilities { probs, pairs: None };
        let info = info_iid(&resp, &[0.7, 0.3]).unwrap();
        assert_abs_diff_eq!(info.matrix[0][0], 10.0 / (0.7 * 0.3), epsilon = 1e-10);
        assert_abs_diff_eq!(info.matrix[0][0], 47.619047619047, epsilon = 1e-9);
        assert_abs_diff_eq!(info.std_errors[0], (0.7f64 * 0.3 / 10.0).sqrt(), epsilon = 1e-12);
        assert!((info.std_errors[0] - 0.1449).abs() < 1e-4);
        assert!(info.plug_in);
    }

    #[test]
    fn hard_three_way_matches_closed_form() {
        let n = 12;
        let lab = |i: usize| if i < 3 { 0 } else if i < 8 { 1 } else { 2 };
        let probs = DMatrix::from_fn(n, 3, |i, k| if lab(i) == k { 1.0 } else { 0.0 });
        let p = [3.0 / 12.0, 5.0 / 12.0, 4.0 / 12.0];
        let info = info_iid(&Responsibilities { probs, pairs: None }, &p).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let e = 12.0 / p[2] + if a == b { 12.0 / p[a] } else { 0.0 };
                assert_abs_diff_eq!(info.matrix[a][b], e, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn uninformative_responsibilities_are_singular() {
        let probs = DMatrix::from_fn(10, 2, |_, k| if k == 0 { 0.7 } else { 0.3 });
        let r = info_iid(&Responsibilities { probs, pairs: None }, &[0.7, 0.3]);
        assert!(matches!(r, Err(Error::PositiveDefiniteViolation)));
    }

    #[test]
    fn iid_guards() {
        let probs = DMatrix::from_fn(4, 2, |i, k| if (i == 0) == (k == 0) { 1.0 } else { 0.0 });
        let resp = Responsibilities { probs, pairs: None };
        assert!(matches!(info_iid(&resp, &[0.5, 0.5]), Err(Error::NotAtFixedPoint { .. })));
        let resp = Responsibilities { probs: DMatrix::from_fn(4, 2, |_, k| (k == 0) as u8 as f64), pairs: None };
        assert!(matches!(info_iid(&resp, &[1.0, 0.0]), Err(Error::BoundaryEstimate { .. })));
    }

    #[test]
    fn markov_boundary_and_guard() {
        let le = DMatrix::zeros(5, 2);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.5]);
        let fb = forward_backward(&le, &[0.5, 0.5], &a).unwrap();
        assert!(matches!(info_markov2_fb(&fb, 1.0, 0.5), Err(Error::BoundaryEstimate { .. })));
        let le = DMatrix::zeros(MARKOV_MAX_N + 1, 2);
        let a = DMatrix::from_element(2, 2, 0.5);
        let fb = forward_backward(&le, &[0.5, 0.5], &a).unwrap();
        assert!(matches!(info_markov2_fb(&fb, 0.5, 0.5), Err(Error::ComplexityGuard { .. })));
    }

    fn iid_series(seed: u64, n: usize) -> (ObservedSeries, Theta) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.6 { 0.0 } else { 1.0 } + rng.random_range(-0.4..0.4))
            .collect();
        let series = ObservedSeries::new(x, y).unwrap();
        let kernels = vec![KernelParams { u: 1.0, s: 2.0 }; 2];
        let fitted = vec![DVector::zeros(n), DVector::from_element(n, 1.0)];
        let funcs = BayesianFunctions::from_fitted(series.x(), fitted, kernels).unwrap();
        let p = rng.random_range(0.2..0.8);
        let theta = Theta::new(
            LatentModel::Iid { probs: vec![p, 1.0 - p] },
            RegimeFunctions::Bayesian(funcs),
            NoiseModel::separate(vec![0.1, 0.1]),
        )
        .unwrap();
        (series, theta)
    }

    fn iid_loglik(series: &ObservedSeries, theta: &Theta, p: &[f64]) -> f64 {
        let mut t = theta.clone();
        t.latent = LatentModel::Iid { probs: p.to_vec() };
        estep(series, &t).unwrap().loglik
    }

    #[test]
    fn iid_matches_finite_difference_hessian() {
        for seed in 0..10 {
            let (series, theta) = iid_series(seed, 4 + seed as usize % 7);
            let LatentModel::Iid { probs } = &theta.latent else { unreachable!() };
            let resp = estep(&series, &theta).unwrap().resp;
            let (info, _) = iid_information(&resp, probs);
            let p = probs[0];
            let l = |q: f64| iid_loglik(&series, &theta, &[q, 1.0 - q]);
            let h = 1e-4;
            let fd = -(l(p + h) - 2.0 * l(p) + l(p - h)) / (h * h);
            assert!((info[(0, 0)] - fd).abs() < 1e-4 * fd.abs().max(1.0), "seed {seed}: {} vs {fd}", info[(0, 0)]);
        }
    }

    #[test]
    fn refined_fit_reports_fixed_point_errors() {
        let (series, theta) = iid_series(3, 60);
        let se = standard_errors(&series, &theta).unwrap();
        let p = se.estimates[0];
        // the refined estimate is a stationary point of the likelihood in p
        let l = |q: f64| iid_loglik(&series, &theta, &[q, 1.0 - q]);
        let h = 1e-5;
        assert!(((l(p + h) - l(p - h)) / (2.0 * h)).abs() < 1e-5);
        let fd = -(l(p + h) - 2.0 * l(p) + l(p - h)) / (h * h);
        assert!((se.matrix[0][0] - fd).abs() < 1e-3 * fd);
        assert_abs_diff_eq!(se.std_errors[0], 1.0 / se.matrix[0][0].sqrt(), epsilon = 1e-12);
    }
}
