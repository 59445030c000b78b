//! Linear-quadratic transport between centered Gaussians.
//!
//! For `x_{k+1} = A x_k + B u_k` with `L(x, u) = x'Qx + u'Ru` the value
//! functions are quadratic, `v_k(x) = x'P_k x`, and the dual problem becomes
//! a semidefinite program over `{P_k}`. Optimal `{P_k}` satisfy the Riccati
//! equality, so they are fixed by the terminal matrix `P_T`; [`solve_gaussian`]
//! maximizes `Tr(P_1 Sigma_1) - Tr(P_T Sigma_T)` over `P_T` alone.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Smallest admissible eigenvalue of `R + B'P_{k+1}B`.
pub const DOMAIN_EPS: f64 = 1e-10;
/// LMI blocks with a minimum eigenvalue above `-LMI_TOL` count as feasible.
pub const LMI_TOL: f64 = 1e-8;
/// Gradient infinity-norm at which the ascent stops.
pub const GRAD_TOL: f64 = 1e-7;
pub const MAX_ASCENT_STEPS: usize = 5000;

fn min_eig(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Linear dynamics, quadratic cost, and zero-mean Gaussian marginals.
#[derive(Debug, Clone)]
pub struct GaussianLQProblem {
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: Matrix,
    sigma1: Matrix,
    sigma_t: Matrix,
    horizon: usize,
}

impl GaussianLQProblem {
    /// Validates shapes, symmetry, `Q >= 0`, `R > 0`, `Sigma_1, Sigma_T > 0`,
    /// invertibility of `A`, and that `(A, B)` reaches every state within the
    /// `T - 1` available steps.
    pub fn new(
        a: Matrix,
        b: Matrix,
        q: Matrix,
        r: Matrix,
        sigma1: Matrix,
        sigma_t: Matrix,
        horizon: usize,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidGaussian(msg));
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return bad(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols()));
        }
        let m = b.ncols();
        if b.nrows() != n || m == 0 {
            return bad(format!("B must be {n}xm with m >= 1, got {}x{}", b.nrows(), m));
        }
        if horizon < 2 {
            return bad(format!("horizon must be at least 2, got {horizon}"));
        }
        for (name, mat, dim) in [
            ("Q", &q, n),
            ("R", &r, m),
            ("Sigma1", &sigma1, n),
            ("SigmaT", &sigma_t, n),
        ] {
            if mat.nrows() != dim || mat.ncols() != dim {
                return bad(format!("{name} must be {dim}x{dim}, got {}x{}", mat.nrows(), mat.ncols()));
            }
            if !is_symmetric(mat, 1e-12) {
                return bad(format!("{name} is not symmetric"));
            }
        }
        for x in [&a, &b, &q, &r, &sigma1, &sigma_t] {
            if x.iter().any(|v| !v.is_finite()) {
                return bad("non-finite matrix entry".into());
            }
        }
        if min_eig(&q) < -1e-10 {
            return bad("Q must be positive semidefinite".into());
        }
        if min_eig(&r) < 1e-10 {
            return bad("R must be positive definite".into());
        }
        if min_eig(&sigma1) <= 0.0 || min_eig(&sigma_t) <= 0.0 {
            return bad("covariances must be positive definite".into());
        }
        if a.clone().svd(false, false).singular_values.min() < 1e-10 {
            return bad("A must be invertible".into());
        }
        let mut blocks = Vec::with_capacity(horizon - 1);
        let mut ak_b = b.clone();
        for _ in 0..horizon - 1 {
            blocks.push(ak_b.clone());
            ak_b = &a * ak_b;
        }
        let ctrb = Matrix::from_columns(
            &blocks.iter().flat_map(|blk| blk.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>(),
        );
        if ctrb.rank(1e-10 * (1.0 + ctrb.amax())) < n {
            return bad(format!("(A, B) cannot reach every state in {} steps", horizon - 1));
        }
        Ok(Self {
            a,
            b,
            q,
            r,
            sigma1,
            sigma_t,
            horizon,
        })
    }

    /// `x_{k+1} = x_k + u_k`, `L = |u|^2` over two stages.
    pub fn free_transport(sigma1: Matrix, sigma2: Matrix) -> Result<Self> {
        let n = sigma1.nrows();
        Self::new(
            Matrix::identity(n, n),
            Matrix::identity(n, n),
            Matrix::zeros(n, n),
            Matrix::identity(n, n),
            sigma1,
            sigma2,
            2,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn sigma1(&self) -> &Matrix {
        &self.sigma1
    }

    pub fn sigma_t(&self) -> &Matrix {
        &self.sigma_t
    }
}

/// Only centered Gaussians are supported.
pub fn require_zero_mean(mean: &[f64]) -> Result<()> {
    if mean.iter().any(|&m| m != 0.0) {
        return Err(Error::InvalidGaussian(
            "only zero-mean marginals are supported".into(),
        ));
    }
    Ok(())
}

/// Quadratic value functions `P[0..T]` and the feedback gains between them.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Vec<Matrix>,
    /// `G_k = (R + B'P_{k+1}B)^{-1} B'P_{k+1}A`, so `u = -G_k x`.
    pub gains: Vec<Matrix>,
    /// `Tr(P_1 Sigma_1) - Tr(P_T Sigma_T)`.
    pub value: f64,
}

/// `R + B'P_{k+1}B` lost definiteness while computing `P[stage]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainViolation {
    pub stage: usize,
}

/// Backward Riccati equality from `p_t` down to `P[0]`.
pub fn riccati_backward(
    prob: &GaussianLQProblem,
    p_t: &Matrix,
) -> std::result::Result<RiccatiSolution, DomainViolation> {
    let t = prob.horizon;
    let (a, b, q, r) = (&prob.a, &prob.b, &prob.q, &prob.r);
    let mut p = vec![Matrix::zeros(0, 0); t];
    let mut gains = vec![Matrix::zeros(0, 0); t - 1];
    p[t - 1] = p_t.clone();
    for k in (0..t - 1).rev() {
        let next = &p[k + 1];
        let bt_p = b.transpose() * next;
        let s = r + &bt_p * b;
        let s = (&s + s.transpose()) * 0.5;
        if min_eig(&s) < DOMAIN_EPS {
            return Err(DomainViolation { stage: k });
        }
        let g = s
            .cholesky()
            .ok_or(DomainViolation { stage: k })?
            .solve(&(&bt_p * a));
        let at_p = a.transpose() * next;
        let pk = q + &at_p * a - &at_p * b * &g;
        p[k] = (&pk + pk.transpose()) * 0.5;
        gains[k] = g;
    }
    let value = (&p[0] * &prob.sigma1).trace() - (&p[t - 1] * &prob.sigma_t).trace();
    Ok(RiccatiSolution { p, gains, value })
}

/// Free coordinates of a symmetric matrix: the upper triangle, row-major.
fn sym_basis(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

fn sym_from(n: usize, basis: &[(usize, usize)], x: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for (&(i, j), &v) in basis.iter().zip(x) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    m
}

fn objective(prob: &GaussianLQProblem, basis: &[(usize, usize)], x: &[f64]) -> f64 {
    let n = prob.state_dim();
    riccati_backward(prob, &sym_from(n, basis, x)).map_or(f64::NEG_INFINITY, |s| s.value)
}

/// Central differences; `None` if a probe leaves the Riccati domain.
fn fd_gradient(prob: &GaussianLQProblem, basis: &[(usize, usize)], x: &[f64]) -> Option<Vec<f64>> {
    let norm = sym_from(prob.state_dim(), basis, x).norm();
    let step = 1e-6 * (1.0 + norm);
    let grad: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|e| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[e] += step;
            dn[e] -= step;
            (objective(prob, basis, &up) - objective(prob, basis, &dn)) / (2.0 * step)
        })
        .collect();
    grad.iter().all(|g| g.is_finite()).then_some(grad)
}

/// Gradient ascent from `x0`. Returns the best point and its value.
fn ascend(prob: &GaussianLQProblem, basis: &[(usize, usize)], x0: Vec<f64>) -> Option<(Vec<f64>, f64)> {
    let mut x = x0;
    let mut fx = objective(prob, basis, &x);
    if !fx.is_finite() {
        return None;
    }
    let mut grad = fd_gradient(prob, basis, &x)?;
    let mut step = 1.0;
    for _ in 0..MAX_ASCENT_STEPS {
        if grad.iter().fold(0.0_f64, |m, g| m.max(g.abs())) <= GRAD_TOL {
            break;
        }
        let mut trial = step;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi + trial * gi).collect();
            let fc = objective(prob, basis, &cand);
            if fc > fx {
                accepted = Some((cand, fc));
                break;
            }
            trial *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let Some(g_new) = fd_gradient(prob, basis, &cand) else { break };
        // Barzilai-Borwein length for the next trial step
        let (mut ss, mut sy) = (0.0, 0.0);
        for e in 0..x.len() {
            let s = cand[e] - x[e];
            ss += s * s;
            sy += s * (g_new[e] - grad[e]);
        }
        step = if sy < 0.0 { ss / -sy } else { 2.0 * trial };
        x = cand;
        fx = fc;
        grad = g_new;
    }
    Some((x, fx))
}

/// Maximizes `Tr(P_1 Sigma_1) - Tr(P_T Sigma_T)` over symmetric `P_T`.
///
/// Starts from `P_T = 0`, then `0.1 I` and `-0.1 I`, and keeps the best
/// result. Each run is a gradient ascent with central-difference gradients
/// and a halving line search.
pub fn solve_gaussian(prob: &GaussianLQProblem) -> Result<RiccatiSolution> {
    let n = prob.state_dim();
    let basis = sym_basis(n);
    let diag = |c: f64| -> Vec<f64> {
        basis.iter().map(|&(i, j)| if i == j { c } else { 0.0 }).collect()
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for c in [0.0, 0.1, -0.1] {
        if let Some((x, fx)) = ascend(prob, &basis, diag(c)) {
            if best.as_ref().map_or(true, |(_, fb)| fx > *fb) {
                best = Some((x, fx));
            }
        }
    }
    let (x, _) = best.ok_or(Error::InfeasibleStart)?;
    riccati_backward(prob, &sym_from(n, &basis, &x)).map_err(|_| Error::InfeasibleStart)
}

/// Per-stage minimum eigenvalues of the LMI blocks.
#[derive(Debug, Clone)]
pub struct LmiReport {
    pub feasible: bool,
    pub worst_margin: f64,
    pub margins: Vec<f64>,
}

/// Checks `[R + B'P_{k+1}B, B'P_{k+1}A; A'P_{k+1}B, A'P_{k+1}A - P_k + Q] >= 0`
/// for every transition of `sol`.
pub fn verify_lmi(prob: &GaussianLQProblem, sol: &RiccatiSolution) -> LmiReport {
    verify_lmi_for(prob, &sol.p)
}

/// [`verify_lmi`] for an arbitrary candidate sequence `P[0..T]`.
pub fn verify_lmi_for(prob: &GaussianLQProblem, p: &[Matrix]) -> LmiReport {
    let (n, m) = (prob.state_dim(), prob.input_dim());
    let (a, b) = (&prob.a, &prob.b);
    let margins: Vec<f64> = (0..p.len().saturating_sub(1))
        .map(|k| {
            let next = &p[k + 1];
            let mut blk = Matrix::zeros(m + n, m + n);
            blk.view_mut((0, 0), (m, m))
                .copy_from(&(&prob.r + b.transpose() * next * b));
            let off = b.transpose() * next * a;
            blk.view_mut((0, m), (m, n)).copy_from(&off);
            blk.view_mut((m, 0), (n, m)).copy_from(&off.transpose());
            blk.view_mut((m, m), (n, n))
                .copy_from(&(a.transpose() * next * a - &p[k] + &prob.q));
            min_eig(&((&blk + blk.transpose()) * 0.5))
        })
        .collect();
    let worst_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    LmiReport {
        feasible: worst_margin >= -LMI_TOL,
        worst_margin,
        margins,
    }
}

/// Squared Wasserstein-2 distance between `N(0, sigma1)` and `N(0, sigma2)`
/// from the two-stage free-transport program.
pub fn wasserstein_sdp(sigma1: &Matrix, sigma2: &Matrix) -> Result<f64> {
    let prob = GaussianLQProblem::free_transport(sigma1.clone(), sigma2.clone())?;
    Ok(solve_gaussian(&prob)?.value)
}

/// Feedback gains and the closed-loop covariances `Sigma_{k+1} = (A - B G_k) Sigma_k (A - B G_k)'`.
#[derive(Debug, Clone)]
pub struct GainSynthesis {
    pub gains: Vec<Matrix>,
    pub covariances: Vec<Matrix>,
}

impl GainSynthesis {
    /// Relative Frobenius distance between the steered and requested terminal covariance.
    pub fn terminal_error(&self, prob: &GaussianLQProblem) -> f64 {
        let last = self.covariances.last().expect("at least one covariance");
        (last - &prob.sigma_t).norm() / prob.sigma_t.norm()
    }
}

pub fn gain_synthesis(sol: &RiccatiSolution, prob: &GaussianLQProblem) -> GainSynthesis {
    let mut covariances = vec![prob.sigma1.clone()];
    for g in &sol.gains {
        let cl = &prob.a - &prob.b * g;
        let next = &cl * covariances.last().unwrap() * cl.transpose();
        covariances.push((&next + next.transpose()) * 0.5);
    }
    GainSynthesis {
        gains: sol.gains.clone(),
        covariances,
    }
}

/// Symmetric square root with eigenvalues floored at `1e-14`.
fn sqrtm_psd(m: &Matrix) -> Matrix {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = Matrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(1e-14).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn bures_wasserstein_sq(sigma1: &Matrix, sigma2: &Matrix) -> f64 {
    let r = sqrtm_psd(sigma1);
    let cross = sqrtm_psd(&(&r * sigma2 * &r));
    (sigma1 + sigma2 - cross * 2.0).trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(x: f64) -> Matrix {
        Matrix::from_element(1, 1, x)
    }

    fn scalar_problem(horizon: usize, s1: f64, st: f64) -> GaussianLQProblem {
        GaussianLQProblem::new(
            scalar(1.0),
            scalar(1.0),
            scalar(0.0),
            scalar(1.0),
            scalar(s1),
            scalar(st),
            horizon,
        )
        .unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let g = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose() + Matrix::identity(n, n) * 0.2
    }

    /// Cyclic Jacobi eigenvalue sweep, independent of nalgebra's solver.
    fn jacobi_sqrt(m: &Matrix) -> Matrix {
        let n = m.nrows();
        let mut a = m.clone();
        let mut v = Matrix::identity(n, n);
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[(p, q)] * a[(p, q)];
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let mut rot = Matrix::identity(n, n);
                    rot[(p, p)] = c;
                    rot[(q, q)] = c;
                    rot[(p, q)] = s;
                    rot[(q, p)] = -s;
                    a = rot.transpose() * &a * &rot;
                    v = &v * &rot;
                }
            }
            if off < 1e-30 {
                break;
            }
        }
        let d = Matrix::from_fn(n, n, |i, j| if i == j { a[(i, i)].max(0.0).sqrt() } else { 0.0 });
        &v * d * v.transpose()
    }

    fn bures_oracle(s1: &Matrix, s2: &Matrix) -> f64 {
        let r = jacobi_sqrt(s1);
        (s1 + s2 - jacobi_sqrt(&(&r * s2 * &r)) * 2.0).trace()
    }

    #[test]
    fn scalar_recursion() {
        let prob = scalar_problem(2, 1.0, 4.0);
        for p in [0.0, 0.7, -0.5, 3.0] {
            let sol = riccati_backward(&prob, &scalar(p)).unwrap();
            assert_relative_eq!(sol.p[0][(0, 0)], p / (1.0 + p), epsilon = 1e-15);
        }
        let sol = riccati_backward(&prob, &scalar(-0.5)).unwrap();
        assert_relative_eq!(sol.p[0][(0, 0)], -1.0, epsilon = 1e-15);
        assert_relative_eq!(sol.value, 1.0, epsilon = 1e-15);
        assert_eq!(riccati_backward(&prob, &scalar(-1.0)).unwrap_err(), DomainViolation { stage: 0 });
        assert!(riccati_backward(&prob, &scalar(-2.0)).is_err());
    }

    #[test]
    fn zero_terminal_matrix_is_a_fixed_point() {
        let prob = scalar_problem(4, 1.0, 2.0);
        let sol = riccati_backward(&prob, &scalar(0.0)).unwrap();
        assert!(sol.p.iter().all(|p| p[(0, 0)] == 0.0));
        assert_eq!(sol.value, 0.0);
    }

    #[test]
    fn riccati_equality_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 3;
        let prob = GaussianLQProblem::new(
            Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.2 * rng.gen_range(-1.0..1.0) }),
            Matrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0)),
            Matrix::identity(n, n) * 0.3,
            Matrix::identity(2, 2),
            random_spd(&mut rng, n),
            random_spd(&mut rng, n),
            4,
        )
        .unwrap();
        let pt = random_spd(&mut rng, n);
        let sol = riccati_backward(&prob, &pt).unwrap();
        let (a, b, q, r) = (prob.a(), prob.b(), prob.q(), prob.r());
        for k in 0..3 {
            let nx = &sol.p[k + 1];
            let s = r + b.transpose() * nx * b;
            let rhs = q + a.transpose() * nx * a
                - a.transpose() * nx * b * s.try_inverse().unwrap() * b.transpose() * nx * a;
            assert!((&sol.p[k] - rhs).amax() < 1e-8);
            assert!(is_symmetric(&sol.p[k], 1e-10));
        }
        assert!(verify_lmi(&prob, &sol).worst_margin >= -LMI_TOL);
    }

    #[test]
    fn scalar_benchmark_value_and_gain() {
        let prob = scalar_problem(2, 1.0, 4.0);
        let sol = solve_gaussian(&prob).unwrap();
        assert_relative_eq!(sol.value, 1.0, epsilon = 1e-6);
        assert_relative_eq!(sol.p[1][(0, 0)], -0.5, epsilon = 1e-5);
        let syn = gain_synthesis(&sol, &prob);
        assert_relative_eq!(1.0 - syn.gains[0][(0, 0)], 2.0, epsilon = 1e-5);
        assert_relative_eq!(syn.covariances[1][(0, 0)], 4.0, epsilon = 1e-4);
    }

    #[test]
    fn identical_marginals_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_spd(&mut rng, 2);
        let prob = GaussianLQProblem::free_transport(s.clone(), s.clone()).unwrap();
        let sol = solve_gaussian(&prob).unwrap();
        assert!(sol.value.abs() < 1e-12);
        assert!(sol.p.iter().all(|p| p.amax() < 1e-9));
        let syn = gain_synthesis(&sol, &prob);
        assert!(syn.gains[0].amax() < 1e-9);
        assert!((&syn.covariances[1] - &s).amax() < 1e-9);
    }

    #[test]
    fn diagonal_case_decouples() {
        let s1 = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0]));
        let s2 = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![9.0, 1.0]));
        assert_relative_eq!(wasserstein_sdp(&s1, &s2).unwrap(), 5.0, max_relative = 1e-6);
        assert_relative_eq!(bures_wasserstein_sq(&s1, &s2), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn bures_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=4 {
            let (a, b) = (random_spd(&mut rng, n), random_spd(&mut rng, n));
            assert_relative_eq!(bures_wasserstein_sq(&a, &b), bures_oracle(&a, &b), max_relative = 1e-9);
        }
    }

    #[test]
    fn random_pairs_match_bures_and_steer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=3 {
            for _ in 0..3 {
                let (a, b) = (random_spd(&mut rng, n), random_spd(&mut rng, n));
                let prob = GaussianLQProblem::free_transport(a.clone(), b.clone()).unwrap();
                let sol = solve_gaussian(&prob).unwrap();
                assert_relative_eq!(sol.value, bures_oracle(&a, &b), max_relative = 1e-3);
                assert!(gain_synthesis(&sol, &prob).terminal_error(&prob) <= 1e-4);
                assert!(verify_lmi(&prob, &sol).feasible);
            }
        }
    }

    #[test]
    fn longer_horizon_matches_direct_transport() {
        // with Q = 0 the optimal T-step cost of x+u is W2^2 / (T - 1)
        let prob = scalar_problem(4, 1.0, 4.0);
        let sol = solve_gaussian(&prob).unwrap();
        assert_relative_eq!(sol.value, 1.0 / 3.0, max_relative = 1e-6);
        assert!(gain_synthesis(&sol, &prob).terminal_error(&prob) <= 1e-4);
    }

    #[test]
    fn inflated_interior_stage_violates_lmi() {
        let prob = scalar_problem(3, 1.0, 4.0);
        let sol = solve_gaussian(&prob).unwrap();
        assert!(verify_lmi(&prob, &sol).worst_margin >= -LMI_TOL);
        let mut p = sol.p.clone();
        p[1] += scalar(0.1);
        let report = verify_lmi_for(&prob, &p);
        assert!(!report.feasible);
        assert!(report.worst_margin < -1e-3, "{}", report.worst_margin);
    }

    #[test]
    fn zero_value_functions_give_psd_blocks() {
        let prob = scalar_problem(3, 1.0, 4.0);
        let report = verify_lmi_for(&prob, &vec![scalar(0.0); 3]);
        assert_eq!(report.worst_margin, 0.0);
        assert!(report.feasible);
    }

    #[test]
    fn construction_rejects_bad_input() {
        let ok = || (scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0), scalar(1.0), scalar(4.0));
        let (a, b, q, r, s1, st) = ok();
        assert!(GaussianLQProblem::new(a, b, q, scalar(0.0), s1, st, 2).is_err());
        let (_, b, q, r2, s1, st) = ok();
        assert!(GaussianLQProblem::new(scalar(0.0), b, q, r2, s1, st, 2).is_err());
        let (a, _, q, r3, s1, st) = ok();
        assert!(GaussianLQProblem::new(a, scalar(0.0), q, r3, s1, st, 2).is_err());
        let (a, b, q, _, _, st) = ok();
        assert!(GaussianLQProblem::new(a, b, q, r, scalar(-1.0), st, 2).is_err());
        let (a, b, q, r, s1, st) = ok();
        assert!(GaussianLQProblem::new(a, b, q, r, s1, st, 1).is_err());
        // one input cannot reach two states in a single step
        let two = Matrix::identity(2, 2);
        let b1 = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let shift = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(GaussianLQProblem::new(
            shift.clone(), b1.clone(), Matrix::zeros(2, 2), scalar(1.0), two.clone(), two.clone(), 2
        )
        .is_err());
        assert!(GaussianLQProblem::new(shift, b1, Matrix::zeros(2, 2), scalar(1.0), two.clone(), two, 3).is_ok());
        assert!(require_zero_mean(&[0.0, 0.0]).is_ok());
        assert!(require_zero_mean(&[0.0, 0.1]).is_err());
    }

    /// Quadrature of `phi` against `N(0, var)` on the fine grid `xs`.
    fn expect(xs: &[f64], dx: f64, var: f64, phi: impl Fn(usize) -> f64) -> f64 {
        let norm = (2.0 * std::f64::consts::PI * var).sqrt();
        (0..xs.len())
            .map(|i| phi(i) * (-xs[i] * xs[i] / (2.0 * var)).exp() / norm * dx)
            .sum()
    }

    #[test]
    fn quadratic_value_functions_cannot_be_improved() {
        // scalar benchmark: the optimum is v_1 = -x^2, v_2 = -x^2/2
        let (s1, st) = (1.0, 4.0);
        let prob = scalar_problem(2, s1, st);
        let sol = solve_gaussian(&prob).unwrap();
        let (p1, p2) = (sol.p[0][(0, 0)], sol.p[1][(0, 0)]);
        let dx = 0.005;
        let xs: Vec<f64> = (0..4001).map(|i| -10.0 + i as f64 * dx).collect();
        let ys: Vec<f64> = (0..8001).map(|i| -20.0 + i as f64 * 2.0 * dx).collect();
        let value = |psi: &dyn Fn(f64) -> f64| -> f64 {
            let psi_y: Vec<f64> = ys.iter().map(|&y| psi(y)).collect();
            // c-transform v_1(x) = min_y (y - x)^2 + v_2(y), which restores
            // feasibility of any perturbed v_2
            let phi: Vec<f64> = xs
                .par_iter()
                .map(|&x| {
                    ys.iter()
                        .zip(&psi_y)
                        .map(|(&y, &p)| (y - x) * (y - x) + p)
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            expect(&xs, dx, s1, |i| phi[i]) - expect(&ys, 2.0 * dx, st, |j| psi_y[j])
        };
        let base = value(&|y| p2 * y * y);
        assert_relative_eq!(base, sol.value, epsilon = 1e-3);
        assert!((p1 + 1.0).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let terms: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(0.2..3.0),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let perturbed = value(&|y: f64| {
                p2 * y * y + terms.iter().map(|(a, w, ph)| a * (w * y + ph).sin()).sum::<f64>()
            });
            assert!(perturbed <= base + 1e-6, "{perturbed} > {base}");
        }
    }
}
