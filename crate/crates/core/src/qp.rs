//! Primal-dual interior-point solver for diagonal-Hessian convex QPs
//!
//! ```txt
//!     minimize    ½ xᵀ diag(quad) x + linearᵀ x
//!     subject to  G x  = h
//!                 A x <= b
//! ```
//!
//! The solver stops on the central path at a fixed barrier level `tau`
//! (every `μ_i s_i = tau`) instead of driving `tau` to zero. The perturbed KKT
//! system is then smooth in the problem data, which is what implicit
//! differentiation needs. The factorization of the reduced Newton system at
//! the returned point is kept so adjoint solves can reuse it.

use serde::{Deserialize, Serialize};

use crate::linalg::{Cholesky, DenseMatrix, NotPositiveDefinite, SparseMatrix};
use crate::scalar::{dot, norm_inf, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QuadraticProgram<T: Scalar> {
    pub quad: Vec<T>,
    pub linear: Vec<T>,
    pub eq: SparseMatrix<T>,
    pub eq_rhs: Vec<T>,
    pub ineq: SparseMatrix<T>,
    pub ineq_rhs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("KKT system is numerically singular at iteration {iteration}: {source}")]
    Singular {
        iteration: usize,
        #[source]
        source: NotPositiveDefinite,
    },
    #[error("no convergence after {iterations} iterations (best KKT residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct IpmOptions<T: Scalar> {
    /// Barrier level the solver terminates at.
    pub tau: T,
    /// Max-norm tolerance on the perturbed KKT residual.
    pub tol: T,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct KktResidual<T: Scalar> {
    pub stationarity: T,
    pub equality: T,
    pub inequality: T,
    pub complementarity: T,
}

impl<T: Scalar> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.equality)
            .max(self.inequality)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QpSolution<T: Scalar> {
    pub x: Vec<T>,
    /// Equality multipliers.
    pub nu: Vec<T>,
    /// Inequality multipliers, strictly positive.
    pub mu: Vec<T>,
    /// b − A x, strictly positive.
    pub slack: Vec<T>,
    pub objective: T,
    pub tau: T,
    pub residual: KktResidual<T>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub factorization: Option<KktFactorization<T>>,
}

impl<T: Scalar> QpSolution<T> {
    pub fn kkt_residual(&self) -> T {
        self.residual.max()
    }
}

/// Factorization of the reduced system `[H Gᵀ; G 0]` with `H = diag(quad) + Aᵀ W A`.
#[derive(Debug, Clone)]
pub struct KktFactorization<T> {
    hessian: HessianFactor<T>,
    schur: Option<Cholesky<T>>,
}

#[derive(Debug, Clone)]
enum HessianFactor<T> {
    Diagonal(Vec<T>),
    Arrow(ArrowFactor<T>),
    Dense(Cholesky<T>),
}

impl<T: Scalar> HessianFactor<T> {
    fn solve(&self, b: &[T]) -> Vec<T> {
        match self {
            HessianFactor::Diagonal(d) => b.iter().zip(d).map(|(x, h)| *x / *h).collect(),
            HessianFactor::Arrow(a) => a.solve(b),
            HessianFactor::Dense(ch) => ch.solve(b),
        }
    }
}

/// `H = [D  C; Cᵀ E]` with D diagonal over the "thin" columns and E dense over
/// a few "hub" columns, factored through the hub Schur complement `E − Cᵀ D⁻¹ C`.
#[derive(Debug, Clone)]
struct ArrowFactor<T> {
    /// Position of each column inside the hub block, if it is a hub.
    hub_of: Vec<Option<usize>>,
    hubs: Vec<usize>,
    diag: Vec<T>,
    /// Per thin column, its (hub position, coupling) entries.
    coupling: Vec<Vec<(usize, T)>>,
    schur: Cholesky<T>,
}

impl<T: Scalar> ArrowFactor<T> {
    /// Picks hubs as columns shared by two or more multi-entry rows. Returns
    /// `None` when some multi-entry row still couples two thin columns.
    fn hub_columns<U: Scalar>(qp: &QuadraticProgram<U>) -> Option<Vec<bool>> {
        let n = qp.quad.len();
        let mut count = vec![0usize; n];
        for i in 0..qp.ineq.rows() {
            if qp.ineq.row_len(i) > 1 {
                for (c, _) in qp.ineq.row(i) {
                    count[c] += 1;
                }
            }
        }
        let hub: Vec<bool> = count.iter().map(|c| *c >= 2).collect();
        let hubs = hub.iter().filter(|h| **h).count();
        if hubs == 0 || hubs * 4 > n {
            return None;
        }
        for i in 0..qp.ineq.rows() {
            if qp.ineq.row(i).filter(|(c, _)| !hub[*c]).count() > 1 {
                return None;
            }
        }
        Some(hub)
    }

    fn new(qp: &QuadraticProgram<T>, w: &[T], hub: &[bool]) -> Result<Self, NotPositiveDefinite> {
        let n = qp.quad.len();
        let mut hub_of = vec![None; n];
        let mut hubs = Vec::new();
        for (c, h) in hub.iter().enumerate() {
            if *h {
                hub_of[c] = Some(hubs.len());
                hubs.push(c);
            }
        }
        let nh = hubs.len();
        let mut diag = qp.quad.clone();
        let mut coupling: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        let mut e = DenseMatrix::zeros(nh, nh);
        for (c, &h) in hubs.iter().enumerate() {
            e[(c, c)] = qp.quad[h];
        }
        for (i, wi) in w.iter().enumerate() {
            let row: Vec<_> = qp.ineq.row(i).collect();
            let thin = row.iter().find(|(c, _)| hub_of[*c].is_none()).copied();
            if let Some((b, ab)) = thin {
                diag[b] += ab * ab * *wi;
            }
            for &(c1, a1) in &row {
                let Some(h1) = hub_of[c1] else { continue };
                if let Some((b, ab)) = thin {
                    coupling[b].push((h1, ab * a1 * *wi));
                }
                for &(c2, a2) in &row {
                    if let Some(h2) = hub_of[c2] {
                        e[(h1, h2)] += a1 * a2 * *wi;
                    }
                }
            }
        }
        for (b, d) in diag.iter().enumerate() {
            if hub_of[b].is_none() && !(*d > T::zero()) {
                return Err(NotPositiveDefinite {
                    pivot: b,
                    value: d.as_f64(),
                });
            }
        }
        for (b, entries) in coupling.iter().enumerate() {
            for &(h1, c1) in entries {
                for &(h2, c2) in entries {
                    e[(h1, h2)] -= c1 * c2 / diag[b];
                }
            }
        }
        let schur = Cholesky::factor(&e)?;
        Ok(Self {
            hub_of,
            hubs,
            diag,
            coupling,
            schur,
        })
    }

    fn solve(&self, r: &[T]) -> Vec<T> {
        let mut rh: Vec<T> = self.hubs.iter().map(|&h| r[h]).collect();
        for (b, entries) in self.coupling.iter().enumerate() {
            let db = r[b] / self.diag[b];
            for &(h, c) in entries {
                rh[h] -= c * db;
            }
        }
        self.schur.solve_in_place(&mut rh);
        let mut z = vec![T::zero(); r.len()];
        for (b, zb) in z.iter_mut().enumerate() {
            match self.hub_of[b] {
                Some(h) => *zb = rh[h],
                None => {
                    let mut v = r[b];
                    for &(h, c) in &self.coupling[b] {
                        v -= c * rh[h];
                    }
                    *zb = v / self.diag[b];
                }
            }
        }
        z
    }
}

impl<T: Scalar> KktFactorization<T> {
    /// Factors the reduced Newton matrix for barrier weights `w = μ / s`.
    pub fn new(qp: &QuadraticProgram<T>, w: &[T]) -> Result<Self, NotPositiveDefinite> {
        let n = qp.quad.len();
        let diagonal = (0..qp.ineq.rows()).all(|i| qp.ineq.row_len(i) <= 1);
        let hessian = if diagonal {
            let mut h = qp.quad.clone();
            for (i, wi) in w.iter().enumerate() {
                for (c, a) in qp.ineq.row(i) {
                    h[c] += a * a * *wi;
                }
            }
            if let Some(pivot) = h.iter().position(|v| !(*v > T::zero())) {
                return Err(NotPositiveDefinite {
                    pivot,
                    value: h[pivot].as_f64(),
                });
            }
            HessianFactor::Diagonal(h)
        } else if let Some(hub) = ArrowFactor::<T>::hub_columns(qp) {
            HessianFactor::Arrow(ArrowFactor::new(qp, w, &hub)?)
        } else {
            let mut h = DenseMatrix::zeros(n, n);
            for (k, q) in qp.quad.iter().enumerate() {
                h[(k, k)] = *q;
            }
            for (i, wi) in w.iter().enumerate() {
                let row: Vec<_> = qp.ineq.row(i).collect();
                for &(c1, a1) in &row {
                    for &(c2, a2) in &row {
                        h[(c1, c2)] += a1 * a2 * *wi;
                    }
                }
            }
            HessianFactor::Dense(Cholesky::factor(&h)?)
        };

        let p = qp.eq.rows();
        let schur = if p == 0 {
            None
        } else {
            let mut s = DenseMatrix::zeros(p, p);
            match &hessian {
                HessianFactor::Diagonal(h) => {
                    for col in qp.eq.columns().iter().zip(h) {
                        let (entries, hk) = col;
                        for &(i, gi) in entries {
                            for &(j, gj) in entries {
                                s[(i, j)] += gi * gj / *hk;
                            }
                        }
                    }
                }
                HessianFactor::Arrow(_) | HessianFactor::Dense(_) => {
                    for i in 0..p {
                        let mut gi = vec![T::zero(); n];
                        for (c, v) in qp.eq.row(i) {
                            gi[c] = v;
                        }
                        let z = hessian.solve(&gi);
                        for j in 0..p {
                            s[(j, i)] = qp.eq.row(j).map(|(c, v)| v * z[c]).sum();
                        }
                    }
                }
            }
            Some(Cholesky::factor(&s)?)
        };
        Ok(Self { hessian, schur })
    }

    /// Solves `H dx + Gᵀ dnu = r1`, `G dx = r2`.
    pub fn solve(&self, qp: &QuadraticProgram<T>, r1: &[T], r2: &[T]) -> (Vec<T>, Vec<T>) {
        let hr1 = self.hessian.solve(r1);
        match &self.schur {
            None => (hr1, Vec::new()),
            Some(schur) => {
                let g_hr1 = qp.eq.mul_vec(&hr1);
                let mut rhs: Vec<T> = g_hr1.iter().zip(r2).map(|(a, b)| *a - *b).collect();
                schur.solve_in_place(&mut rhs);
                let gt_nu = qp.eq.mul_t_vec(&rhs);
                let corrected: Vec<T> = r1.iter().zip(&gt_nu).map(|(a, b)| *a - *b).collect();
                (self.hessian.solve(&corrected), rhs)
            }
        }
    }
}

impl<T: Scalar> QuadraticProgram<T> {
    pub fn num_vars(&self) -> usize {
        self.quad.len()
    }

    pub fn check_dimensions(&self) -> Result<(), QpError> {
        let n = self.quad.len();
        let err = |m: String| Err(QpError::Dimension(m));
        if self.linear.len() != n {
            return err(format!("linear term has {} entries, expected {n}", self.linear.len()));
        }
        if self.eq.cols() != n || self.ineq.cols() != n {
            return err(format!(
                "constraint matrices have {} / {} columns, expected {n}",
                self.eq.cols(),
                self.ineq.cols()
            ));
        }
        if self.eq_rhs.len() != self.eq.rows() {
            return err("equality rhs length".into());
        }
        if self.ineq_rhs.len() != self.ineq.rows() {
            return err("inequality rhs length".into());
        }
        Ok(())
    }

    pub fn objective(&self, x: &[T]) -> T {
        let half = T::lit(0.5);
        x.iter()
            .zip(&self.quad)
            .zip(&self.linear)
            .map(|((x, q), c)| half * *q * *x * *x + *c * *x)
            .sum()
    }

    fn residuals(&self, it: &Iterate<T>, tau: T) -> Residuals<T> {
        // r_d = Q x + q + Gᵀ ν + Aᵀ μ
        let mut r_d = self.eq.mul_t_vec(&it.nu);
        for (k, v) in self.ineq.mul_t_vec(&it.mu).into_iter().enumerate() {
            r_d[k] += v + self.quad[k] * it.x[k] + self.linear[k];
        }
        let gx = self.eq.mul_vec(&it.x);
        let r_p: Vec<T> = gx.iter().zip(&self.eq_rhs).map(|(a, b)| *a - *b).collect();
        let ax = self.ineq.mul_vec(&it.x);
        let r_i: Vec<T> = ax
            .iter()
            .zip(&it.s)
            .zip(&self.ineq_rhs)
            .map(|((a, s), b)| *a + *s - *b)
            .collect();
        let r_c: Vec<T> = it.mu.iter().zip(&it.s).map(|(m, s)| *m * *s - tau).collect();
        Residuals { r_d, r_p, r_i, r_c }
    }

    /// Solves the program to the central point at `opts.tau`.
    pub fn solve(&self, opts: &IpmOptions<T>, start: Option<&[T]>) -> Result<QpSolution<T>, QpFailure<T>> {
        self.check_dimensions().map_err(QpFailure::Error)?;
        let n = self.num_vars();
        let m = self.ineq.rows();
        let zero = T::zero();
        let one = T::one();

        let x0 = match start {
            Some(s) if s.len() == n => s.to_vec(),
            Some(s) => {
                return Err(QpFailure::Error(QpError::Dimension(format!(
                    "start point has {} entries, expected {n}",
                    s.len()
                ))))
            }
            None => vec![zero; n],
        };
        let scale = one.max(norm_inf(&self.linear));
        let ax0 = self.ineq.mul_vec(&x0);
        let s0: Vec<T> = ax0
            .iter()
            .zip(&self.ineq_rhs)
            .map(|(a, b)| (*b - *a).max(one))
            .collect();
        let mu0: Vec<T> = s0.iter().map(|s| scale / *s).collect();
        let mut it = Iterate {
            x: x0,
            s: s0,
            mu: mu0,
            nu: vec![zero; self.eq.rows()],
        };

        let sigma = T::lit(0.1);
        let fraction = T::lit(0.995);
        let mut best: Option<(T, Iterate<T>)> = None;

        for iteration in 0..opts.max_iterations {
            let gap = if m == 0 { zero } else { dot(&it.mu, &it.s) / T::from_usize(m).unwrap() };
            let tau = opts.tau.max(sigma * gap);

            let w: Vec<T> = it.mu.iter().zip(&it.s).map(|(m, s)| *m / *s).collect();
            let fact = KktFactorization::new(self, &w).map_err(|source| {
                QpFailure::Error(QpError::Singular { iteration, source })
            })?;

            let at_target = self.residuals(&it, opts.tau);
            let report = at_target.norms();
            if best.as_ref().map_or(true, |(r, _)| report.max() < *r) {
                best = Some((report.max(), it.clone()));
            }
            if report.max() <= opts.tol {
                return Ok(self.finish(it, opts.tau, report, iteration, true, Some(fact)));
            }

            let res = if tau == opts.tau { at_target } else { self.residuals(&it, tau) };
            // rhs1 = −r_d + Aᵀ((r_c − μ∘r_i) / s)
            let scaled: Vec<T> = (0..m)
                .map(|i| (res.r_c[i] - it.mu[i] * res.r_i[i]) / it.s[i])
                .collect();
            let at_scaled = self.ineq.mul_t_vec(&scaled);
            let r1: Vec<T> = res.r_d.iter().zip(&at_scaled).map(|(d, a)| -*d + *a).collect();
            let r2: Vec<T> = res.r_p.iter().map(|v| -*v).collect();
            let (dx, dnu) = fact.solve(self, &r1, &r2);
            let adx = self.ineq.mul_vec(&dx);
            let ds: Vec<T> = (0..m).map(|i| -res.r_i[i] - adx[i]).collect();
            let dmu: Vec<T> = (0..m)
                .map(|i| (-res.r_c[i] - it.mu[i] * ds[i]) / it.s[i])
                .collect();

            let mut alpha = one;
            for i in 0..m {
                if ds[i] < zero {
                    alpha = alpha.min(-fraction * it.s[i] / ds[i]);
                }
                if dmu[i] < zero {
                    alpha = alpha.min(-fraction * it.mu[i] / dmu[i]);
                }
            }
            if !alpha.is_finite() || !dx.iter().all(|v| v.is_finite()) {
                break;
            }
            for k in 0..n {
                it.x[k] += alpha * dx[k];
            }
            for i in 0..m {
                it.s[i] += alpha * ds[i];
                it.mu[i] += alpha * dmu[i];
            }
            for (j, d) in dnu.iter().enumerate() {
                it.nu[j] += alpha * *d;
            }
        }

        let (residual, it) = best.expect("at least one iteration");
        let report = self.residuals(&it, opts.tau).norms();
        let sol = self.finish(it, opts.tau, report, opts.max_iterations, false, None);
        Err(QpFailure::NotConverged {
            error: QpError::MaxIterations {
                iterations: opts.max_iterations,
                residual: residual.as_f64(),
            },
            best: Box::new(sol),
        })
    }

    fn finish(
        &self,
        it: Iterate<T>,
        tau: T,
        residual: KktResidual<T>,
        iterations: usize,
        converged: bool,
        factorization: Option<KktFactorization<T>>,
    ) -> QpSolution<T> {
        QpSolution {
            objective: self.objective(&it.x),
            x: it.x,
            nu: it.nu,
            mu: it.mu,
            slack: it.s,
            tau,
            residual,
            iterations,
            converged,
            factorization,
        }
    }
}

/// Solver failure. Non-convergence still hands back the best iterate seen.
#[derive(Debug, Clone, thiserror::Error)]
pub enum QpFailure<T: Scalar> {
    #[error(transparent)]
    Error(QpError),
    #[error("{error}")]
    NotConverged {
        error: QpError,
        best: Box<QpSolution<T>>,
    },
}

impl<T: Scalar> QpFailure<T> {
    pub fn error(&self) -> &QpError {
        match self {
            QpFailure::Error(e) => e,
            QpFailure::NotConverged { error, .. } => error,
        }
    }
}

#[derive(Debug, Clone)]
struct Iterate<T> {
    x: Vec<T>,
    s: Vec<T>,
    mu: Vec<T>,
    nu: Vec<T>,
}

struct Residuals<T> {
    r_d: Vec<T>,
    r_p: Vec<T>,
    r_i: Vec<T>,
    r_c: Vec<T>,
}

impl<T: Scalar> Residuals<T> {
    fn norms(&self) -> KktResidual<T> {
        KktResidual {
            stationarity: norm_inf(&self.r_d),
            equality: norm_inf(&self.r_p),
            inequality: norm_inf(&self.r_i),
            complementarity: norm_inf(&self.r_c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> IpmOptions<f64> {
        IpmOptions {
            tau: 1e-8,
            tol: 1e-10,
            max_iterations: 200,
        }
    }

    /// min ½(x0² + x1²) − x0 − x1  s.t. x0 + x1 = 1, 0 <= x <= 0.3 (x1 only)
    #[test]
    fn small_qp_matches_hand_solution() {
        let qp = QuadraticProgram {
            quad: vec![1.0, 1.0],
            linear: vec![-1.0, -1.0],
            eq: SparseMatrix::from_rows(2, vec![vec![(0, 1.0), (1, 1.0)]]),
            eq_rhs: vec![1.0],
            ineq: SparseMatrix::from_rows(2, vec![vec![(1, 1.0)], vec![(1, -1.0)]]),
            ineq_rhs: vec![0.3, 0.0],
        };
        let sol = qp.solve(&opts(), None).unwrap();
        assert!(sol.converged);
        assert!((sol.x[0] - 0.7).abs() < 1e-6, "{:?}", sol.x);
        assert!((sol.x[1] - 0.3).abs() < 1e-6);
        for (m, s) in sol.mu.iter().zip(&sol.slack) {
            assert!((m * s - 1e-8).abs() <= 1e-10);
        }
    }

    #[test]
    fn dense_path_agrees_with_diagonal_path() {
        // same feasible set written with a coupled row: x0 + x1 <= 0.8 plus bounds
        let bounds = |extra: Vec<Vec<(usize, f64)>>, extra_rhs: Vec<f64>| {
            let mut rows = vec![
                vec![(0, 1.0)],
                vec![(0, -1.0)],
                vec![(1, 1.0)],
                vec![(1, -1.0)],
            ];
            let mut rhs = vec![2.0, 0.0, 2.0, 0.0];
            rows.extend(extra);
            rhs.extend(extra_rhs);
            QuadraticProgram {
                quad: vec![1e-3, 1e-3],
                linear: vec![-1.0, -2.0],
                eq: SparseMatrix::zeros(0, 2),
                eq_rhs: vec![],
                ineq: SparseMatrix::from_rows(2, rows),
                ineq_rhs: rhs,
            }
        };
        let coupled = bounds(vec![vec![(0, 1.0), (1, 1.0)]], vec![0.8]);
        let sol = coupled.solve(&opts(), None).unwrap();
        assert!((sol.x[1] - 0.8).abs() < 1e-5, "{:?}", sol.x);
        assert!(sol.x[0].abs() < 1e-5);
    }

    #[test]
    fn reports_singular_system() {
        // free variable with no curvature and no constraints
        let qp = QuadraticProgram {
            quad: vec![0.0],
            linear: vec![1.0],
            eq: SparseMatrix::zeros(0, 1),
            eq_rhs: vec![],
            ineq: SparseMatrix::zeros(0, 1),
            ineq_rhs: vec![],
        };
        let err = qp.solve(&opts(), None).unwrap_err();
        assert!(matches!(err.error(), QpError::Singular { .. }));
    }

    #[test]
    fn max_iterations_returns_best_iterate() {
        let qp = QuadraticProgram {
            quad: vec![1.0],
            linear: vec![-1.0],
            eq: SparseMatrix::zeros(0, 1),
            eq_rhs: vec![],
            ineq: SparseMatrix::from_rows(1, vec![vec![(0, 1.0)]]),
            ineq_rhs: vec![0.5],
        };
        let o = IpmOptions { max_iterations: 2, ..opts() };
        match qp.solve(&o, None) {
            Err(QpFailure::NotConverged { best, .. }) => {
                assert!(!best.converged);
                assert_eq!(best.x.len(), 1);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
