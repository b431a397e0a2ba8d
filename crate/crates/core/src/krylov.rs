//! Lanczos-based kernels for Hermitian operators given only as a matvec:
//! the short-time propagator `exp(-i dt H) v` and the lowest few eigenvalues.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Outcome of one Krylov propagation.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct ExpmvInfo {
    /// Krylov dimension actually used.
    pub krylov_dim: usize,
    /// A posteriori error estimate (2-norm of the result error).
    pub error_estimate: f64,
    /// Whether `error_estimate <= tol` was reached.
    pub converged: bool,
}

/// Reusable Lanczos vectors, so repeated propagation does not reallocate.
#[derive(Clone, Debug, Default)]
pub struct KrylovWorkspace {
    basis: Vec<Vec<Complex64>>,
    w: Vec<Complex64>,
}

impl KrylovWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, dim: usize, m: usize) {
        if self.w.len() != dim {
            self.basis.clear();
            self.w = vec![Complex64::default(); dim];
        }
        while self.basis.len() < m {
            self.basis.push(vec![Complex64::default(); dim]);
        }
    }
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `exp(-i dt T) e_1` for the symmetric tridiagonal `T` with diagonal `alpha`
/// and off-diagonal `beta`.
fn tridiagonal_exp_e1(alpha: &[f64], beta: &[f64], dt: f64) -> Vec<Complex64> {
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for j in 0..m {
        t[(j, j)] = Complex64::new(0.0, -dt * alpha[j]);
        if j + 1 < m {
            t[(j, j + 1)] = Complex64::new(0.0, -dt * beta[j]);
            t[(j + 1, j)] = Complex64::new(0.0, -dt * beta[j]);
        }
    }
    t.exp().column(0).iter().copied().collect()
}

/// Computes `exp(-i dt H) v` with a Lanczos basis grown until the a
/// posteriori error estimate drops below `tol` or `max_dim` is reached.
///
/// `apply(x, y)` must write `H x` into `y`. The result is written to `out`.
pub fn expmv<F>(
    mut apply: F,
    v: &[Complex64],
    dt: f64,
    tol: f64,
    max_dim: usize,
    ws: &mut KrylovWorkspace,
    out: &mut [Complex64],
) -> ExpmvInfo
where
    F: FnMut(&[Complex64], &mut [Complex64]),
{
    let n = v.len();
    assert_eq!(out.len(), n);
    let beta0 = norm(v);
    if beta0 == 0.0 || dt == 0.0 {
        out.copy_from_slice(v);
        return ExpmvInfo { krylov_dim: 0, error_estimate: 0.0, converged: true };
    }
    let max_dim = max_dim.clamp(1, n);
    ws.ensure(n, max_dim);

    for (q, x) in ws.basis[0].iter_mut().zip(v) {
        *q = x / beta0;
    }
    let mut alpha = Vec::with_capacity(max_dim);
    let mut beta: Vec<f64> = Vec::with_capacity(max_dim);
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    let mut info = ExpmvInfo::default();

    for j in 0..max_dim {
        let (head, tail) = ws.basis.split_at_mut(j);
        let qj = &tail[0];
        apply(qj, &mut ws.w);
        let a = dot(qj, &ws.w).re;
        for (k, wk) in ws.w.iter_mut().enumerate() {
            *wk -= qj[k] * a;
        }
        if j > 0 {
            let prev = &head[j - 1];
            let b = beta[j - 1];
            for (k, wk) in ws.w.iter_mut().enumerate() {
                *wk -= prev[k] * b;
            }
        }
        // one pass of local reorthogonalisation against the last two vectors
        let c = dot(qj, &ws.w);
        for (k, wk) in ws.w.iter_mut().enumerate() {
            *wk -= qj[k] * c;
        }
        alpha.push(a + c.re);
        let b_next = norm(&ws.w);

        coeffs = tridiagonal_exp_e1(&alpha, &beta, dt);
        let m = j + 1;
        // happy breakdown: the Krylov space is invariant and the result exact
        let invariant = b_next <= 1e-14 * (a.abs() + beta.last().copied().unwrap_or(0.0)).max(1e-300);
        let err = if invariant { 0.0 } else { beta0 * b_next * coeffs[m - 1].norm() };
        info = ExpmvInfo { krylov_dim: m, error_estimate: err, converged: err <= tol };
        if info.converged || m == max_dim {
            break;
        }
        beta.push(b_next);
        let next = &mut ws.basis[j + 1];
        for (q, wk) in next.iter_mut().zip(&ws.w) {
            *q = wk / b_next;
        }
    }

    out.fill(Complex64::default());
    for (c, q) in coeffs.iter().zip(&ws.basis) {
        let c = c * beta0;
        for (o, qk) in out.iter_mut().zip(q) {
            *o += qk * c;
        }
    }
    info
}

/// Lowest eigenvalues returned by [`lanczos_lowest`].
#[derive(Clone, Debug, PartialEq)]
pub struct LanczosResult {
    /// Ascending Ritz values.
    pub values: Vec<f64>,
    /// Residual norms `||H x - theta x||` of the returned Ritz pairs.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Lowest `count` eigenvalues of a real symmetric operator by Lanczos with
/// full reorthogonalisation.
///
/// `project`, when given, is applied to every new Lanczos vector; use it to
/// keep the iteration inside a symmetry sector the start vector belongs to.
/// Exactly degenerate eigenvalues are found only once, as usual for a single
/// start vector.
pub fn lanczos_lowest<F>(
    mut apply: F,
    start: &[f64],
    count: usize,
    tol: f64,
    max_iter: usize,
    project: Option<&dyn Fn(&mut [f64])>,
) -> Result<LanczosResult>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = start.len();
    let max_iter = max_iter.min(n).max(count);
    let mut q0 = start.to_vec();
    if let Some(p) = project {
        p(&mut q0);
    }
    let nrm = q0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nrm == 0.0 {
        return Err(Error::InvalidParameter("Lanczos start vector vanishes".into()));
    }
    q0.iter_mut().for_each(|x| *x /= nrm);

    let mut basis: Vec<Vec<f64>> = vec![q0];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut last_residual = f64::INFINITY;

    for j in 0..max_iter {
        apply(&basis[j], &mut w);
        let a: f64 = basis[j].iter().zip(&w).map(|(x, y)| x * y).sum();
        alpha.push(a);
        // full reorthogonalisation, applied twice
        for _ in 0..2 {
            for q in &basis {
                let c: f64 = q.iter().zip(&w).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(q).for_each(|(wk, qk)| *wk -= c * qk);
            }
        }
        if let Some(p) = project {
            p(&mut w);
        }
        let b = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let m = j + 1;

        let mut t = DMatrix::zeros(m, m);
        for k in 0..m {
            t[(k, k)] = alpha[k];
            if k + 1 < m {
                t[(k, k + 1)] = beta[k];
                t[(k + 1, k)] = beta[k];
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let scale = eig.eigenvalues.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        let invariant = b <= 1e-13 * scale;
        if m >= count || invariant {
            let take = count.min(m);
            let residuals: Vec<f64> = order[..take]
                .iter()
                .map(|&c| if invariant { 0.0 } else { b * eig.eigenvectors[(m - 1, c)].abs() })
                .collect();
            last_residual = residuals.iter().cloned().fold(0.0, f64::max);
            if last_residual <= tol * scale || invariant {
                return Ok(LanczosResult {
                    values: order[..take].iter().map(|&c| eig.eigenvalues[c]).collect(),
                    residuals,
                    iterations: m,
                });
            }
        }
        if m == max_iter {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    Err(Error::Eigensolver { iterations: max_iter, residual: last_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        &a + a.transpose()
    }

    fn dense_propagate(h: &DMatrix<f64>, v: &[Complex64], dt: f64) -> Vec<Complex64> {
        let u = h.map(|x| Complex64::new(0.0, -x * dt)).exp();
        (u * nalgebra::DVector::from_column_slice(v)).iter().copied().collect()
    }

    #[test]
    fn expmv_matches_dense_exponential() {
        let n = 60;
        let h = random_symmetric(n, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
        let apply = |x: &[Complex64], y: &mut [Complex64]| {
            for r in 0..n {
                y[r] = (0..n).map(|c| x[c] * h[(r, c)]).sum();
            }
        };
        let mut ws = KrylovWorkspace::new();
        let mut out = vec![Complex64::default(); n];
        let info = expmv(apply, &v, 0.3, 1e-12, 40, &mut ws, &mut out);
        assert!(info.converged, "{info:?}");
        let expect = dense_propagate(&h, &v, 0.3);
        let err: f64 = out.iter().zip(&expect).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(err < 1e-11, "err = {err}");
        // norm is conserved by a unitary propagator
        assert!((norm(&out) - norm(&v)).abs() < 1e-11);
    }

    #[test]
    fn expmv_happy_breakdown_on_small_space() {
        let h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let v = [Complex64::new(1.0, 0.0), Complex64::default()];
        let apply = |x: &[Complex64], y: &mut [Complex64]| {
            y[0] = x[1] * h[(0, 1)];
            y[1] = x[0] * h[(1, 0)];
        };
        let mut out = [Complex64::default(); 2];
        let info = expmv(apply, &v, std::f64::consts::PI / 2.0, 1e-14, 10, &mut KrylovWorkspace::new(), &mut out);
        assert!(info.converged);
        assert!((out[1].norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lanczos_lowest_matches_dense() {
        let n = 200;
        let h = random_symmetric(n, 11);
        let apply = |x: &[f64], y: &mut [f64]| {
            let r = &h * DVector::from_column_slice(x);
            y.copy_from_slice(r.as_slice());
        };
        let start: Vec<f64> = (0..n).map(|k| 1.0 + (k as f64).sin()).collect();
        let res = lanczos_lowest(apply, &start, 2, 1e-12, n, None).unwrap();
        let mut exact: Vec<f64> = SymmetricEigen::new(h.clone()).eigenvalues.iter().cloned().collect();
        exact.sort_by(f64::total_cmp);
        assert!((res.values[0] - exact[0]).abs() < 1e-9);
        assert!((res.values[1] - exact[1]).abs() < 1e-9);
    }

    #[test]
    fn lanczos_reports_non_convergence() {
        let n = 100;
        let h = random_symmetric(n, 3);
        let apply = |x: &[f64], y: &mut [f64]| {
            let r = &h * DVector::from_column_slice(x);
            y.copy_from_slice(r.as_slice());
        };
        let err = lanczos_lowest(apply, &vec![1.0; n], 2, 1e-14, 4, None).unwrap_err();
        assert!(matches!(err, Error::Eigensolver { iterations: 4, .. }));
    }
}
