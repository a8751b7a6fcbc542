//! Matrix-free linear algebra: the operator abstraction, Kronecker-product
//! application over row-major flattened tensors, and a restarted GMRES
//! solver (modified Gram-Schmidt Arnoldi with Givens rotations).

use crate::dense::Matrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KrylovError {
    #[error("operator dimension {expected} does not match vector length {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// A square linear operator given by its action on a vector.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Dense matrix wrapped as an operator.
pub struct DenseOp {
    pub matrix: Matrix,
}

impl DenseOp {
    pub fn new(matrix: Matrix) -> DenseOp {
        assert_eq!(matrix.rows, matrix.cols, "operator matrix must be square");
        DenseOp { matrix }
    }
}

impl LinearOperator for DenseOp {
    fn dim(&self) -> usize {
        self.matrix.rows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.matvec(x, y);
    }
}

/// Applies the Kronecker product of square per-axis factors to a flattened
/// tensor without forming the product matrix. The tensor is row-major with
/// axis 0 slowest, matching the order of `factors`.
pub fn kron_apply(factors: &[&Matrix], x: &[f64], y: &mut [f64]) {
    let total: usize = factors.iter().map(|f| f.rows).product();
    assert_eq!(x.len(), total, "input length must match factor dimensions");
    assert_eq!(y.len(), total, "output length must match factor dimensions");
    for f in factors {
        assert_eq!(f.rows, f.cols, "kron factors must be square");
    }
    let mut cur = x.to_vec();
    let mut next = vec![0.0; total];
    for (d, f) in factors.iter().enumerate() {
        let n = f.rows;
        let inner: usize = factors[d + 1..].iter().map(|g| g.rows).product();
        let outer = total / (n * inner);
        for o in 0..outer {
            let base = o * n * inner;
            for r in 0..n {
                let frow = f.row(r);
                for t in 0..inner {
                    let mut acc = 0.0;
                    for (c, &a) in frow.iter().enumerate() {
                        acc += a * cur[base + c * inner + t];
                    }
                    next[base + r * inner + t] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    y.copy_from_slice(&cur);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresConfig {
    pub tol: f64,
    pub restart: usize,
    pub max_iters: usize,
}

impl Default for GmresConfig {
    fn default() -> GmresConfig {
        GmresConfig {
            tol: 1e-10,
            restart: 50,
            max_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub breakdown: bool,
}

const BREAKDOWN_EPS: f64 = 1e-30;

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|&a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| p * q).sum()
}

/// Solves op * x = b with restarted GMRES. The reported residual is the true
/// residual norm ||b - op*x|| divided by max(||b||, 1), recomputed from the
/// updated iterate at the end of every restart cycle; convergence decisions
/// use that value, not the rotation estimate.
pub fn gmres_solve(
    op: &dyn LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &GmresConfig,
) -> Result<(Vec<f64>, SolveStats), KrylovError> {
    let n = op.dim();
    if b.len() != n {
        return Err(KrylovError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    if let Some(x0) = x0 {
        if x0.len() != n {
            return Err(KrylovError::DimensionMismatch {
                expected: n,
                got: x0.len(),
            });
        }
    }
    if cfg.restart == 0 {
        return Err(KrylovError::InvalidConfig("restart must be positive".into()));
    }
    if !(cfg.tol >= 0.0) {
        return Err(KrylovError::InvalidConfig(format!(
            "tolerance must be a nonnegative number, got {}",
            cfg.tol
        )));
    }

    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                residual: 0.0,
                converged: true,
                breakdown: false,
            },
        ));
    }
    let denom = bnorm.max(1.0);

    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let true_residual = |x: &[f64], r: &mut [f64], w: &mut [f64]| {
        op.apply(x, w);
        for k in 0..n {
            r[k] = b[k] - w[k];
        }
        norm2(r) / denom
    };

    let mut residual = true_residual(&x, &mut r, &mut w);
    let mut iterations = 0usize;
    let mut breakdown = false;

    while residual > cfg.tol && iterations < cfg.max_iters && residual.is_finite() {
        let rnorm = norm2(&r);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.restart + 1);
        basis.push(r.iter().map(|&v| v / rnorm).collect());
        let mut hcols: Vec<Vec<f64>> = Vec::with_capacity(cfg.restart);
        let mut g = vec![0.0; cfg.restart + 1];
        g[0] = rnorm;
        let mut cs = vec![0.0; cfg.restart];
        let mut sn = vec![0.0; cfg.restart];
        let mut cols = 0usize;

        for k in 0..cfg.restart {
            op.apply(&basis[k], &mut w);
            let mut hcol = vec![0.0; k + 2];
            for (l, v) in basis.iter().enumerate() {
                let hlk = dot(&w, v);
                hcol[l] = hlk;
                for t in 0..n {
                    w[t] -= hlk * v[t];
                }
            }
            let hk1 = norm2(&w);
            let broke = hk1 <= BREAKDOWN_EPS;
            if !broke {
                basis.push(w.iter().map(|&v| v / hk1).collect());
            }
            for l in 0..k {
                let tmp = cs[l] * hcol[l] + sn[l] * hcol[l + 1];
                hcol[l + 1] = -sn[l] * hcol[l] + cs[l] * hcol[l + 1];
                hcol[l] = tmp;
            }
            let denom_rot = hcol[k].hypot(hk1);
            if denom_rot == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = hcol[k] / denom_rot;
                sn[k] = hk1 / denom_rot;
            }
            hcol[k] = denom_rot;
            hcol[k + 1] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            hcols.push(hcol);
            cols = k + 1;
            iterations += 1;

            let estimate = g[k + 1].abs() / denom;
            if broke {
                breakdown = true;
                break;
            }
            if estimate <= cfg.tol || iterations >= cfg.max_iters {
                break;
            }
        }

        let mut y = vec![0.0; cols];
        for l in (0..cols).rev() {
            let mut acc = g[l];
            for c in l + 1..cols {
                acc -= hcols[c][l] * y[c];
            }
            let diag = hcols[l][l];
            y[l] = if diag == 0.0 { 0.0 } else { acc / diag };
        }
        for (l, &yl) in y.iter().enumerate() {
            let v = &basis[l];
            for t in 0..n {
                x[t] += yl * v[t];
            }
        }

        residual = true_residual(&x, &mut r, &mut w);
        if breakdown {
            break;
        }
    }

    let converged = residual <= cfg.tol;
    Ok((
        x,
        SolveStats {
            iterations,
            residual,
            converged,
            breakdown,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_from(rows: &[&[f64]]) -> Matrix {
        let owned: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Matrix::from_rows(&owned)
    }

    fn solve_dense(m: Matrix, b: &[f64]) -> (Vec<f64>, SolveStats) {
        let op = DenseOp::new(m);
        gmres_solve(&op, b, None, &GmresConfig::default()).unwrap()
    }

    #[test]
    fn identity_solves_in_one_step() {
        let (x, stats) = solve_dense(Matrix::identity(5), &[1.0, -2.0, 3.0, 0.5, 4.0]);
        for (got, want) in x.iter().zip(&[1.0, -2.0, 3.0, 0.5, 4.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(stats.converged);
        assert_eq!(stats.iterations, 1);
    }

    #[test]
    fn diagonal_system() {
        let (x, stats) = solve_dense(dense_from(&[&[2.0, 0.0], &[0.0, 4.0]]), &[2.0, 8.0]);
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!((x[1] - 2.0).abs() < 1e-10);
        assert!(stats.converged);
    }

    #[test]
    fn level_zero_sampling_matrix() {
        let (x, stats) = solve_dense(dense_from(&[&[1.0, 1.0], &[1.0, -1.0]]), &[2.0, 0.0]);
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!((x[1] - 1.0).abs() < 1e-10);
        assert!(stats.converged);
    }

    #[test]
    fn zero_rhs_short_circuits() {
        let op = DenseOp::new(Matrix::identity(4));
        let (x, stats) = gmres_solve(&op, &[0.0; 4], None, &GmresConfig::default()).unwrap();
        assert_eq!(x, vec![0.0; 4]);
        assert!(stats.converged);
        assert_eq!(stats.iterations, 0);
        assert_eq!(stats.residual, 0.0);
    }

    #[test]
    fn exact_initial_guess_converges_without_iterating() {
        let op = DenseOp::new(dense_from(&[&[3.0, 1.0], &[1.0, 2.0]]));
        let (x, stats) =
            gmres_solve(&op, &[5.0, 4.0], Some(&[1.2, 1.4]), &GmresConfig::default()).unwrap();
        assert!((x[0] - 1.2).abs() < 1e-12);
        assert!((x[1] - 1.4).abs() < 1e-12);
        assert!(stats.converged);
        assert_eq!(stats.iterations, 0);
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut b = Matrix::zeros(n, n);
        for v in b.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let bt = b.transpose();
        let mut a = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for t in 0..n {
                    acc += bt.at(r, t) * b.at(t, c);
                }
                *a.at_mut(r, c) = acc + if r == c { n as f64 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn spd_systems_terminate_within_dimension_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[5usize, 10, 20] {
            for _ in 0..3 {
                let a = random_spd(n, &mut rng);
                let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let op = DenseOp::new(a);
                let cfg = GmresConfig {
                    tol: 1e-10,
                    restart: 50,
                    max_iters: 500,
                };
                let (_, stats) = gmres_solve(&op, &b, None, &cfg).unwrap();
                assert!(stats.converged, "n={n}: residual {}", stats.residual);
                assert!(
                    stats.iterations <= 2 * n,
                    "n={n}: took {} iterations",
                    stats.iterations
                );
            }
        }
    }

    #[test]
    fn row_scaling_leaves_converged_solution_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 12;
        let mut a = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                *a.at_mut(r, c) = rng.gen_range(-1.0..1.0) + if r == c { 6.0 } else { 0.0 };
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scales: Vec<f64> = (0..n)
            .map(|_| 10f64.powf(rng.gen_range(-2.0..2.0)))
            .collect();
        let mut a_scaled = a.clone();
        let mut b_scaled = b.clone();
        for r in 0..n {
            b_scaled[r] *= scales[r];
            for c in 0..n {
                *a_scaled.at_mut(r, c) *= scales[r];
            }
        }
        let cfg = GmresConfig {
            tol: 1e-12,
            restart: 50,
            max_iters: 500,
        };
        let (x, s1) = gmres_solve(&DenseOp::new(a), &b, None, &cfg).unwrap();
        let (x_scaled, s2) = gmres_solve(&DenseOp::new(a_scaled), &b_scaled, None, &cfg).unwrap();
        assert!(s1.converged && s2.converged);
        for (p, q) in x.iter().zip(&x_scaled) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn unreachable_tolerance_reports_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let mut a = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                *a.at_mut(r, c) = 1.0 / (r + c + 1) as f64;
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = GmresConfig {
            tol: 1e-300,
            restart: 4,
            max_iters: 8,
        };
        let (_, stats) = gmres_solve(&DenseOp::new(a), &b, None, &cfg).unwrap();
        assert!(!stats.converged);
        assert_eq!(stats.iterations, 8);
        assert!(stats.residual.is_finite());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let op = DenseOp::new(Matrix::identity(3));
        let err = gmres_solve(&op, &[1.0, 2.0], None, &GmresConfig::default()).unwrap_err();
        assert!(matches!(err, KrylovError::DimensionMismatch { .. }));
        let err = gmres_solve(
            &op,
            &[1.0, 2.0, 3.0],
            Some(&[0.0; 5]),
            &GmresConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, KrylovError::DimensionMismatch { .. }));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let op = DenseOp::new(Matrix::identity(2));
        let cfg = GmresConfig {
            restart: 0,
            ..GmresConfig::default()
        };
        assert!(matches!(
            gmres_solve(&op, &[1.0, 1.0], None, &cfg),
            Err(KrylovError::InvalidConfig(_))
        ));
        let cfg = GmresConfig {
            tol: -1.0,
            ..GmresConfig::default()
        };
        assert!(matches!(
            gmres_solve(&op, &[1.0, 1.0], None, &cfg),
            Err(KrylovError::InvalidConfig(_))
        ));
    }

    fn dense_kron(factors: &[&Matrix]) -> Matrix {
        let mut out = Matrix::identity(1);
        for f in factors {
            let mut next = Matrix::zeros(out.rows * f.rows, out.cols * f.cols);
            for r1 in 0..out.rows {
                for c1 in 0..out.cols {
                    for r2 in 0..f.rows {
                        for c2 in 0..f.cols {
                            *next.at_mut(r1 * f.rows + r2, c1 * f.cols + c2) =
                                out.at(r1, c1) * f.at(r2, c2);
                        }
                    }
                }
            }
            out = next;
        }
        out
    }

    #[test]
    fn kron_apply_matches_frozen_example() {
        let a = dense_from(&[&[1.0, 1.0], &[1.0, -1.0]]);
        let id = Matrix::identity(2);
        let mut y = vec![0.0; 4];
        kron_apply(&[&a, &id], &[1.0, 0.0, 0.0, 0.0], &mut y);
        assert_eq!(y, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn kron_apply_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sizes in [vec![2usize, 3], vec![3, 2, 2]] {
            let factors: Vec<Matrix> = sizes
                .iter()
                .map(|&n| {
                    let mut m = Matrix::zeros(n, n);
                    for v in m.data.iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                    m
                })
                .collect();
            let refs: Vec<&Matrix> = factors.iter().collect();
            let full = dense_kron(&refs);
            let total = full.rows;
            for _ in 0..20 {
                let x: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut want = vec![0.0; total];
                full.matvec(&x, &mut want);
                let mut got = vec![0.0; total];
                kron_apply(&refs, &x, &mut got);
                for (p, q) in got.iter().zip(&want) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kron_apply_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = Matrix::zeros(3, 3);
        let mut b = Matrix::zeros(2, 2);
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = x.iter().zip(&z).map(|(p, q)| 2.0 * p - 3.0 * q).collect();
        let mut yx = vec![0.0; 6];
        let mut yz = vec![0.0; 6];
        let mut yc = vec![0.0; 6];
        kron_apply(&[&a, &b], &x, &mut yx);
        kron_apply(&[&a, &b], &z, &mut yz);
        kron_apply(&[&a, &b], &combo, &mut yc);
        for t in 0..6 {
            assert!((yc[t] - (2.0 * yx[t] - 3.0 * yz[t])).abs() < 1e-12);
        }
    }
}
