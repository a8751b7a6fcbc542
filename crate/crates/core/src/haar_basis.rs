//! Haar wavelet family on an interval [a, b]: pointwise evaluation, iterated
//! integrals in closed form, dyadic collocation grids, the operational
//! matrices built from them, and projection onto the truncated Haar series.
//!
//! With resolution level J the family holds 2M = 2^(J+1) members: the
//! constant scaling function (wavelet number 1) and, for numbers i >= 2, the
//! dilated/translated square waves indexed by i = m + k + 1 with m = 2^j and
//! 0 <= k < m. Collocation points are the midpoints of the uniform grid of
//! 2M cells, so every wavelet is constant on the cell around each point.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("wavelet index {i} out of range 1..={max}")]
    IndexOutOfRange { i: usize, max: usize },
    #[error("point {x} outside domain [{a}, {b}]")]
    OutsideDomain { x: f64, a: f64, b: f64 },
    #[error("domain ends not increasing: [{a}, {b}]")]
    EmptyDomain { a: f64, b: f64 },
    #[error("quadrature did not reach tolerance {requested:e}; achieved {achieved:e}")]
    Quadrature { requested: f64, achieved: f64 },
}

/// Haar family on [a, b] truncated at resolution level j_max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaarBasis {
    pub a: f64,
    pub b: f64,
    pub j_max: usize,
    pub m: usize,
    pub n_wavelets: usize,
    pub dx: f64,
}

impl HaarBasis {
    pub fn new(a: f64, b: f64, j_max: usize) -> Result<HaarBasis, BasisError> {
        if !(b > a) {
            return Err(BasisError::EmptyDomain { a, b });
        }
        let m = 1usize << j_max;
        Ok(HaarBasis {
            a,
            b,
            j_max,
            m,
            n_wavelets: 2 * m,
            dx: (b - a) / (2 * m) as f64,
        })
    }

    fn check_point(&self, x: f64) -> Result<(), BasisError> {
        if x < self.a || x > self.b {
            return Err(BasisError::OutsideDomain {
                x,
                a: self.a,
                b: self.b,
            });
        }
        Ok(())
    }
}

/// Decomposition of a wavelet number into dilation level, translation, and
/// the three breakpoints of its support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveletIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub m: usize,
    pub zeta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

pub fn wavelet_index(i: usize, basis: &HaarBasis) -> Result<WaveletIndex, BasisError> {
    if i < 1 || i > basis.n_wavelets {
        return Err(BasisError::IndexOutOfRange {
            i,
            max: basis.n_wavelets,
        });
    }
    if i == 1 {
        return Ok(WaveletIndex {
            i,
            j: 0,
            k: 0,
            m: 1,
            zeta: basis.m as f64,
            beta1: basis.a,
            beta2: basis.b,
            beta3: basis.b,
        });
    }
    let j = (i - 1).ilog2() as usize;
    let m = 1usize << j;
    let k = i - 1 - m;
    let zeta = basis.m as f64 / m as f64;
    let step = zeta * basis.dx;
    let beta1 = basis.a + (2 * k) as f64 * step;
    let beta2 = basis.a + (2 * k + 1) as f64 * step;
    let beta3 = basis.a + (2 * (k + 1)) as f64 * step;
    Ok(WaveletIndex {
        i,
        j,
        k,
        m,
        zeta,
        beta1,
        beta2,
        beta3,
    })
}

/// Value of wavelet i at x: +1 on [beta1, beta2), -1 on [beta2, beta3), else
/// 0. The constant wavelet (i = 1) is 1 on the whole interval, including the
/// right endpoint so that endpoint reconstruction is defined.
pub fn eval_haar(i: usize, x: f64, basis: &HaarBasis) -> Result<f64, BasisError> {
    basis.check_point(x)?;
    let w = wavelet_index(i, basis)?;
    if i == 1 {
        return Ok(1.0);
    }
    Ok(if x >= w.beta1 && x < w.beta2 {
        1.0
    } else if x >= w.beta2 && x < w.beta3 {
        -1.0
    } else {
        0.0
    })
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, v| acc * v as f64)
}

/// alpha-fold iterated integral of wavelet i from a to x, in closed
/// piecewise-polynomial form; alpha = 0 reduces to the wavelet itself.
pub fn eval_integral(
    alpha: usize,
    i: usize,
    x: f64,
    basis: &HaarBasis,
) -> Result<f64, BasisError> {
    if alpha == 0 {
        return eval_haar(i, x, basis);
    }
    basis.check_point(x)?;
    let w = wavelet_index(i, basis)?;
    let fact = factorial(alpha);
    if i == 1 {
        return Ok((x - basis.a).powi(alpha as i32) / fact);
    }
    let p = |t: f64| t.powi(alpha as i32);
    Ok(if x < w.beta1 {
        0.0
    } else if x < w.beta2 {
        p(x - w.beta1) / fact
    } else if x < w.beta3 {
        (p(x - w.beta1) - 2.0 * p(x - w.beta2)) / fact
    } else {
        (p(x - w.beta1) - 2.0 * p(x - w.beta2) + p(x - w.beta3)) / fact
    })
}

/// Uniform dyadic grid of cell boundaries and the midpoint collocation points.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationGrid {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn collocation_grid(basis: &HaarBasis) -> CollocationGrid {
    let n = basis.n_wavelets;
    let x: Vec<f64> = (0..=n).map(|k| basis.a + k as f64 * basis.dx).collect();
    let y: Vec<f64> = (1..=n).map(|k| 0.5 * (x[k - 1] + x[k])).collect();
    CollocationGrid { x, y }
}

/// Operational matrices sampled at the collocation points: row i-1 of `h`
/// holds wavelet i at every point, and `p1`, `p2` hold its first and second
/// iterated integrals in the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrices {
    pub h: crate::dense::Matrix,
    pub p1: crate::dense::Matrix,
    pub p2: crate::dense::Matrix,
}

pub fn assemble_matrices(basis: &HaarBasis) -> OperatorMatrices {
    let n = basis.n_wavelets;
    let grid = collocation_grid(basis);
    let mut h = crate::dense::Matrix::zeros(n, n);
    let mut p1 = crate::dense::Matrix::zeros(n, n);
    let mut p2 = crate::dense::Matrix::zeros(n, n);
    for i in 1..=n {
        for (k, &y) in grid.y.iter().enumerate() {
            *h.at_mut(i - 1, k) = eval_haar(i, y, basis).expect("collocation point in domain");
            *p1.at_mut(i - 1, k) =
                eval_integral(1, i, y, basis).expect("collocation point in domain");
            *p2.at_mut(i - 1, k) =
                eval_integral(2, i, y, basis).expect("collocation point in domain");
        }
    }
    OperatorMatrices { h, p1, p2 }
}

/// Truncated Haar series coefficients for a function on the basis domain.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarCoefficients {
    pub coeffs: Vec<f64>,
    pub basis: HaarBasis,
}

const PROJECT_TOL: f64 = 1e-12;
const MAX_DEPTH: usize = 40;

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
}

fn adaptive_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    whole: f64,
    m: f64,
    fm: f64,
    tol: f64,
    depth: usize,
    worst: &mut f64,
) -> f64 {
    let (left, lm, flm) = simpson(f, a, fa, m, fm);
    let (right, rm, frm) = simpson(f, m, fm, b, fb);
    let diff = left + right - whole;
    if diff.abs() <= 15.0 * tol || depth == 0 {
        if depth == 0 {
            *worst = worst.max(diff.abs() / 15.0);
        }
        return left + right + diff / 15.0;
    }
    adaptive_step(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1, worst)
        + adaptive_step(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1, worst)
}

/// Adaptive Simpson integral of f over [a, b] to absolute tolerance `tol`.
/// Returns the value and the worst local error estimate where the recursion
/// depth limit was hit (0.0 when the tolerance was met everywhere).
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    if a == b {
        return (0.0, 0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    let mut worst = 0.0;
    let value = adaptive_step(f, a, fa, b, fb, whole, m, fm, tol, MAX_DEPTH, &mut worst);
    (value, worst)
}

/// Projects f onto the truncated Haar series: coefficient i is the inner
/// product with wavelet i divided by the wavelet's squared norm, computed by
/// exact piecewise integration over the wavelet's constancy intervals with
/// adaptive quadrature on each piece.
pub fn project(
    f: &dyn Fn(f64) -> f64,
    basis: &HaarBasis,
) -> Result<HaarCoefficients, BasisError> {
    let mut coeffs = Vec::with_capacity(basis.n_wavelets);
    let mut achieved: f64 = 0.0;
    for i in 1..=basis.n_wavelets {
        let w = wavelet_index(i, basis)?;
        let (value, worst) = if i == 1 {
            adaptive_simpson(f, basis.a, basis.b, PROJECT_TOL)
        } else {
            let (pos, w1) = adaptive_simpson(f, w.beta1, w.beta2, 0.5 * PROJECT_TOL);
            let (neg, w2) = adaptive_simpson(f, w.beta2, w.beta3, 0.5 * PROJECT_TOL);
            (pos - neg, w1.max(w2))
        };
        achieved = achieved.max(worst);
        let norm_sq = if i == 1 {
            basis.b - basis.a
        } else {
            (basis.b - basis.a) * 0.5f64.powi(w.j as i32)
        };
        coeffs.push(value / norm_sq);
    }
    if achieved > PROJECT_TOL {
        return Err(BasisError::Quadrature {
            requested: PROJECT_TOL,
            achieved,
        });
    }
    Ok(HaarCoefficients {
        coeffs,
        basis: *basis,
    })
}

/// Evaluates the truncated Haar series at x.
pub fn reconstruct(c: &HaarCoefficients, x: f64) -> f64 {
    let mut acc = 0.0;
    for (idx, &a) in c.coeffs.iter().enumerate() {
        if a != 0.0 {
            acc += a * eval_haar(idx + 1, x, &c.basis).expect("x inside basis domain");
        }
    }
    acc
}

/// Exact integral of h_i * h_j over the domain, computed piecewise over the
/// merged breakpoints of the two wavelets (no quadrature error).
pub fn haar_product_integral(i: usize, j: usize, basis: &HaarBasis) -> Result<f64, BasisError> {
    let wi = wavelet_index(i, basis)?;
    let wj = wavelet_index(j, basis)?;
    let mut pts = vec![
        basis.a, basis.b, wi.beta1, wi.beta2, wi.beta3, wj.beta1, wj.beta2, wj.beta3,
    ];
    pts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    pts.dedup();
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let vi = eval_haar(i, mid, basis)?;
        let vj = eval_haar(j, mid, basis)?;
        acc += vi * vj * (hi - lo);
    }
    Ok(acc)
}
