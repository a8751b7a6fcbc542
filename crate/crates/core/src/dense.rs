//! Dense row-major matrices and LU factorization with partial pivoting.
//!
//! These are the only dense kernels the solver needs: small per-axis
//! operational matrices, and one factorization per run of the coupled step
//! matrix, reused as the preconditioner for every subsequent GMRES solve.

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        assert_eq!(y.len(), self.rows, "matvec dimension mismatch");
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            y[r] = acc;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// LU factorization of a square matrix with partial pivoting.
///
/// Pivots whose magnitude falls below `pivot_floor * max_abs(A)` are replaced
/// by that floor (keeping their sign). This keeps the factorization usable as
/// a preconditioner when the matrix is singular up to a known nullspace; the
/// number of such replacements is reported in `bumped_pivots`.
#[derive(Debug, Clone)]
pub struct LuFactors {
    lu: Matrix,
    piv: Vec<usize>,
    pub bumped_pivots: usize,
}

pub const DEFAULT_PIVOT_FLOOR: f64 = 1e-13;

impl LuFactors {
    pub fn factor(a: Matrix, pivot_floor: f64) -> LuFactors {
        assert_eq!(a.rows, a.cols, "LU requires a square matrix");
        let n = a.rows;
        let mut lu = a;
        let mut piv: Vec<usize> = (0..n).collect();
        let floor = pivot_floor * lu.max_abs().max(f64::MIN_POSITIVE);
        let mut bumped = 0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu.at(k, k).abs();
            for r in k + 1..n {
                let v = lu.at(r, k).abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                for c in 0..n {
                    lu.data.swap(k * n + c, p * n + c);
                }
                piv.swap(k, p);
            }
            let mut pivot = lu.at(k, k);
            if pivot.abs() < floor {
                pivot = if pivot >= 0.0 { floor } else { -floor };
                *lu.at_mut(k, k) = pivot;
                bumped += 1;
            }
            let inv = 1.0 / pivot;
            let (head, tail) = lu.data.split_at_mut((k + 1) * n);
            let pivot_row = &head[k * n..k * n + n];
            for chunk in tail.chunks_exact_mut(n) {
                let m = chunk[k] * inv;
                chunk[k] = m;
                if m != 0.0 {
                    for c in k + 1..n {
                        chunk[c] -= m * pivot_row[c];
                    }
                }
            }
        }
        LuFactors {
            lu,
            piv,
            bumped_pivots: bumped,
        }
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    /// Solves A x = b in place (b becomes x).
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.lu.rows;
        assert_eq!(b.len(), n, "solve dimension mismatch");
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[i] = b[self.piv[i]];
        }
        for i in 0..n {
            let row = self.lu.row(i);
            let mut acc = x[i];
            for j in 0..i {
                acc -= row[j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= row[j] * x[j];
            }
            x[i] = acc / row[i];
        }
        b.copy_from_slice(&x);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
