//! Per-time-step assembly and solution of the collocation systems: the
//! gating system over the tensor Haar basis and the coupled block system
//! over the concatenated coefficient vector [alpha; beta], followed by
//! reconstruction of the fields and the cached derivative traces.
//!
//! The unknown alpha expands the time derivative of v and beta expands u_e,
//! both in a constant-augmented basis: coefficient 1 multiplies the constant
//! function (the free integration constant of the double integration in
//! space) and coefficients 2..2M multiply the twice-integrated wavelets.
//! First derivatives of the integrated wavelets vanish at both domain ends,
//! so zero-flux boundaries are preserved exactly at every step.
//!
//! The block system matrix is constant in time for a fixed step size, so it
//! is assembled densely once per run and LU-factored; every step then solves
//! the system with GMRES right-preconditioned by that factorization, keeping
//! an honest true-residual convergence check per step. The gating system is
//! preconditioned by the closed-form inverse of the tensor Haar matrix.

use crate::bidomain_model::{
    conductivity_at, gating_rate, ionic_current, BidomainProblem, Compartment, ModelError,
};
use crate::dense::{LuFactors, Matrix, DEFAULT_PIVOT_FLOOR};
use crate::haar_basis::{assemble_matrices, collocation_grid, HaarBasis};
use crate::krylov::{gmres_solve, kron_apply, GmresConfig, KrylovError, LinearOperator, SolveStats};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StepError {
    #[error(
        "linear solver stalled: residual {residual:e} after {iterations} iterations (tol {tol:e})"
    )]
    SolverStalled {
        iterations: usize,
        residual: f64,
        tol: f64,
    },
    #[error("all conductivities vanish identically; the balance equation is empty")]
    FullyDegenerate,
    #[error("basis levels need one entry per axis: got {got} for dimension {dim}")]
    LevelCount { got: usize, dim: usize },
    #[error("anchor index {index} out of range for {points} collocation points")]
    AnchorRange { index: usize, points: usize },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("step size {dt} does not divide final time {t_final} to within rounding")]
    TimeStepMismatch { dt: f64, t_final: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Krylov(#[from] KrylovError),
}

/// How the constant mode of u_e is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UeAnchor {
    /// u_e is zero at the given flattened collocation point.
    Point(usize),
    /// u_e averages to zero over the collocation points.
    ZeroMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteppingConfig {
    pub dt: f64,
    pub gmres: GmresConfig,
    pub ue_anchor: UeAnchor,
    pub warm_start: bool,
    /// Keep v and u_e frozen and advance only the gating components; used
    /// for isolating the gating integrator against closed-form solutions.
    pub freeze_v: bool,
}

impl Default for SteppingConfig {
    fn default() -> SteppingConfig {
        SteppingConfig {
            dt: 1e-3,
            gmres: GmresConfig::default(),
            ue_anchor: UeAnchor::Point(0),
            warm_start: true,
            freeze_v: false,
        }
    }
}

/// Field samples and cached derivative traces at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct BidomainState {
    pub t: f64,
    pub v: Vec<f64>,
    pub ue: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    /// Per-axis first-derivative traces of v at the collocation points.
    pub trace_vx: Vec<Vec<f64>>,
    /// Per-axis second-derivative traces of v at the collocation points.
    pub trace_vxx: Vec<Vec<f64>>,
}

impl BidomainState {
    pub fn w_sum(&self, p: usize) -> f64 {
        self.w.iter().map(|comp| comp[p]).sum()
    }
}

/// Aggregated solver accounting for a run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunStats {
    pub steps: usize,
    pub gmres_solves: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub max_residual: f64,
    pub all_converged: bool,
    pub bumped_pivots: usize,
}

impl RunStats {
    fn new(bumped_pivots: usize) -> RunStats {
        RunStats {
            all_converged: true,
            bumped_pivots,
            ..RunStats::default()
        }
    }

    fn absorb(&mut self, s: &SolveStats) {
        self.gmres_solves += 1;
        self.total_iterations += s.iterations;
        self.max_iterations = self.max_iterations.max(s.iterations);
        if s.residual > self.max_residual {
            self.max_residual = s.residual;
        }
        self.all_converged &= s.converged;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<BidomainState>,
    pub stats: RunStats,
}

impl Trajectory {
    pub fn final_state(&self) -> &BidomainState {
        self.snapshots.last().expect("trajectory holds at least the initial state")
    }
}

#[derive(Debug, Error)]
#[error("run aborted at step {step} (t = {t}): {source}")]
pub struct RunAbort {
    pub step: usize,
    pub t: f64,
    pub partial: Trajectory,
    #[source]
    pub source: StepError,
}

/// Per-axis operator matrices in synthesis orientation (rows = collocation
/// points, columns = coefficients). `s2t` carries the constant-augmented
/// double integrals, `sht`/`s1t` its second and first derivative chains
/// (zero first column), `h_t` the classical sampling matrix for gating and
/// `h_inv` its closed-form inverse from row orthogonality.
#[derive(Debug)]
struct AxisBasis {
    n: usize,
    s2t: Matrix,
    sht: Matrix,
    s1t: Matrix,
    h_t: Matrix,
    h_inv: Matrix,
}

impl AxisBasis {
    fn build(basis: &HaarBasis) -> AxisBasis {
        let n = basis.n_wavelets;
        let m = assemble_matrices(basis);
        let mut s2t = Matrix::zeros(n, n);
        let mut sht = Matrix::zeros(n, n);
        let mut s1t = Matrix::zeros(n, n);
        let mut h_t = Matrix::zeros(n, n);
        let mut h_inv = Matrix::zeros(n, n);
        for i in 0..n {
            let d: f64 = (0..n).map(|k| m.h.at(i, k) * m.h.at(i, k)).sum();
            for k in 0..n {
                h_t.data[k * n + i] = m.h.at(i, k);
                h_inv.data[i * n + k] = m.h.at(i, k) / d;
                if i == 0 {
                    s2t.data[k * n] = 1.0;
                } else {
                    s2t.data[k * n + i] = m.p2.at(i, k);
                    sht.data[k * n + i] = m.h.at(i, k);
                    s1t.data[k * n + i] = m.p1.at(i, k);
                }
            }
        }
        AxisBasis {
            n,
            s2t,
            sht,
            s1t,
            h_t,
            h_inv,
        }
    }
}

enum SolveKind {
    Gating(usize),
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Deriv {
    None,
    First,
    Second,
}

/// Per-run solver: fixed basis levels, precomputed conductivity samples,
/// the dense factorization used as the per-step preconditioner, and the
/// warm-start caches.
#[derive(Debug)]
pub struct Stepper {
    problem: BidomainProblem,
    cfg: SteppingConfig,
    dim: usize,
    sizes: Vec<usize>,
    n_points: usize,
    bases: Vec<AxisBasis>,
    axis_grids: Vec<Vec<f64>>,
    points: Vec<f64>,
    digits: Vec<[usize; 3]>,
    sig_i: Vec<Vec<f64>>,
    sig_i_d: Vec<Vec<f64>>,
    sig_e: Vec<Vec<f64>>,
    sig_e_d: Vec<Vec<f64>>,
    live: Vec<bool>,
    anchor_point: usize,
    anchor_row: Vec<f64>,
    /// Pinned beta coefficients (flattened indices) spanning the structural
    /// nullspace left by fully degenerate axes, paired with the balance rows
    /// they replace.
    pins: Vec<(usize, usize)>,
    lu: LuFactors,
    warm_coupled: Option<Vec<f64>>,
    warm_gating: Vec<Option<Vec<f64>>>,
}

impl Stepper {
    pub fn new(
        problem: &BidomainProblem,
        levels: &[usize],
        cfg: &SteppingConfig,
    ) -> Result<Stepper, StepError> {
        if levels.len() != problem.dim {
            return Err(StepError::LevelCount {
                got: levels.len(),
                dim: problem.dim,
            });
        }
        if !(cfg.dt > 0.0) {
            return Err(StepError::BadTimeStep(cfg.dt));
        }

        let dim = problem.dim;
        let mut bases = Vec::with_capacity(dim);
        let mut axis_grids = Vec::with_capacity(dim);
        let mut sizes = Vec::with_capacity(dim);
        for (axis, &j) in levels.iter().enumerate() {
            let (a, b) = problem.domain[axis];
            let hb = HaarBasis::new(a, b, j).map_err(|_| ModelError::EmptyDomain { axis, a, b })?;
            axis_grids.push(collocation_grid(&hb).y);
            sizes.push(hb.n_wavelets);
            bases.push(AxisBasis::build(&hb));
        }
        let n_points: usize = sizes.iter().product();

        let mut digits = vec![[0usize; 3]; n_points];
        for (p, d) in digits.iter_mut().enumerate() {
            let mut rem = p;
            for axis in (0..dim).rev() {
                d[axis] = rem % sizes[axis];
                rem /= sizes[axis];
            }
        }
        let mut points = vec![0.0; n_points * dim];
        for p in 0..n_points {
            for axis in 0..dim {
                points[p * dim + axis] = axis_grids[axis][digits[p][axis]];
            }
        }

        let mut sig_i = vec![vec![0.0; n_points]; dim];
        let mut sig_i_d = vec![vec![0.0; n_points]; dim];
        let mut sig_e = vec![vec![0.0; n_points]; dim];
        let mut sig_e_d = vec![vec![0.0; n_points]; dim];
        for axis in 0..dim {
            for p in 0..n_points {
                let pt = &points[p * dim..(p + 1) * dim];
                let (vi, di) =
                    conductivity_at(&problem.conductivity, axis, Compartment::Intra, pt)?;
                let (ve, de) =
                    conductivity_at(&problem.conductivity, axis, Compartment::Extra, pt)?;
                sig_i[axis][p] = vi;
                sig_i_d[axis][p] = di;
                sig_e[axis][p] = ve;
                sig_e_d[axis][p] = de;
            }
        }
        let live: Vec<bool> = (0..dim)
            .map(|a| {
                sig_i[a]
                    .iter()
                    .chain(&sig_i_d[a])
                    .chain(&sig_e[a])
                    .chain(&sig_e_d[a])
                    .any(|&v| v != 0.0)
            })
            .collect();
        if !live.iter().any(|&l| l) {
            return Err(StepError::FullyDegenerate);
        }

        let anchor_point = match cfg.ue_anchor {
            UeAnchor::Point(idx) => {
                if idx >= n_points {
                    return Err(StepError::AnchorRange {
                        index: idx,
                        points: n_points,
                    });
                }
                idx
            }
            UeAnchor::ZeroMean => 0,
        };
        let mut anchor_row = vec![0.0; n_points];
        match cfg.ue_anchor {
            UeAnchor::Point(idx) => {
                for (q, val) in anchor_row.iter_mut().enumerate() {
                    let mut prod = 1.0;
                    for axis in 0..dim {
                        prod *= bases[axis]
                            .s2t
                            .at(digits[idx][axis], digits[q][axis]);
                    }
                    *val = prod;
                }
            }
            UeAnchor::ZeroMean => {
                let colsums: Vec<Vec<f64>> = bases
                    .iter()
                    .map(|ab| {
                        (0..ab.n)
                            .map(|i| (0..ab.n).map(|k| ab.s2t.at(k, i)).sum())
                            .collect()
                    })
                    .collect();
                for (q, val) in anchor_row.iter_mut().enumerate() {
                    let mut prod = 1.0;
                    for axis in 0..dim {
                        prod *= colsums[axis][digits[q][axis]];
                    }
                    *val = prod;
                }
            }
        }

        let mut pins = Vec::new();
        if live.iter().any(|&l| !l) {
            let mut used = vec![false; n_points];
            used[anchor_point] = true;
            for q in 0..n_points {
                let structural = (0..dim).all(|a| !live[a] || digits[q][a] == 0);
                let constant_mode = (0..dim).all(|a| digits[q][a] == 0);
                if structural && !constant_mode {
                    let mut row = q;
                    while used[row] {
                        row = (row + 1) % n_points;
                    }
                    used[row] = true;
                    pins.push((q, row));
                }
            }
        }

        let mut stepper = Stepper {
            problem: problem.clone(),
            cfg: *cfg,
            dim,
            sizes,
            n_points,
            bases,
            axis_grids,
            points,
            digits,
            sig_i,
            sig_i_d,
            sig_e,
            sig_e_d,
            live,
            anchor_point,
            anchor_row,
            pins,
            lu: LuFactors::factor(Matrix::identity(1), DEFAULT_PIVOT_FLOOR),
            warm_coupled: None,
            warm_gating: Vec::new(),
        };
        let k = stepper.dense_system_matrix();
        stepper.lu = LuFactors::factor(k, DEFAULT_PIVOT_FLOOR);
        stepper.warm_gating = vec![None; problem.ionic.d];
        Ok(stepper)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn axis_grid(&self, axis: usize) -> &[f64] {
        &self.axis_grids[axis]
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.points[p * self.dim..(p + 1) * self.dim]
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    pub fn bumped_pivots(&self) -> usize {
        self.lu.bumped_pivots
    }

    /// Flattened index of the collocation point with the given per-axis
    /// indices.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut out = 0;
        for axis in 0..self.dim {
            out = out * self.sizes[axis] + idx[axis];
        }
        out
    }

    pub fn initial_state(&self) -> BidomainState {
        let n = self.n_points;
        let domain = &self.problem.domain;
        let mut v = vec![0.0; n];
        let mut w0 = vec![0.0; n];
        let mut trace_vx = vec![vec![0.0; n]; self.dim];
        let mut trace_vxx = vec![vec![0.0; n]; self.dim];
        for p in 0..n {
            let pt = self.point(p);
            v[p] = self.problem.v0.eval(pt, domain);
            w0[p] = self.problem.w0.eval(pt, domain);
            for axis in 0..self.dim {
                trace_vx[axis][p] = self.problem.v0.derivative(axis, pt, domain);
                trace_vxx[axis][p] = self.problem.v0.second_derivative(axis, pt, domain);
            }
        }
        BidomainState {
            t: 0.0,
            v,
            ue: vec![0.0; n],
            w: vec![w0; self.problem.ionic.d],
            trace_vx,
            trace_vxx,
        }
    }

    fn kron_factors(&self, deriv_axis: Option<usize>, deriv: Deriv) -> Vec<&Matrix> {
        self.bases
            .iter()
            .enumerate()
            .map(|(b, ab)| match (deriv_axis, deriv) {
                (Some(a), Deriv::First) if a == b => &ab.s1t,
                (Some(a), Deriv::Second) if a == b => &ab.sht,
                _ => &ab.s2t,
            })
            .collect()
    }

    /// Values of the constant-augmented double-integral expansion.
    fn synth_values(&self, coeffs: &[f64], out: &mut [f64]) {
        kron_apply(&self.kron_factors(None, Deriv::None), coeffs, out);
    }

    fn synth_axis(&self, axis: usize, deriv: Deriv, coeffs: &[f64], out: &mut [f64]) {
        kron_apply(&self.kron_factors(Some(axis), deriv), coeffs, out);
    }

    /// Matrix-free action of the anchored block system on [alpha; beta].
    pub fn apply_system(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n_points;
        assert_eq!(x.len(), 2 * n);
        assert_eq!(y.len(), 2 * n);
        let (alpha, beta) = x.split_at(n);
        let mut tmp = vec![0.0; n];

        self.synth_values(alpha, &mut tmp);
        for p in 0..n {
            y[p] = self.problem.c_m * tmp[p];
        }
        y[n..].fill(0.0);
        for axis in 0..self.dim {
            if !self.live[axis] {
                continue;
            }
            self.synth_axis(axis, Deriv::Second, beta, &mut tmp);
            for p in 0..n {
                y[p] += self.sig_e[axis][p] * tmp[p];
                y[n + p] += (self.sig_i[axis][p] + self.sig_e[axis][p]) * tmp[p];
            }
            self.synth_axis(axis, Deriv::First, beta, &mut tmp);
            for p in 0..n {
                y[p] += self.sig_e_d[axis][p] * tmp[p];
                y[n + p] += (self.sig_i_d[axis][p] + self.sig_e_d[axis][p]) * tmp[p];
            }
            self.synth_axis(axis, Deriv::Second, alpha, &mut tmp);
            for p in 0..n {
                y[n + p] += self.cfg.dt * self.sig_i[axis][p] * tmp[p];
            }
            self.synth_axis(axis, Deriv::First, alpha, &mut tmp);
            for p in 0..n {
                y[n + p] += self.cfg.dt * self.sig_i_d[axis][p] * tmp[p];
            }
        }
        let mut anchor_val = 0.0;
        for q in 0..n {
            anchor_val += self.anchor_row[q] * beta[q];
        }
        y[n + self.anchor_point] = anchor_val;
        for &(coeff, row) in &self.pins {
            y[n + row] = beta[coeff];
        }
    }

    /// Dense assembly of the same anchored block system (used for the
    /// once-per-run factorization and as the brute-force oracle in tests).
    pub fn dense_system_matrix(&self) -> Matrix {
        let n = self.n_points;
        let mut k = Matrix::zeros(2 * n, 2 * n);
        for p in 0..n {
            let dp = self.digits[p];
            for q in 0..n {
                let dq = self.digits[q];
                let mut k2 = 1.0;
                for axis in 0..self.dim {
                    k2 *= self.bases[axis].s2t.at(dp[axis], dq[axis]);
                }
                k.data[p * 2 * n + q] = self.problem.c_m * k2;
                let mut bv = 0.0;
                let mut ae = 0.0;
                let mut be = 0.0;
                for axis in 0..self.dim {
                    if !self.live[axis] {
                        continue;
                    }
                    let mut sh = 1.0;
                    let mut s1 = 1.0;
                    for b in 0..self.dim {
                        let ab = &self.bases[b];
                        if b == axis {
                            sh *= ab.sht.at(dp[b], dq[b]);
                            s1 *= ab.s1t.at(dp[b], dq[b]);
                        } else {
                            sh *= ab.s2t.at(dp[b], dq[b]);
                            s1 *= ab.s2t.at(dp[b], dq[b]);
                        }
                    }
                    bv += self.sig_e[axis][p] * sh + self.sig_e_d[axis][p] * s1;
                    ae += self.sig_i[axis][p] * sh + self.sig_i_d[axis][p] * s1;
                    be += (self.sig_i[axis][p] + self.sig_e[axis][p]) * sh
                        + (self.sig_i_d[axis][p] + self.sig_e_d[axis][p]) * s1;
                }
                k.data[p * 2 * n + n + q] = bv;
                k.data[(n + p) * 2 * n + q] = self.cfg.dt * ae;
                k.data[(n + p) * 2 * n + n + q] = be;
            }
        }
        let arow = n + self.anchor_point;
        for q in 0..2 * n {
            k.data[arow * 2 * n + q] = 0.0;
        }
        for q in 0..n {
            k.data[arow * 2 * n + n + q] = self.anchor_row[q];
        }
        for &(coeff, row) in &self.pins {
            let r = n + row;
            for q in 0..2 * n {
                k.data[r * 2 * n + q] = 0.0;
            }
            k.data[r * 2 * n + n + coeff] = 1.0;
        }
        k
    }

    /// Right-hand side of the gating system: g collocated at the points.
    pub fn gating_rhs(&self, state: &BidomainState) -> Vec<Vec<f64>> {
        (0..self.problem.ionic.d)
            .map(|comp| {
                (0..self.n_points)
                    .map(|p| gating_rate(&self.problem.ionic, state.v[p], state.w[comp][p]))
                    .collect()
            })
            .collect()
    }

    /// Right-hand side of the coupled system at the step ending at `t_next`,
    /// using w already advanced to `t_next` (w-first ordering).
    pub fn coupled_rhs(&self, state: &BidomainState, w_next: &[Vec<f64>], t_next: f64) -> Vec<f64> {
        let n = self.n_points;
        let mut b = vec![0.0; 2 * n];
        for p in 0..n {
            let pt = self.point(p);
            let w_sum: f64 = w_next.iter().map(|comp| comp[p]).sum();
            let f = ionic_current(&self.problem.ionic, state.v[p], w_sum);
            let i1 = self.problem.stimulus.i1_at(pt, t_next);
            let i2 = self.problem.stimulus.i2_at(pt, t_next);
            b[p] = i2 - f;
            let mut trace = 0.0;
            for axis in 0..self.dim {
                if !self.live[axis] {
                    continue;
                }
                trace += self.sig_i[axis][p] * state.trace_vxx[axis][p]
                    + self.sig_i_d[axis][p] * state.trace_vx[axis][p];
            }
            b[n + p] = (i2 - i1) - trace;
        }
        b[n + self.anchor_point] = 0.0;
        for &(_, row) in &self.pins {
            b[n + row] = 0.0;
        }
        b
    }

    fn solve(
        &mut self,
        kind: SolveKind,
        b: &[f64],
    ) -> Result<(Vec<f64>, SolveStats), StepError> {
        let (y, stats) = match kind {
            SolveKind::Gating(comp) => {
                let op = PreconditionedGating { stepper: self };
                let x0 = self.warm_gating[comp].as_deref().filter(|_| self.cfg.warm_start);
                gmres_solve(&op, b, x0, &self.cfg.gmres)?
            }
            SolveKind::Coupled => {
                let op = PreconditionedCoupled { stepper: self };
                let x0 = self.warm_coupled.as_deref().filter(|_| self.cfg.warm_start);
                gmres_solve(&op, b, x0, &self.cfg.gmres)?
            }
        };
        if !stats.converged {
            return Err(StepError::SolverStalled {
                iterations: stats.iterations,
                residual: stats.residual,
                tol: self.cfg.gmres.tol,
            });
        }
        let x = match kind {
            SolveKind::Gating(comp) => {
                self.warm_gating[comp] = Some(y.clone());
                let mut x = vec![0.0; y.len()];
                let factors: Vec<&Matrix> = self.bases.iter().map(|ab| &ab.h_inv).collect();
                kron_apply(&factors, &y, &mut x);
                x
            }
            SolveKind::Coupled => {
                self.warm_coupled = Some(y.clone());
                self.lu.solve(&y)
            }
        };
        Ok((x, stats))
    }

    /// Advances the gating components one step (the first half of the
    /// w-first splitting), returning the new components and solver stats.
    pub fn step_gating(
        &mut self,
        state: &BidomainState,
    ) -> Result<(Vec<Vec<f64>>, Vec<SolveStats>), StepError> {
        let rhs = self.gating_rhs(state);
        let mut w_next = Vec::with_capacity(rhs.len());
        let mut all_stats = Vec::with_capacity(rhs.len());
        let mut vals = vec![0.0; self.n_points];
        for (comp, c) in rhs.iter().enumerate() {
            let (gamma, stats) = self.solve(SolveKind::Gating(comp), c)?;
            let factors: Vec<&Matrix> = self.bases.iter().map(|ab| &ab.h_t).collect();
            kron_apply(&factors, &gamma, &mut vals);
            let mut w = state.w[comp].clone();
            for p in 0..self.n_points {
                w[p] += self.cfg.dt * vals[p];
            }
            w_next.push(w);
            all_stats.push(stats);
        }
        Ok((w_next, all_stats))
    }

    /// Advances the full state one step in place, returning the stats of
    /// every linear solve performed.
    pub fn step(&mut self, state: &mut BidomainState) -> Result<Vec<SolveStats>, StepError> {
        let t_next = state.t + self.cfg.dt;
        let (w_next, mut stats) = self.step_gating(state)?;
        if self.cfg.freeze_v {
            state.w = w_next;
            state.t = t_next;
            return Ok(stats);
        }
        let b = self.coupled_rhs(state, &w_next, t_next);
        let (x, coupled_stats) = self.solve(SolveKind::Coupled, &b)?;
        stats.push(coupled_stats);

        let n = self.n_points;
        let (alpha, beta) = x.split_at(n);
        let mut vals = vec![0.0; n];
        self.synth_values(alpha, &mut vals);
        for p in 0..n {
            state.v[p] += self.cfg.dt * vals[p];
        }
        for axis in 0..self.dim {
            self.synth_axis(axis, Deriv::Second, alpha, &mut vals);
            for p in 0..n {
                state.trace_vxx[axis][p] += self.cfg.dt * vals[p];
            }
            self.synth_axis(axis, Deriv::First, alpha, &mut vals);
            for p in 0..n {
                state.trace_vx[axis][p] += self.cfg.dt * vals[p];
            }
        }
        self.synth_values(beta, &mut vals);
        match self.cfg.ue_anchor {
            UeAnchor::Point(idx) => {
                let shift = vals[idx];
                for p in 0..n {
                    state.ue[p] = vals[p] - shift;
                }
            }
            UeAnchor::ZeroMean => {
                let mean: f64 = vals.iter().sum::<f64>() / n as f64;
                for p in 0..n {
                    state.ue[p] = vals[p] - mean;
                }
            }
        }
        state.w = w_next;
        state.t = t_next;
        Ok(stats)
    }

    /// Advances t = 0 to the problem's final time, emitting a snapshot every
    /// `snapshot_every` steps (0 keeps only the initial and final states).
    pub fn run(&mut self, snapshot_every: usize) -> Result<Trajectory, Box<RunAbort>> {
        let t_final = self.problem.t_final;
        let dt = self.cfg.dt;
        let steps = (t_final / dt).round() as usize;
        let mut trajectory = Trajectory {
            snapshots: Vec::new(),
            stats: RunStats::new(self.lu.bumped_pivots),
        };
        let mut state = self.initial_state();
        trajectory.snapshots.push(state.clone());
        if (steps as f64 * dt - t_final).abs() > 1e-8 * t_final.max(dt) {
            return Err(Box::new(RunAbort {
                step: 0,
                t: 0.0,
                partial: trajectory,
                source: StepError::TimeStepMismatch { dt, t_final },
            }));
        }
        for s in 0..steps {
            match self.step(&mut state) {
                Ok(stats) => {
                    for st in &stats {
                        trajectory.stats.absorb(st);
                    }
                    trajectory.stats.steps += 1;
                    state.t = (s + 1) as f64 * dt;
                    let last = s + 1 == steps;
                    if last || (snapshot_every > 0 && (s + 1) % snapshot_every == 0) {
                        trajectory.snapshots.push(state.clone());
                    }
                }
                Err(source) => {
                    return Err(Box::new(RunAbort {
                        step: s,
                        t: state.t,
                        partial: trajectory,
                        source,
                    }));
                }
            }
        }
        Ok(trajectory)
    }
}

/// Gating operator composed with its closed-form inverse preconditioner;
/// GMRES sees an operator that is the identity up to roundoff.
struct PreconditionedGating<'a> {
    stepper: &'a Stepper,
}

impl LinearOperator for PreconditionedGating<'_> {
    fn dim(&self) -> usize {
        self.stepper.n_points
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let inv: Vec<&Matrix> = self.stepper.bases.iter().map(|ab| &ab.h_inv).collect();
        let fwd: Vec<&Matrix> = self.stepper.bases.iter().map(|ab| &ab.h_t).collect();
        let mut tmp = vec![0.0; x.len()];
        kron_apply(&inv, x, &mut tmp);
        kron_apply(&fwd, &tmp, y);
    }
}

/// Coupled block operator composed with the once-per-run LU factorization
/// as a right preconditioner.
struct PreconditionedCoupled<'a> {
    stepper: &'a Stepper,
}

impl LinearOperator for PreconditionedCoupled<'_> {
    fn dim(&self) -> usize {
        2 * self.stepper.n_points
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let tmp = self.stepper.lu.solve(x);
        self.stepper.apply_system(&tmp, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bidomain_model::{
        AxisProfile, ConductivityField, InitialField, IonicModel, SeparableField, Stimulus,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem_1d(v0: InitialField, sigma: f64, t_final: f64) -> BidomainProblem {
        let domain = vec![(0.0, 1.0)];
        let c = ConductivityField::constant(domain.clone(), &[sigma], &[sigma]).unwrap();
        BidomainProblem::new(
            domain,
            1.0,
            c,
            IonicModel::cubic_default(),
            Stimulus::zero(),
            v0,
            InitialField::Constant(0.2),
            t_final,
        )
        .unwrap()
    }

    #[test]
    fn gating_system_frozen_level_zero_values() {
        let problem = BidomainProblem::baseline(1, 0.5).unwrap();
        let cfg = SteppingConfig {
            dt: 1e-3,
            ..SteppingConfig::default()
        };
        let mut stepper = Stepper::new(&problem, &[0], &cfg).unwrap();
        let state = stepper.initial_state();
        let rhs = stepper.gating_rhs(&state);
        assert_eq!(rhs.len(), 1);
        assert!((rhs[0][0] + 0.2).abs() < 1e-15);
        assert!((rhs[0][1] + 0.2).abs() < 1e-15);
        let (gamma, stats) = stepper.solve(SolveKind::Gating(0), &rhs[0]).unwrap();
        assert!(stats.converged);
        assert!((gamma[0] + 0.2).abs() < 1e-12);
        assert!(gamma[1].abs() < 1e-12);
        let (w_next, _) = stepper.step_gating(&state).unwrap();
        for &w in &w_next[0] {
            assert!((w - 0.1998).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_equilibrium_is_unchanged() {
        let domain = vec![(0.0, 1.0)];
        let c = ConductivityField::constant(domain.clone(), &[1.2e-3], &[1.2e-3]).unwrap();
        let problem = BidomainProblem::new(
            domain,
            1.0,
            c,
            IonicModel::cubic_default(),
            Stimulus::zero(),
            InitialField::Constant(0.2),
            InitialField::Constant(0.1),
            0.5,
        )
        .unwrap();
        let mut stepper = Stepper::new(&problem, &[2], &SteppingConfig::default()).unwrap();
        let state = stepper.initial_state();
        let (w_next, stats) = stepper.step_gating(&state).unwrap();
        assert!(stats[0].converged);
        for (p, &w) in w_next[0].iter().enumerate() {
            assert_eq!(w, state.w[0][p]);
        }
    }

    #[test]
    fn gating_step_equals_pointwise_euler() {
        for (dim, levels) in [(1usize, vec![2usize]), (2, vec![1, 1])] {
            let domain = vec![(0.0, 1.0); dim];
            let c = ConductivityField::constant(
                domain.clone(),
                &vec![1.2e-3; dim],
                &vec![1.2e-3; dim],
            )
            .unwrap();
            let problem = BidomainProblem::new(
                domain,
                1.0,
                c,
                IonicModel::cubic_default(),
                Stimulus::zero(),
                InitialField::CosineProduct {
                    base: 0.2,
                    amplitude: 0.1,
                    axes: vec![true; dim],
                },
                InitialField::CosineProduct {
                    base: 0.1,
                    amplitude: 0.05,
                    axes: vec![true; dim],
                },
                0.5,
            )
            .unwrap();
            let cfg = SteppingConfig {
                dt: 1e-3,
                ..SteppingConfig::default()
            };
            let mut stepper = Stepper::new(&problem, &levels, &cfg).unwrap();
            let state = stepper.initial_state();
            let (w_next, _) = stepper.step_gating(&state).unwrap();
            for p in 0..stepper.n_points() {
                let euler = state.w[0][p]
                    + cfg.dt * gating_rate(&problem.ionic, state.v[p], state.w[0][p]);
                assert!(
                    (w_next[0][p] - euler).abs() < 1e-11,
                    "dim {dim} point {p}: {} vs {euler}",
                    w_next[0][p]
                );
            }
        }
    }

    #[test]
    fn hand_assembled_level_zero_matrix() {
        let sigma = 0.25;
        let problem = problem_1d(InitialField::Constant(0.2), sigma, 0.5);
        let cfg = SteppingConfig {
            dt: 1e-2,
            ..SteppingConfig::default()
        };
        let stepper = Stepper::new(&problem, &[0], &cfg).unwrap();
        let k = stepper.dense_system_matrix();
        let d = sigma;
        let dt = cfg.dt;
        let want = [
            [1.0, 0.03125, 0.0, d],
            [1.0, 0.21875, 0.0, -d],
            [0.0, 0.0, 1.0, 0.03125],
            [0.0, -dt * d, 0.0, -2.0 * d],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert!(
                    (k.at(r, c) - want[r][c]).abs() < 1e-14,
                    "entry ({r},{c}): {} vs {}",
                    k.at(r, c),
                    want[r][c]
                );
            }
        }
    }

    #[test]
    fn matrix_free_action_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let variable = SeparableField {
            factors: vec![AxisProfile::Polynomial(vec![0.2, 0.5, -0.5])],
        };
        let problem_var = {
            let domain = vec![(0.0, 1.0)];
            let c = ConductivityField::new(
                domain.clone(),
                vec![variable.clone()],
                vec![variable.clone()],
            )
            .unwrap();
            BidomainProblem::new(
                domain,
                2.0,
                c,
                IonicModel::cubic_default(),
                Stimulus::zero(),
                InitialField::Constant(0.2),
                InitialField::Constant(0.2),
                0.5,
            )
            .unwrap()
        };
        let sep2d = {
            let domain = vec![(0.0, 1.0); 2];
            let f = SeparableField {
                factors: vec![
                    AxisProfile::Polynomial(vec![0.3, 0.4]),
                    AxisProfile::Polynomial(vec![1.0, -0.5]),
                ],
            };
            let c = ConductivityField::new(
                domain.clone(),
                vec![f.clone(), f.clone()],
                vec![f.clone(), f],
            )
            .unwrap();
            BidomainProblem::new(
                domain,
                1.0,
                c,
                IonicModel::cubic_default(),
                Stimulus::zero(),
                InitialField::Constant(0.2),
                InitialField::Constant(0.2),
                0.5,
            )
            .unwrap()
        };
        let cases: Vec<(BidomainProblem, Vec<usize>)> = vec![
            (problem_var, vec![1]),
            (BidomainProblem::baseline(2, 0.5).unwrap(), vec![0, 0]),
            (sep2d, vec![1, 1]),
            (BidomainProblem::baseline(3, 0.5).unwrap(), vec![0, 0, 0]),
        ];
        for (problem, levels) in cases {
            let stepper = Stepper::new(&problem, &levels, &SteppingConfig::default()).unwrap();
            let k = stepper.dense_system_matrix();
            let n2 = 2 * stepper.n_points();
            for _ in 0..5 {
                let x: Vec<f64> = (0..n2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut want = vec![0.0; n2];
                k.matvec(&x, &mut want);
                let mut got = vec![0.0; n2];
                stepper.apply_system(&x, &mut got);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "dim {}", problem.dim);
                }
            }
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let domain = vec![(0.0, 1.0)];
        let c = ConductivityField::constant(domain.clone(), &[1.2e-3], &[1.2e-3]).unwrap();
        let problem = BidomainProblem::new(
            domain,
            1.0,
            c,
            IonicModel::cubic_default(),
            Stimulus::zero(),
            InitialField::Constant(0.0),
            InitialField::Constant(0.0),
            0.1,
        )
        .unwrap();
        let mut stepper = Stepper::new(&problem, &[2], &SteppingConfig::default()).unwrap();
        let trajectory = stepper.run(0).unwrap();
        let last = trajectory.final_state();
        for p in 0..stepper.n_points() {
            assert!(last.v[p].abs() <= 1e-9);
            assert!(last.ue[p].abs() <= 1e-9);
            assert!(last.w[0][p].abs() <= 1e-9);
        }
        assert!(trajectory.stats.all_converged);
    }

    #[test]
    fn first_step_direction_matches_pointwise_euler() {
        let problem = BidomainProblem::baseline(1, 0.5).unwrap();
        let cfg = SteppingConfig {
            dt: 1e-4,
            ..SteppingConfig::default()
        };
        let mut stepper = Stepper::new(&problem, &[3], &cfg).unwrap();
        let mut state = stepper.initial_state();
        stepper.step(&mut state).unwrap();
        let w1 = 0.2 + cfg.dt * gating_rate(&problem.ionic, 0.2, 0.2);
        let expect = 0.2 - cfg.dt * ionic_current(&problem.ionic, 0.2, w1);
        assert!(expect > 0.2);
        for &v in &state.v {
            assert!(v > 0.2);
            assert!((v - expect).abs() < 1e-12);
        }
        for &u in &state.ue {
            assert!(u.abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_modes_agree_up_to_a_constant() {
        let v0 = InitialField::CosineProduct {
            base: 0.2,
            amplitude: 0.1,
            axes: vec![true],
        };
        let problem = problem_1d(v0, 0.25, 0.5);
        let base_cfg = SteppingConfig {
            dt: 1e-3,
            ..SteppingConfig::default()
        };
        let run = |anchor: UeAnchor| {
            let cfg = SteppingConfig {
                ue_anchor: anchor,
                ..base_cfg
            };
            let mut stepper = Stepper::new(&problem, &[2], &cfg).unwrap();
            let mut state = stepper.initial_state();
            for _ in 0..5 {
                stepper.step(&mut state).unwrap();
            }
            state
        };
        let point = run(UeAnchor::Point(0));
        let zero_mean = run(UeAnchor::ZeroMean);
        assert_eq!(point.ue[0], 0.0);
        let mean: f64 = zero_mean.ue.iter().sum::<f64>() / zero_mean.ue.len() as f64;
        assert!(mean.abs() < 1e-12);
        let offset = point.ue[0] - zero_mean.ue[0];
        for p in 0..point.ue.len() {
            assert!((point.v[p] - zero_mean.v[p]).abs() < 1e-9);
            assert!(((point.ue[p] - zero_mean.ue[p]) - offset).abs() < 1e-9);
        }
    }

    fn dead_transverse_problem(dim: usize, v0_axes: Vec<bool>) -> BidomainProblem {
        let domain = vec![(0.0, 1.0); dim];
        let mut intra = vec![0.25];
        intra.extend(vec![0.0; dim - 1]);
        let c = ConductivityField::constant(domain.clone(), &intra, &intra).unwrap();
        BidomainProblem::new(
            domain,
            1.0,
            c,
            IonicModel::cubic_default(),
            Stimulus::zero(),
            InitialField::CosineProduct {
                base: 0.2,
                amplitude: 0.1,
                axes: v0_axes,
            },
            InitialField::Constant(0.2),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn y_invariant_2d_reduces_to_1d() {
        let cfg = SteppingConfig {
            dt: 1e-3,
            ..SteppingConfig::default()
        };
        let p1 = {
            let v0 = InitialField::CosineProduct {
                base: 0.2,
                amplitude: 0.1,
                axes: vec![true],
            };
            problem_1d(v0, 0.25, 0.5)
        };
        let mut s1 = Stepper::new(&p1, &[2], &cfg).unwrap();
        let mut st1 = s1.initial_state();
        let p2 = dead_transverse_problem(2, vec![true, false]);
        let mut s2 = Stepper::new(&p2, &[2, 2], &cfg).unwrap();
        let mut st2 = s2.initial_state();
        for _ in 0..10 {
            s1.step(&mut st1).unwrap();
            s2.step(&mut st2).unwrap();
        }
        let n = s1.n_points();
        for kx in 0..n {
            for ky in 0..n {
                let p = s2.flat_index(&[kx, ky]);
                assert!(
                    (st2.v[p] - st1.v[kx]).abs() <= 1e-8,
                    "v at ({kx},{ky}): {} vs {}",
                    st2.v[p],
                    st1.v[kx]
                );
                assert!(
                    (st2.ue[p] - st1.ue[kx]).abs() <= 1e-8,
                    "ue at ({kx},{ky}): {} vs {}",
                    st2.ue[p],
                    st1.ue[kx]
                );
                assert!((st2.w[0][p] - st1.w[0][kx]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn z_invariant_3d_reduces_to_2d() {
        let cfg = SteppingConfig {
            dt: 1e-3,
            ..SteppingConfig::default()
        };
        let p2 = {
            let domain = vec![(0.0, 1.0); 2];
            let vals = [0.25, 0.0];
            let c = ConductivityField::constant(domain.clone(), &vals, &vals).unwrap();
            BidomainProblem::new(
                domain,
                1.0,
                c,
                IonicModel::cubic_default(),
                Stimulus::zero(),
                InitialField::CosineProduct {
                    base: 0.2,
                    amplitude: 0.1,
                    axes: vec![true, false],
                },
                InitialField::Constant(0.2),
                0.5,
            )
            .unwrap()
        };
        let mut s2 = Stepper::new(&p2, &[1, 1], &cfg).unwrap();
        let mut st2 = s2.initial_state();
        let p3 = dead_transverse_problem(3, vec![true, false, false]);
        let mut s3 = Stepper::new(&p3, &[1, 1, 1], &cfg).unwrap();
        let mut st3 = s3.initial_state();
        for _ in 0..3 {
            s2.step(&mut st2).unwrap();
            s3.step(&mut st3).unwrap();
        }
        assert_eq!(s3.n_points(), 64);
        let n = 4;
        for kx in 0..n {
            for ky in 0..n {
                let q = s2.flat_index(&[kx, ky]);
                for kz in 0..n {
                    let p = s3.flat_index(&[kx, ky, kz]);
                    assert!((st3.v[p] - st2.v[q]).abs() <= 1e-8);
                    assert!((st3.ue[p] - st2.ue[q]).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn three_dimensional_block_system_shape() {
        let problem = BidomainProblem::baseline(3, 0.5).unwrap();
        let cfg = SteppingConfig {
            dt: 1e-3,
            ..SteppingConfig::default()
        };
        let mut stepper = Stepper::new(&problem, &[2, 2, 2], &cfg).unwrap();
        assert_eq!(2 * stepper.n_points(), 1024);
        let mut state = stepper.initial_state();
        let stats = stepper.step(&mut state).unwrap();
        assert!(stats.iter().all(|s| s.converged));
        assert!((state.t - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn fully_degenerate_conductivity_is_rejected() {
        let domain = vec![(0.0, 1.0)];
        let c = ConductivityField::constant(domain.clone(), &[0.0], &[0.0]).unwrap();
        let problem = BidomainProblem::new(
            domain,
            1.0,
            c,
            IonicModel::cubic_default(),
            Stimulus::zero(),
            InitialField::Constant(0.2),
            InitialField::Constant(0.2),
            0.5,
        )
        .unwrap();
        let err = Stepper::new(&problem, &[2], &SteppingConfig::default()).unwrap_err();
        assert!(matches!(err, StepError::FullyDegenerate));
    }

    #[test]
    fn temporal_self_convergence_is_first_order() {
        let v0 = InitialField::CosineProduct {
            base: 0.2,
            amplitude: 0.1,
            axes: vec![true],
        };
        let t_final = 0.04;
        let problem = problem_1d(v0, 0.25, t_final);
        let run_final_v = |dt: f64| {
            let cfg = SteppingConfig {
                dt,
                ..SteppingConfig::default()
            };
            let mut stepper = Stepper::new(&problem, &[2], &cfg).unwrap();
            let trajectory = stepper.run(0).unwrap();
            assert!(trajectory.stats.all_converged);
            trajectory.final_state().v.clone()
        };
        let dts = [4e-3, 2e-3, 1e-3];
        let mut errors = Vec::new();
        for &dt in &dts {
            let coarse = run_final_v(dt);
            let fine = run_final_v(dt / 64.0);
            let err = coarse
                .iter()
                .zip(&fine)
                .map(|(c, f)| (c - f).abs())
                .fold(0.0f64, f64::max);
            errors.push(err);
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
        let order = (errors[0] / errors[2]).ln() / (dts[0] / dts[2]).ln();
        assert!(order >= 0.9, "fitted order {order}, errors {errors:?}");
    }

    #[test]
    fn mismatched_step_size_aborts_before_stepping() {
        let problem = problem_1d(InitialField::Constant(0.2), 0.25, 0.1);
        let cfg = SteppingConfig {
            dt: 0.03,
            ..SteppingConfig::default()
        };
        let mut stepper = Stepper::new(&problem, &[1], &cfg).unwrap();
        let abort = stepper.run(0).unwrap_err();
        assert!(matches!(abort.source, StepError::TimeStepMismatch { .. }));
        assert_eq!(abort.partial.snapshots.len(), 1);
    }

    #[test]
    fn snapshot_cadence_and_times() {
        let problem = problem_1d(InitialField::Constant(0.2), 0.25, 0.01);
        let cfg = SteppingConfig {
            dt: 1e-3,
            ..SteppingConfig::default()
        };
        let mut stepper = Stepper::new(&problem, &[1], &cfg).unwrap();
        let trajectory = stepper.run(4).unwrap();
        let times: Vec<f64> = trajectory.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(times, vec![0.0, 0.004, 0.008, 0.01]);
        assert_eq!(trajectory.stats.steps, 10);
        let only_ends = stepper.run(0).unwrap();
        assert_eq!(only_ends.snapshots.len(), 2);
        assert_eq!(only_ends.snapshots[1].t, 0.01);
    }

    #[test]
    fn levels_and_anchor_are_validated() {
        let problem = BidomainProblem::baseline(2, 0.5).unwrap();
        let err = Stepper::new(&problem, &[2], &SteppingConfig::default()).unwrap_err();
        assert!(matches!(err, StepError::LevelCount { got: 1, dim: 2 }));
        let cfg = SteppingConfig {
            ue_anchor: UeAnchor::Point(1000),
            ..SteppingConfig::default()
        };
        let err = Stepper::new(&problem, &[1, 1], &cfg).unwrap_err();
        assert!(matches!(err, StepError::AnchorRange { .. }));
        let cfg = SteppingConfig {
            dt: 0.0,
            ..SteppingConfig::default()
        };
        let err = Stepper::new(&problem, &[1, 1], &cfg).unwrap_err();
        assert!(matches!(err, StepError::BadTimeStep(_)));
    }
}
