//! Empirical verification tools: reference-solution generation, pointwise
//! absolute-error tables, combined-norm error reports, resolution sweeps,
//! temporal-order estimation, and the two-dimensional coefficient-decay
//! check for Lipschitz functions.
//!
//! Cross-resolution comparison never interpolates: a coarse collocation
//! point sits exactly halfway between two finer midpoints per axis, so the
//! fine field is restricted by averaging those bracketing values (the
//! restriction is exact for fields linear on the bracketing cell). The same
//! bracketing pairs yield a per-field noise floor, the largest half-gap of
//! the reference across any compared point, which bounds how much of a
//! measured error can be attributed to the restriction itself.

use crate::bidomain_model::BidomainProblem;
use crate::collocation_stepper::{
    BidomainState, RunAbort, RunStats, StepError, Stepper, SteppingConfig, Trajectory,
};
use thiserror::Error;

/// Abscissae used for one-dimensional error tables; these are collocation
/// midpoints of the 64-point grid, rounded to four decimals.
pub const TABLE_PROBES_1D: [f64; 7] = [0.0234, 0.1172, 0.2266, 0.3828, 0.5391, 0.7734, 0.9297];

/// Per-level maxima below this threshold (scaled by the sampled magnitude
/// of f) are treated as exact zeros in the decay fit.
pub const DECAY_NOISE_FLOOR: f64 = 1e-12;

/// Fitted order reported when every usable level sits below the noise
/// floor: the decay is steeper than anything measurable in double
/// precision.
pub const SUB_NOISE_ORDER: f64 = -60.0;

const RATIO_CLAMP: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("reference step {dt_ref} must be strictly smaller than every compared step, got {dt}")]
    ReferenceNotFiner { dt: f64, dt_ref: f64 },
    #[error("final times differ: runs end at {run}, reference at {reference}")]
    MismatchedFinalTime { run: f64, reference: f64 },
    #[error("sweep needs at least {need} entries, got {got}")]
    TooFewSweepPoints { got: usize, need: usize },
    #[error("resolution sweep must be strictly increasing")]
    LevelsNotIncreasing,
    #[error("step-size sweep must be strictly decreasing")]
    StepsNotDecreasing,
    #[error("reference level {reference} is coarser than compared level {run}")]
    ReferenceTooCoarse { run: usize, reference: usize },
    #[error(transparent)]
    Step(#[from] StepError),
}

impl From<Box<RunAbort>> for HarnessError {
    fn from(abort: Box<RunAbort>) -> HarnessError {
        HarnessError::Step(abort.source)
    }
}

/// Error magnitudes of one run against the reference at the final time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorNorms {
    pub linf_v: f64,
    pub linf_ue: f64,
    /// Combined norm (‖v‖₂² + ‖u_e‖₂² + Σ_k ‖w^k‖₂²)^{1/2} of the
    /// difference, with each L² norm taken by collocation quadrature.
    pub x_norm: f64,
}

/// Pointwise absolute errors at probe locations for each step size, plus
/// grid-wide norms per step size.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Probe coordinates resolved to the nearest collocation points.
    pub probe_points: Vec<Vec<f64>>,
    pub dts: Vec<f64>,
    /// `abs_errors[row][col]` is |v − v_ref| at probe `row` under `dts[col]`.
    pub abs_errors: Vec<Vec<f64>>,
    pub norms: Vec<ErrorNorms>,
    pub run_stats: Vec<RunStats>,
}

/// One sweep of a scalar knob against error magnitudes, with a least-squares
/// slope in log–log axes and successive error ratios e_i / e_{i+1}.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub sweep: Vec<f64>,
    pub errors: Vec<f64>,
    pub fitted_order: f64,
    pub ratios: Vec<f64>,
    /// True when the errors strictly decrease along the sweep.
    pub monotone: bool,
}

impl ConvergenceReport {
    fn from_sweep(sweep: Vec<f64>, errors: Vec<f64>) -> ConvergenceReport {
        let fitted_order = log_log_slope(&sweep, &errors);
        let ratios = successive_ratios(&errors);
        let monotone = errors.windows(2).all(|w| w[1] < w[0]);
        ConvergenceReport {
            sweep,
            errors,
            fitted_order,
            ratios,
            monotone,
        }
    }
}

/// Resolution-sweep outcome: per-level errors for v and u_e against the
/// finest level, restriction noise floors at the finest compared level, and
/// the saturation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValidationReport {
    /// Compared levels (every sweep entry except the last).
    pub levels: Vec<usize>,
    pub reference_level: usize,
    pub v: ConvergenceReport,
    pub ue: ConvergenceReport,
    pub noise_floor_v: f64,
    pub noise_floor_ue: f64,
    /// True when the finest compared errors for v and u_e are both within
    /// twice their restriction noise floors.
    pub finest_within_floor: bool,
    /// Smallest compared level whose v and u_e errors are both within twice
    /// the finest compared errors.
    pub good_enough_level: Option<usize>,
    pub run_stats: Vec<RunStats>,
}

/// Reference used by `temporal_order`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemporalReference {
    /// Compare final v fields against a run of the same problem and levels
    /// at a finer step.
    SelfConsistent { dt_ref: f64 },
    /// Freeze v at its initial data and compare the first gating component
    /// against the closed form w(t) = w* + (w0 − w*)e^{−c2 t} with
    /// w* = c1 v0 / c2, evaluated pointwise.
    GatingClosedForm,
}

/// Restriction from a fine tensor collocation grid onto a coarser one over
/// the same domain: per axis, each coarse midpoint is the average of the
/// two fine midpoints straddling it (or the identical point at equal
/// levels).
#[derive(Debug, Clone)]
pub struct GridMap {
    coarse_sizes: Vec<usize>,
    pairs: Vec<Vec<[usize; 2]>>,
    fine_sizes: Vec<usize>,
}

impl GridMap {
    pub fn new(coarse_levels: &[usize], fine_levels: &[usize]) -> Result<GridMap, HarnessError> {
        assert_eq!(coarse_levels.len(), fine_levels.len());
        let mut pairs = Vec::with_capacity(coarse_levels.len());
        let mut coarse_sizes = Vec::with_capacity(coarse_levels.len());
        let mut fine_sizes = Vec::with_capacity(coarse_levels.len());
        for (&jc, &jf) in coarse_levels.iter().zip(fine_levels) {
            if jf < jc {
                return Err(HarnessError::ReferenceTooCoarse {
                    run: jc,
                    reference: jf,
                });
            }
            let nc = 1usize << (jc + 1);
            let nf = 1usize << (jf + 1);
            let r = 1usize << (jf - jc);
            let axis_pairs: Vec<[usize; 2]> = (0..nc)
                .map(|k| {
                    if r == 1 {
                        [k, k]
                    } else {
                        [r * k + r / 2 - 1, r * k + r / 2]
                    }
                })
                .collect();
            pairs.push(axis_pairs);
            coarse_sizes.push(nc);
            fine_sizes.push(nf);
        }
        Ok(GridMap {
            coarse_sizes,
            pairs,
            fine_sizes,
        })
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse_sizes.iter().product()
    }

    fn corners(&self, digits: &[usize], out: &mut Vec<usize>) {
        out.clear();
        out.push(0);
        for (axis, &d) in digits.iter().enumerate() {
            let [l, r] = self.pairs[axis][d];
            let n = self.fine_sizes[axis];
            let prev = out.len();
            for i in 0..prev {
                let base = out[i];
                out[i] = base * n + l;
                out.push(base * n + r);
            }
        }
    }

    fn coarse_digits(&self, mut p: usize, digits: &mut [usize]) {
        for axis in (0..self.coarse_sizes.len()).rev() {
            digits[axis] = p % self.coarse_sizes[axis];
            p /= self.coarse_sizes[axis];
        }
    }

    /// Restricts a fine field to the coarse grid by corner averaging.
    pub fn restrict(&self, fine: &[f64]) -> Vec<f64> {
        let dim = self.coarse_sizes.len();
        let mut digits = vec![0usize; dim];
        let mut corners = Vec::with_capacity(1 << dim);
        (0..self.coarse_len())
            .map(|p| {
                self.coarse_digits(p, &mut digits);
                self.corners(&digits, &mut corners);
                corners.iter().map(|&c| fine[c]).sum::<f64>() / corners.len() as f64
            })
            .collect()
    }

    /// Largest half-spread of the fine field across any coarse point's
    /// bracketing corners; zero when the levels are equal.
    pub fn half_gap(&self, fine: &[f64]) -> f64 {
        let dim = self.coarse_sizes.len();
        let mut digits = vec![0usize; dim];
        let mut corners = Vec::with_capacity(1 << dim);
        let mut gap = 0.0f64;
        for p in 0..self.coarse_len() {
            self.coarse_digits(p, &mut digits);
            self.corners(&digits, &mut corners);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &c in &corners {
                lo = lo.min(fine[c]);
                hi = hi.max(fine[c]);
            }
            gap = gap.max((hi - lo) / 2.0);
        }
        gap
    }
}

/// Collocation midpoints of one axis at the given level.
pub fn axis_midpoints(domain: (f64, f64), level: usize) -> Vec<f64> {
    let n = 1usize << (level + 1);
    let h = (domain.1 - domain.0) / n as f64;
    (0..n).map(|k| domain.0 + (k as f64 + 0.5) * h).collect()
}

/// Volume of one collocation cell for the given levels.
pub fn cell_volume(domain: &[(f64, f64)], levels: &[usize]) -> f64 {
    domain
        .iter()
        .zip(levels)
        .map(|(&(a, b), &j)| (b - a) / (1usize << (j + 1)) as f64)
        .product()
}

/// L² norm by midpoint collocation quadrature.
pub fn l2_norm(values: &[f64], cell_volume: f64) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() * cell_volume).sqrt()
}

/// Combined norm of a state: root of the summed squared L² norms of v,
/// u_e, and every gating component.
pub fn x_norm(state: &BidomainState, cell_volume: f64) -> f64 {
    let mut total = state.v.iter().map(|v| v * v).sum::<f64>();
    total += state.ue.iter().map(|u| u * u).sum::<f64>();
    for comp in &state.w {
        total += comp.iter().map(|w| w * w).sum::<f64>();
    }
    (total * cell_volume).sqrt()
}

fn linf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.max(RATIO_CLAMP).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(RATIO_CLAMP).ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

fn successive_ratios(errors: &[f64]) -> Vec<f64> {
    errors
        .windows(2)
        .map(|w| w[0].max(RATIO_CLAMP) / w[1].max(RATIO_CLAMP))
        .collect()
}

fn run_to_final(
    problem: &BidomainProblem,
    levels: &[usize],
    cfg: &SteppingConfig,
) -> Result<(BidomainState, RunStats), HarnessError> {
    let mut stepper = Stepper::new(problem, levels, cfg)?;
    let trajectory = stepper.run(0)?;
    let stats = trajectory.stats;
    let state = trajectory
        .snapshots
        .into_iter()
        .last()
        .expect("run keeps the final state");
    Ok((state, stats))
}

/// Runs the problem at a finer step size for use as a temporal reference.
pub fn reference_run(
    problem: &BidomainProblem,
    levels: &[usize],
    dt_ref: f64,
    compared_dts: &[f64],
    base: &SteppingConfig,
) -> Result<Trajectory, HarnessError> {
    for &dt in compared_dts {
        if dt_ref >= dt {
            return Err(HarnessError::ReferenceNotFiner { dt, dt_ref });
        }
    }
    let cfg = SteppingConfig {
        dt: dt_ref,
        ..*base
    };
    let mut stepper = Stepper::new(problem, levels, &cfg)?;
    Ok(stepper.run(0)?)
}

/// Nearest collocation point of the run grid for each probe coordinate.
pub fn resolve_probes(
    problem: &BidomainProblem,
    levels: &[usize],
    probes: &[Vec<f64>],
) -> Vec<Vec<usize>> {
    let grids: Vec<Vec<f64>> = problem
        .domain
        .iter()
        .zip(levels)
        .map(|(&d, &j)| axis_midpoints(d, j))
        .collect();
    probes
        .iter()
        .map(|probe| {
            probe
                .iter()
                .zip(&grids)
                .map(|(&x, grid)| {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (k, &y) in grid.iter().enumerate() {
                        let d = (x - y).abs();
                        if d < best_d {
                            best_d = d;
                            best = k;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

fn flatten_index(idx: &[usize], sizes: &[usize]) -> usize {
    idx.iter()
        .zip(sizes)
        .fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Runs the problem once per step size and tabulates absolute v errors at
/// the probes against the reference's final state, along with grid-wide
/// error norms per step size.
pub fn error_table(
    problem: &BidomainProblem,
    levels: &[usize],
    dts: &[f64],
    ref_levels: &[usize],
    reference: &Trajectory,
    probes: &[Vec<f64>],
    base: &SteppingConfig,
) -> Result<ErrorReport, HarnessError> {
    let ref_state = reference.final_state();
    if (ref_state.t - problem.t_final).abs() > 1e-9 * problem.t_final.max(1.0) {
        return Err(HarnessError::MismatchedFinalTime {
            run: problem.t_final,
            reference: ref_state.t,
        });
    }
    let map = GridMap::new(levels, ref_levels)?;
    let ref_v = map.restrict(&ref_state.v);
    let ref_ue = map.restrict(&ref_state.ue);
    let ref_w: Vec<Vec<f64>> = ref_state.w.iter().map(|comp| map.restrict(comp)).collect();
    let vol = cell_volume(&problem.domain, levels);

    let sizes: Vec<usize> = levels.iter().map(|&j| 1usize << (j + 1)).collect();
    let probe_idx = resolve_probes(problem, levels, probes);
    let grids: Vec<Vec<f64>> = problem
        .domain
        .iter()
        .zip(levels)
        .map(|(&d, &j)| axis_midpoints(d, j))
        .collect();
    let probe_points: Vec<Vec<f64>> = probe_idx
        .iter()
        .map(|idx| idx.iter().zip(&grids).map(|(&k, g)| g[k]).collect())
        .collect();

    let mut abs_errors = vec![vec![0.0; dts.len()]; probes.len()];
    let mut norms = Vec::with_capacity(dts.len());
    let mut run_stats = Vec::with_capacity(dts.len());
    for (col, &dt) in dts.iter().enumerate() {
        let cfg = SteppingConfig { dt, ..*base };
        let (state, stats) = run_to_final(problem, levels, &cfg)?;
        for (row, idx) in probe_idx.iter().enumerate() {
            let p = flatten_index(idx, &sizes);
            abs_errors[row][col] = (state.v[p] - ref_v[p]).abs();
        }
        let mut x2 = 0.0;
        for p in 0..state.v.len() {
            let dv = state.v[p] - ref_v[p];
            let du = state.ue[p] - ref_ue[p];
            x2 += dv * dv + du * du;
        }
        for (comp, ref_comp) in state.w.iter().zip(&ref_w) {
            for (a, b) in comp.iter().zip(ref_comp) {
                x2 += (a - b) * (a - b);
            }
        }
        norms.push(ErrorNorms {
            linf_v: linf_diff(&state.v, &ref_v),
            linf_ue: linf_diff(&state.ue, &ref_ue),
            x_norm: (x2 * vol).sqrt(),
        });
        run_stats.push(stats);
    }
    Ok(ErrorReport {
        probe_points,
        dts: dts.to_vec(),
        abs_errors,
        norms,
        run_stats,
    })
}

/// Sweeps isotropic resolution levels at a fixed step size and compares
/// every level against the finest one.
pub fn grid_validation(
    problem: &BidomainProblem,
    levels: &[usize],
    dt: f64,
    base: &SteppingConfig,
) -> Result<GridValidationReport, HarnessError> {
    if levels.len() < 3 {
        return Err(HarnessError::TooFewSweepPoints {
            got: levels.len(),
            need: 3,
        });
    }
    if !levels.windows(2).all(|w| w[0] < w[1]) {
        return Err(HarnessError::LevelsNotIncreasing);
    }
    let cfg = SteppingConfig { dt, ..*base };
    let ref_level = *levels.last().unwrap();
    let ref_levels = vec![ref_level; problem.dim];
    let (ref_state, ref_stats) = run_to_final(problem, &ref_levels, &cfg)?;

    let compared = &levels[..levels.len() - 1];
    let mut v_errors = Vec::with_capacity(compared.len());
    let mut ue_errors = Vec::with_capacity(compared.len());
    let mut run_stats = Vec::with_capacity(levels.len());
    let mut noise_floor_v = 0.0;
    let mut noise_floor_ue = 0.0;
    for (k, &j) in compared.iter().enumerate() {
        let run_levels = vec![j; problem.dim];
        let map = GridMap::new(&run_levels, &ref_levels)?;
        let (state, stats) = run_to_final(problem, &run_levels, &cfg)?;
        v_errors.push(linf_diff(&state.v, &map.restrict(&ref_state.v)));
        ue_errors.push(linf_diff(&state.ue, &map.restrict(&ref_state.ue)));
        run_stats.push(stats);
        if k == compared.len() - 1 {
            noise_floor_v = map.half_gap(&ref_state.v);
            noise_floor_ue = map.half_gap(&ref_state.ue);
        }
    }
    run_stats.push(ref_stats);

    let sweep: Vec<f64> = compared.iter().map(|&j| (1usize << (j + 1)) as f64).collect();
    let v = ConvergenceReport::from_sweep(sweep.clone(), v_errors);
    let ue = ConvergenceReport::from_sweep(sweep, ue_errors);
    let finest_within_floor = *v.errors.last().unwrap() <= 2.0 * noise_floor_v
        && *ue.errors.last().unwrap() <= 2.0 * noise_floor_ue;
    let ev_last = *v.errors.last().unwrap();
    let eu_last = *ue.errors.last().unwrap();
    let good_enough_level = compared
        .iter()
        .zip(v.errors.iter().zip(&ue.errors))
        .find(|(_, (ev, eu))| **ev <= 2.0 * ev_last && **eu <= 2.0 * eu_last)
        .map(|(&j, _)| j);
    Ok(GridValidationReport {
        levels: compared.to_vec(),
        reference_level: ref_level,
        v,
        ue,
        noise_floor_v,
        noise_floor_ue,
        finest_within_floor,
        good_enough_level,
        run_stats,
    })
}

/// Sweeps step sizes at fixed levels and fits the temporal order of the
/// error against the chosen reference. Non-monotone errors are flagged in
/// the report, not raised.
pub fn temporal_order(
    problem: &BidomainProblem,
    levels: &[usize],
    dts: &[f64],
    reference: TemporalReference,
    base: &SteppingConfig,
) -> Result<(ConvergenceReport, Vec<RunStats>), HarnessError> {
    if dts.len() < 3 {
        return Err(HarnessError::TooFewSweepPoints {
            got: dts.len(),
            need: 3,
        });
    }
    if !dts.windows(2).all(|w| w[1] < w[0]) {
        return Err(HarnessError::StepsNotDecreasing);
    }
    let mut errors = Vec::with_capacity(dts.len());
    let mut run_stats = Vec::with_capacity(dts.len());
    match reference {
        TemporalReference::SelfConsistent { dt_ref } => {
            let reference = reference_run(problem, levels, dt_ref, dts, base)?;
            let ref_v = &reference.final_state().v;
            for &dt in dts {
                let cfg = SteppingConfig { dt, ..*base };
                let (state, stats) = run_to_final(problem, levels, &cfg)?;
                errors.push(linf_diff(&state.v, ref_v));
                run_stats.push(stats);
            }
        }
        TemporalReference::GatingClosedForm => {
            for &dt in dts {
                let cfg = SteppingConfig {
                    dt,
                    freeze_v: true,
                    ..*base
                };
                let mut stepper = Stepper::new(problem, levels, &cfg)?;
                let initial = stepper.initial_state();
                let trajectory = stepper.run(0)?;
                let state = trajectory.final_state();
                let ionic = &problem.ionic;
                let mut err = 0.0f64;
                for p in 0..state.v.len() {
                    let w_star = ionic.c1 * initial.v[p] / ionic.c2;
                    let w_exact =
                        w_star + (initial.w[0][p] - w_star) * (-ionic.c2 * state.t).exp();
                    err = err.max((state.w[0][p] - w_exact).abs());
                }
                errors.push(err);
                run_stats.push(trajectory.stats);
            }
        }
    }
    let report = ConvergenceReport::from_sweep(dts.to_vec(), errors);
    Ok((report, run_stats))
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 30)
}

fn cell_integral_2d(f: &dyn Fn(f64, f64) -> f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let inner = |x: f64| adaptive_simpson(&|y| f(x, y), y0, y1, 1e-14);
    adaptive_simpson(&inner, x0, x1, 1e-13)
}

/// Values of every basis function (scaling first, then wavelets) on each
/// finest-level cell; entry `[i][r]` is constant across cell r.
fn sign_table(n: usize) -> Vec<Vec<f64>> {
    let mut table = vec![vec![0.0; n]; n];
    table[0] = vec![1.0; n];
    let levels = (n as f64).log2() as usize;
    let mut i = 1;
    for j in 0..levels {
        let m = 1usize << j;
        let span = n / (2 * m);
        for k in 0..m {
            let start = 2 * k * span;
            for r in 0..span {
                table[i][start + r] = 1.0;
                table[i][start + span + r] = -1.0;
            }
            i += 1;
        }
    }
    table
}

/// Measures the per-level decay of the unnormalized tensor coefficients
/// ∬ f·h_{i₁}(x)·h_{i₂}(y) dxdy on [0,1]² over equal-level wavelet pairs
/// (m₁ = m₂ = m, both indices past the scaling function), the quantity the
/// m⁻³ Lipschitz bound addresses; mixed-level pairs obey only a weaker
/// bound and are excluded. The report's sweep holds m = 2^j per level and
/// `fitted_order` the log–log slope, ≈ −3 for a genuinely two-dimensional
/// Lipschitz f. Levels whose maxima sit below the quadrature noise floor
/// are excluded from the fit; if fewer than two levels remain, the slope
/// is reported as `SUB_NOISE_ORDER`.
pub fn coefficient_decay_check(f: &dyn Fn(f64, f64) -> f64, j_max: usize) -> ConvergenceReport {
    let n = 1usize << (j_max + 1);
    let h = 1.0 / n as f64;
    let mut cells = vec![0.0; n * n];
    let mut scale = 0.0f64;
    for r in 0..n {
        for s in 0..n {
            let x0 = r as f64 * h;
            let y0 = s as f64 * h;
            cells[r * n + s] = cell_integral_2d(f, x0, x0 + h, y0, y0 + h);
            scale = scale.max(f(x0 + 0.5 * h, y0 + 0.5 * h).abs());
        }
    }
    let table = sign_table(n);
    let mut partial = vec![vec![0.0; n]; n];
    for (i1, row) in table.iter().enumerate() {
        for s in 0..n {
            let mut acc = 0.0;
            for r in 0..n {
                if row[r] != 0.0 {
                    acc += row[r] * cells[r * n + s];
                }
            }
            partial[i1][s] = acc;
        }
    }
    let mut level_max = vec![0.0f64; j_max + 1];
    for level in 0..=j_max {
        let m = 1usize << level;
        for i1 in m..2 * m {
            for i2 in m..2 * m {
                let mut c = 0.0;
                for s in 0..n {
                    if table[i2][s] != 0.0 {
                        c += table[i2][s] * partial[i1][s];
                    }
                }
                level_max[level] = level_max[level].max(c.abs());
            }
        }
    }
    let sweep: Vec<f64> = (0..=j_max).map(|j| (1usize << j) as f64).collect();
    let noise = DECAY_NOISE_FLOOR * scale.max(1.0);
    let usable: Vec<(f64, f64)> = sweep
        .iter()
        .zip(&level_max)
        .filter(|(_, &e)| e > noise)
        .map(|(&m, &e)| (m, e))
        .collect();
    let fitted_order = if usable.len() >= 2 {
        let xs: Vec<f64> = usable.iter().map(|(m, _)| *m).collect();
        let ys: Vec<f64> = usable.iter().map(|(_, e)| *e).collect();
        log_log_slope(&xs, &ys)
    } else {
        SUB_NOISE_ORDER
    };
    let ratios = successive_ratios(&level_max);
    let monotone = level_max.windows(2).all(|w| w[1] < w[0]);
    ConvergenceReport {
        sweep,
        errors: level_max,
        fitted_order,
        ratios,
        monotone,
    }
}
