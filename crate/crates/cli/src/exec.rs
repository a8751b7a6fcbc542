//! Mode execution: build the model from a resolved config, run the requested
//! mode, and persist CSV outputs plus a hash manifest into the output
//! directory. Files are written to a temporary name and renamed into place;
//! the manifest is written last and lists every emitted file with its SHA-256
//! digest.

use crate::config::{
    check_guard_rails, emit_config, AnchorSpec, ConductivitySpec, ConfigError, DecayFunction,
    FieldSpec, Mode, RunConfig, StimulusSpec, TemporalRefSpec,
};
use haarcol::bidomain_model::{
    BidomainProblem, ConductivityField, InitialField, IonicModel, ModelError, Stimulus,
    StimulusProfile,
};
use haarcol::collocation_stepper::{
    BidomainState, RunAbort, RunStats, StepError, Stepper, SteppingConfig, UeAnchor,
};
use haarcol::krylov::GmresConfig;
use haarcol::verification_harness as harness;
use haarcol::verification_harness::HarnessError;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

/// Pass threshold on the fitted coefficient-decay slope.
pub const DECAY_SLOPE_BOUND: f64 = -2.75;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model rejected the configuration: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Abort(#[from] Box<RunAbort>),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExecError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExecError::Config(_) | ExecError::Model(_) | ExecError::Io { .. } => EXIT_CONFIG,
            ExecError::Step(s) => step_exit_code(s),
            ExecError::Harness(HarnessError::Step(s)) => step_exit_code(s),
            ExecError::Harness(_) => EXIT_CONFIG,
            ExecError::Abort(_) => EXIT_SOLVER,
        }
    }
}

fn step_exit_code(e: &StepError) -> i32 {
    match e {
        StepError::SolverStalled { .. } | StepError::Krylov(_) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

/// Everything recorded about a finished (or failed) invocation.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub tool_version: String,
    pub mode: Mode,
    pub jobs: usize,
    pub status: String,
    pub duration_seconds: f64,
    pub stats: Option<RunStats>,
    /// Emitted file names with their SHA-256 content digests.
    pub files: Vec<(String, String)>,
    pub config_echo: String,
}

impl RunManifest {
    fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tool = haarcol {}", self.tool_version);
        let _ = writeln!(out, "mode = {}", self.mode.name());
        let _ = writeln!(out, "status = {}", self.status);
        let _ = writeln!(out, "jobs = {}", self.jobs);
        let _ = writeln!(out, "duration_seconds = {:.3}", self.duration_seconds);
        if let Some(s) = &self.stats {
            let _ = writeln!(out, "run_steps = {}", s.steps);
            let _ = writeln!(out, "gmres_solves = {}", s.gmres_solves);
            let _ = writeln!(out, "gmres_total_iterations = {}", s.total_iterations);
            let _ = writeln!(out, "gmres_max_iterations = {}", s.max_iterations);
            let _ = writeln!(out, "gmres_max_residual = {:e}", s.max_residual);
            let _ = writeln!(out, "gmres_all_converged = {}", s.all_converged);
            let _ = writeln!(out, "lu_bumped_pivots = {}", s.bumped_pivots);
        }
        for (name, sha) in &self.files {
            let _ = writeln!(out, "file = {name} sha256 {sha}");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "[config]");
        out.push_str(&self.config_echo);
        out
    }
}

struct ModeOutput {
    files: Vec<(String, String)>,
    stats: Option<RunStats>,
    /// None when the mode has no pass criterion; Some(reason) on failure.
    failure: Option<String>,
    gated: bool,
    summary: Vec<String>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_atomic(dir: &Path, name: &str, content: &str) -> Result<String, ExecError> {
    let path = dir.join(name);
    let tmp = dir.join(format!("{name}.tmp"));
    let io_err = |source: std::io::Error| ExecError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(&tmp, content).map_err(io_err)?;
    fs::rename(&tmp, &path).map_err(io_err)?;
    Ok(sha256_hex(content.as_bytes()))
}

/// Cell text for CSV payloads: 17 significant digits, locale independent.
pub fn csv_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fold_stats(acc: &mut Option<RunStats>, s: &RunStats) {
    match acc {
        None => *acc = Some(*s),
        Some(a) => {
            a.steps += s.steps;
            a.gmres_solves += s.gmres_solves;
            a.total_iterations += s.total_iterations;
            a.max_iterations = a.max_iterations.max(s.max_iterations);
            if s.max_residual > a.max_residual {
                a.max_residual = s.max_residual;
            }
            a.all_converged &= s.all_converged;
            a.bumped_pivots += s.bumped_pivots;
        }
    }
}

fn build_problem(cfg: &RunConfig) -> Result<BidomainProblem, ExecError> {
    let p = &cfg.problem;
    let conductivity = match &p.conductivity {
        ConductivitySpec::Example3 => ConductivityField::anisotropic_cardiac(p.domain.clone())?,
        ConductivitySpec::Constant { intra, extra } => {
            ConductivityField::constant(p.domain.clone(), intra, extra)?
        }
    };
    let ionic = IonicModel {
        a: p.ionic.a,
        k_w: p.ionic.k_w,
        c1: p.ionic.c1,
        c2: p.ionic.c2,
        d: p.ionic.d,
    };
    let stimulus = match &p.stimulus {
        StimulusSpec::Zero => Stimulus::zero(),
        StimulusSpec::BoxPulse {
            amplitude,
            lo,
            hi,
            t_on,
            t_off,
        } => Stimulus {
            intra: StimulusProfile::BoxPulse {
                amplitude: *amplitude,
                lo: lo.clone(),
                hi: hi.clone(),
                t_on: *t_on,
                t_off: *t_off,
            },
            extra: StimulusProfile::Zero,
        },
    };
    Ok(BidomainProblem::new(
        p.domain.clone(),
        p.cm,
        conductivity,
        ionic,
        stimulus,
        initial_field(&p.v0),
        initial_field(&p.w0),
        p.t_final,
    )?)
}

fn initial_field(f: &FieldSpec) -> InitialField {
    match f {
        FieldSpec::Constant(v) => InitialField::Constant(*v),
        FieldSpec::Cosine {
            base,
            amplitude,
            axes,
        } => InitialField::CosineProduct {
            base: *base,
            amplitude: *amplitude,
            axes: axes.clone(),
        },
    }
}

fn stepping(cfg: &RunConfig) -> SteppingConfig {
    SteppingConfig {
        dt: cfg.numerics.dt,
        gmres: GmresConfig {
            tol: cfg.numerics.gmres_tol,
            restart: cfg.numerics.gmres_restart,
            max_iters: cfg.numerics.gmres_max_iters,
        },
        ue_anchor: match cfg.numerics.anchor {
            AnchorSpec::Point => UeAnchor::Point(cfg.numerics.anchor_index),
            AnchorSpec::ZeroMean => UeAnchor::ZeroMean,
        },
        warm_start: cfg.numerics.warm_start,
        freeze_v: false,
    }
}

fn require_f64_list(value: &Option<Vec<f64>>, key: &'static str) -> Result<Vec<f64>, ExecError> {
    value.clone().ok_or(ExecError::Config(ConfigError::MissingKey {
        section: "[numerics]",
        key,
    }))
}

fn snapshot_csv(stepper: &Stepper, state: &BidomainState) -> String {
    let dim = stepper.dim();
    let mut out = String::new();
    let mut header: Vec<String> = ["x", "y", "z"][..dim]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.push("v".to_string());
    header.push("ue".to_string());
    for k in 0..state.w.len() {
        header.push(format!("w{}", k + 1));
    }
    let _ = writeln!(out, "{}", header.join(","));
    for p in 0..stepper.n_points() {
        let mut cells: Vec<String> = stepper.point(p).iter().map(|&c| csv_f64(c)).collect();
        cells.push(csv_f64(state.v[p]));
        cells.push(csv_f64(state.ue[p]));
        for comp in &state.w {
            cells.push(csv_f64(comp[p]));
        }
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

fn run_simulate(cfg: &RunConfig) -> Result<ModeOutput, ExecError> {
    let problem = build_problem(cfg)?;
    let base = stepping(cfg);
    let mut stepper = Stepper::new(&problem, &cfg.numerics.levels, &base)?;
    let trajectory = stepper.run(cfg.outputs.snapshot_every)?;

    let mut files = Vec::new();
    let mut index = String::from("file,t\n");
    for (s, state) in trajectory.snapshots.iter().enumerate() {
        let name = format!("snapshot_{s:04}.csv");
        let _ = writeln!(index, "{name},{}", csv_f64(state.t));
        files.push((name, snapshot_csv(&stepper, state)));
    }
    files.push(("snapshots.csv".to_string(), index));

    let stats = trajectory.stats;
    let final_state = trajectory.final_state();
    let summary = vec![
        format!(
            "simulate: {} points, {} steps to t = {}, {} snapshots",
            stepper.n_points(),
            stats.steps,
            final_state.t,
            trajectory.snapshots.len()
        ),
        format!(
            "gmres: {} solves, max {} iterations, max residual {:e}, converged = {}",
            stats.gmres_solves, stats.max_iterations, stats.max_residual, stats.all_converged
        ),
    ];
    Ok(ModeOutput {
        files,
        stats: Some(stats),
        failure: None,
        gated: false,
        summary,
    })
}

fn run_error_table(cfg: &RunConfig) -> Result<ModeOutput, ExecError> {
    let dts = require_f64_list(&cfg.numerics.dts, "dts")?;
    let ref_dt = cfg
        .numerics
        .ref_dt
        .ok_or(ExecError::Config(ConfigError::MissingKey {
            section: "[numerics]",
            key: "ref_dt",
        }))?;
    let levels = cfg.numerics.levels.clone();
    let ref_levels = match cfg.numerics.ref_j {
        Some(j) => vec![j; cfg.problem.dim],
        None => levels.clone(),
    };
    let problem = build_problem(cfg)?;
    let base = stepping(cfg);

    let reference = harness::reference_run(&problem, &ref_levels, ref_dt, &dts, &base)?;
    let report = harness::error_table(
        &problem,
        &levels,
        &dts,
        &ref_levels,
        &reference,
        &cfg.outputs.probes,
        &base,
    )?;

    let dim = cfg.problem.dim;
    let mut table = String::new();
    let mut header: Vec<String> = ["x", "y", "z"][..dim]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for &dt in &report.dts {
        header.push(format!("dt={dt:e}"));
    }
    let _ = writeln!(table, "{}", header.join(","));
    for (row, point) in report.probe_points.iter().enumerate() {
        let mut cells: Vec<String> = point.iter().map(|&c| csv_f64(c)).collect();
        for col in 0..report.dts.len() {
            cells.push(csv_f64(report.abs_errors[row][col]));
        }
        let _ = writeln!(table, "{}", cells.join(","));
    }

    let mut norms = String::from("dt,linf_v,linf_ue,x_norm\n");
    for (i, &dt) in report.dts.iter().enumerate() {
        let n = &report.norms[i];
        let _ = writeln!(
            norms,
            "{},{},{},{}",
            csv_f64(dt),
            csv_f64(n.linf_v),
            csv_f64(n.linf_ue),
            csv_f64(n.x_norm)
        );
    }

    let mut stats = Some(reference.stats);
    for s in &report.run_stats {
        fold_stats(&mut stats, s);
    }
    let mut summary = vec![format!(
        "error-table: {} probes, reference dt = {ref_dt:e}",
        report.probe_points.len()
    )];
    for (i, &dt) in report.dts.iter().enumerate() {
        summary.push(format!(
            "dt = {dt:e}: max |v - ref| = {:e}, x-norm = {:e}",
            report.norms[i].linf_v, report.norms[i].x_norm
        ));
    }
    Ok(ModeOutput {
        files: vec![
            ("error_table.csv".to_string(), table),
            ("norms.csv".to_string(), norms),
        ],
        stats,
        failure: None,
        gated: false,
        summary,
    })
}

fn run_grid_validation(cfg: &RunConfig) -> Result<ModeOutput, ExecError> {
    let js = cfg
        .numerics
        .js
        .clone()
        .ok_or(ExecError::Config(ConfigError::MissingKey {
            section: "[numerics]",
            key: "js",
        }))?;
    let problem = build_problem(cfg)?;
    let base = stepping(cfg);
    let report = harness::grid_validation(&problem, &js, cfg.numerics.dt, &base)?;

    let mut table = String::from("level,points_per_axis,linf_v,linf_ue,ratio_v,ratio_ue\n");
    for (i, &level) in report.levels.iter().enumerate() {
        let ratio_v = report
            .v
            .ratios
            .get(i)
            .map(|&r| csv_f64(r))
            .unwrap_or_default();
        let ratio_ue = report
            .ue
            .ratios
            .get(i)
            .map(|&r| csv_f64(r))
            .unwrap_or_default();
        let _ = writeln!(
            table,
            "{level},{},{},{},{ratio_v},{ratio_ue}",
            1usize << (level + 1),
            csv_f64(report.v.errors[i]),
            csv_f64(report.ue.errors[i])
        );
    }

    let mut summary_csv = String::from(
        "reference_level,noise_floor_v,noise_floor_ue,order_v,order_ue,finest_within_floor,good_enough_level\n",
    );
    let _ = writeln!(
        summary_csv,
        "{},{},{},{},{},{},{}",
        report.reference_level,
        csv_f64(report.noise_floor_v),
        csv_f64(report.noise_floor_ue),
        csv_f64(report.v.fitted_order),
        csv_f64(report.ue.fitted_order),
        report.finest_within_floor,
        report
            .good_enough_level
            .map(|j| j.to_string())
            .unwrap_or_default()
    );

    let mut stats = None;
    for s in &report.run_stats {
        fold_stats(&mut stats, s);
    }

    let mut failure_parts = Vec::new();
    if !report.v.monotone {
        failure_parts.push("v errors do not decrease".to_string());
    }
    if !report.ue.monotone {
        failure_parts.push("ue errors do not decrease".to_string());
    }
    if !report.finest_within_floor {
        failure_parts.push(format!(
            "finest errors ({:e}, {:e}) sit above twice the restriction floors ({:e}, {:e})",
            report.v.errors.last().copied().unwrap_or(f64::NAN),
            report.ue.errors.last().copied().unwrap_or(f64::NAN),
            report.noise_floor_v,
            report.noise_floor_ue
        ));
    }
    let failure = if failure_parts.is_empty() {
        None
    } else {
        Some(failure_parts.join("; "))
    };

    let mut summary = vec![format!(
        "grid-validation: levels {:?} against reference level {}",
        report.levels, report.reference_level
    )];
    for (i, &level) in report.levels.iter().enumerate() {
        summary.push(format!(
            "J = {level}: |v - ref| = {:e}, |ue - ref| = {:e}",
            report.v.errors[i], report.ue.errors[i]
        ));
    }
    summary.push(format!(
        "noise floors: v {:e}, ue {:e}; good-enough level: {}",
        report.noise_floor_v,
        report.noise_floor_ue,
        report
            .good_enough_level
            .map(|j| j.to_string())
            .unwrap_or_else(|| "none".to_string())
    ));

    Ok(ModeOutput {
        files: vec![
            ("grid_validation.csv".to_string(), table),
            ("grid_summary.csv".to_string(), summary_csv),
        ],
        stats,
        failure,
        gated: true,
        summary,
    })
}

fn run_temporal_order(cfg: &RunConfig) -> Result<ModeOutput, ExecError> {
    let dts = require_f64_list(&cfg.numerics.dts, "dts")?;
    let reference = match cfg.numerics.temporal_reference {
        TemporalRefSpec::SelfConsistent => harness::TemporalReference::SelfConsistent {
            dt_ref: cfg
                .numerics
                .ref_dt
                .ok_or(ExecError::Config(ConfigError::MissingKey {
                    section: "[numerics]",
                    key: "ref_dt",
                }))?,
        },
        TemporalRefSpec::GatingClosedForm => harness::TemporalReference::GatingClosedForm,
    };
    let problem = build_problem(cfg)?;
    let base = stepping(cfg);
    let (report, run_stats) =
        harness::temporal_order(&problem, &cfg.numerics.levels, &dts, reference, &base)?;

    let mut table = String::from("dt,error,ratio\n");
    for (i, &dt) in report.sweep.iter().enumerate() {
        let ratio = report
            .ratios
            .get(i)
            .map(|&r| csv_f64(r))
            .unwrap_or_default();
        let _ = writeln!(table, "{},{},{ratio}", csv_f64(dt), csv_f64(report.errors[i]));
    }

    let mut stats = None;
    for s in &run_stats {
        fold_stats(&mut stats, s);
    }
    let failure = if report.monotone {
        None
    } else {
        Some("errors do not decrease with the step size".to_string())
    };
    let summary = vec![format!(
        "temporal-order: fitted order {:.3} over dts {:?}",
        report.fitted_order, report.sweep
    )];
    Ok(ModeOutput {
        files: vec![("temporal_order.csv".to_string(), table)],
        stats,
        failure,
        gated: true,
        summary,
    })
}

fn run_coeff_decay(cfg: &RunConfig) -> Result<ModeOutput, ExecError> {
    let j_max = cfg
        .numerics
        .j_max
        .ok_or(ExecError::Config(ConfigError::MissingKey {
            section: "[numerics]",
            key: "j_max",
        }))?;
    let function = cfg.numerics.function.unwrap_or(DecayFunction::AbsDiff);
    let f: fn(f64, f64) -> f64 = match function {
        DecayFunction::AbsDiff => |x, y| (x - y).abs(),
        DecayFunction::Additive => |x, y| x + y,
        DecayFunction::Constant => |_, _| 1.0,
    };
    let report = harness::coefficient_decay_check(&f, j_max);

    let mut table = String::from("m,max_coefficient\n");
    for (i, &m) in report.sweep.iter().enumerate() {
        let _ = writeln!(table, "{},{}", csv_f64(m), csv_f64(report.errors[i]));
    }
    let failure = if report.fitted_order <= DECAY_SLOPE_BOUND {
        None
    } else {
        Some(format!(
            "fitted slope {:.3} exceeds the bound {DECAY_SLOPE_BOUND}",
            report.fitted_order
        ))
    };
    let summary = vec![format!(
        "coeff-decay: function {}, levels up to {j_max}, fitted slope {:.3}",
        function.name(),
        report.fitted_order
    )];
    Ok(ModeOutput {
        files: vec![("coeff_decay.csv".to_string(), table)],
        stats: None,
        failure,
        gated: true,
        summary,
    })
}

/// Runs one mode end to end and returns the process exit code. All file
/// output lands in `out_dir`; log lines go to stdout, problems to stderr.
pub fn execute(mode: Mode, cfg: &RunConfig, out_dir: &Path, jobs: usize) -> i32 {
    let start = Instant::now();
    if jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return EXIT_CONFIG;
    }
    if let Some(file_mode) = cfg.mode {
        if file_mode != mode {
            eprintln!(
                "error: the config sets mode = {} but the tool was invoked as {}",
                file_mode.name(),
                mode.name()
            );
            return EXIT_CONFIG;
        }
    }
    if let Err(e) = fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create output directory {}: {e}", out_dir.display());
        return EXIT_CONFIG;
    }
    match check_guard_rails(cfg) {
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
        Ok(Some(warning)) => eprintln!("{warning}"),
        Ok(None) => {}
    }

    let mut resolved = cfg.clone();
    resolved.mode = Some(mode);
    let config_echo = emit_config(&resolved);
    let tool_version = env!("CARGO_PKG_VERSION").to_string();

    let result = match mode {
        Mode::Simulate => run_simulate(cfg),
        Mode::ErrorTable => run_error_table(cfg),
        Mode::GridValidation => run_grid_validation(cfg),
        Mode::TemporalOrder => run_temporal_order(cfg),
        Mode::CoeffDecay => run_coeff_decay(cfg),
    };

    let mut manifest = RunManifest {
        tool_version,
        mode,
        jobs,
        status: String::new(),
        duration_seconds: 0.0,
        stats: None,
        files: Vec::new(),
        config_echo,
    };

    match result {
        Ok(out) => {
            for (name, content) in &out.files {
                match write_atomic(out_dir, name, content) {
                    Ok(sha) => manifest.files.push((name.clone(), sha)),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return e.exit_code();
                    }
                }
            }
            manifest.stats = out.stats;
            manifest.status = match &out.failure {
                None => "ok".to_string(),
                Some(reason) => format!("check-failed: {reason}"),
            };
            manifest.duration_seconds = start.elapsed().as_secs_f64();
            if let Err(e) = write_atomic(out_dir, "manifest.txt", &manifest.render()) {
                eprintln!("error: {e}");
                return e.exit_code();
            }
            for line in &out.summary {
                println!("{line}");
            }
            if out.gated {
                match &out.failure {
                    None => {
                        println!("{}: PASS", mode.name());
                        EXIT_OK
                    }
                    Some(reason) => {
                        println!("{}: FAIL ({reason})", mode.name());
                        EXIT_CHECK_FAILED
                    }
                }
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            manifest.duration_seconds = start.elapsed().as_secs_f64();
            if let Err(werr) = write_atomic(out_dir, "manifest.txt", &manifest.render()) {
                eprintln!("error: {werr}");
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny_simulate_config() -> RunConfig {
        parse_config(
            "[problem]\nt_final = 0.01\n[numerics]\nj = 2\ndt = 1e-3\n[outputs]\nsnapshot_every = 5\n",
        )
        .unwrap()
    }

    #[test]
    fn csv_cells_carry_seventeen_significant_digits() {
        assert_eq!(csv_f64(1.0), "1.0000000000000000e0");
        assert_eq!(csv_f64(0.1), "1.0000000000000001e-1");
        let third = 1.0 / 3.0;
        assert_eq!(csv_f64(third).parse::<f64>().unwrap(), third);
    }

    #[test]
    fn sha256_matches_a_known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn simulate_outputs_and_manifest_line_up() {
        let cfg = tiny_simulate_config();
        let dir = tempfile::tempdir().unwrap();
        let code = execute(Mode::Simulate, &cfg, dir.path(), 1);
        assert_eq!(code, EXIT_OK);

        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("status = ok"), "{manifest}");
        assert!(manifest.contains("gmres_all_converged = true"), "{manifest}");
        assert!(manifest.contains("[config]"), "{manifest}");

        let mut listed = 0;
        for line in manifest.lines() {
            let Some(rest) = line.strip_prefix("file = ") else {
                continue;
            };
            let (name, sha) = rest.split_once(" sha256 ").unwrap();
            let data = fs::read(dir.path().join(name)).unwrap();
            assert_eq!(sha256_hex(&data), sha, "digest mismatch for {name}");
            listed += 1;
        }
        let on_disk = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(listed + 1, on_disk, "every emitted file is listed");

        // 0, 0.005, 0.01 plus the index file.
        assert_eq!(listed, 4);
        let snap = fs::read_to_string(dir.path().join("snapshot_0002.csv")).unwrap();
        assert!(snap.starts_with("x,v,ue,w1\n"), "{snap}");
        assert_eq!(snap.lines().count(), 9);
    }

    #[test]
    fn mode_mismatch_between_file_and_invocation_is_a_config_error() {
        let mut cfg = tiny_simulate_config();
        cfg.mode = Some(Mode::ErrorTable);
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(execute(Mode::Simulate, &cfg, dir.path(), 1), EXIT_CONFIG);
    }

    #[test]
    fn missing_sweep_keys_fail_as_config_errors() {
        let cfg = tiny_simulate_config();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(execute(Mode::ErrorTable, &cfg, dir.path(), 1), EXIT_CONFIG);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("status = failed"), "{manifest}");
        assert!(manifest.contains("dts"), "{manifest}");
    }

    #[test]
    fn temporal_order_mode_emits_a_monotone_table() {
        let cfg = parse_config(
            "[problem]\nt_final = 0.04\n[numerics]\nj = 1\ndt = 1e-3\ndts = 4e-3,2e-3,1e-3\ntemporal_reference = gating-closed-form\n",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let code = execute(Mode::TemporalOrder, &cfg, dir.path(), 1);
        assert_eq!(code, EXIT_OK);
        let table = fs::read_to_string(dir.path().join("temporal_order.csv")).unwrap();
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), "dt,error,ratio");
        let errors: Vec<f64> = lines
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(errors.len(), 3);
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    }

    #[test]
    fn coeff_decay_mode_passes_for_the_kink_function() {
        let cfg = parse_config(
            "[problem]\nt_final = 1\n[numerics]\nj = 1\ndt = 1e-3\nj_max = 3\nfunction = abs-diff\n",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(execute(Mode::CoeffDecay, &cfg, dir.path(), 1), EXIT_OK);
        let table = fs::read_to_string(dir.path().join("coeff_decay.csv")).unwrap();
        assert_eq!(table.lines().count(), 5);
    }

    #[test]
    fn solver_failure_exits_three_and_is_recorded() {
        let mut cfg = tiny_simulate_config();
        cfg.numerics.gmres_tol = 1e-16;
        cfg.numerics.gmres_restart = 1;
        cfg.numerics.gmres_max_iters = 1;
        let dir = tempfile::tempdir().unwrap();
        let code = execute(Mode::Simulate, &cfg, dir.path(), 1);
        assert_eq!(code, EXIT_SOLVER);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("status = failed"), "{manifest}");
        assert!(manifest.contains("step"), "{manifest}");
    }
}
