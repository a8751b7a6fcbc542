//! Run configuration for the batch front end.
//!
//! The on-disk format is line oriented: `key = value` entries grouped under
//! `[problem]`, `[numerics]`, and `[outputs]` headers, plus an optional
//! top-level `mode` key ahead of the first header. Blank lines and lines
//! starting with `#` or `;` are ignored. Numbers accept decimal or scientific
//! notation, booleans are `true` or `false`, lists are comma separated, and
//! per-point or per-compartment groups are separated by semicolons.

use haarcol::verification_harness::TABLE_PROBES_1D;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected \"key = value\" or \"[section]\", got \"{text}\"")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown section \"{name}\"")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key \"{key}\" in {section}")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: key \"{key}\": {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("missing required key \"{key}\" in {section}")]
    MissingKey {
        section: &'static str,
        key: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    ErrorTable,
    GridValidation,
    TemporalOrder,
    CoeffDecay,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::ErrorTable => "error-table",
            Mode::GridValidation => "grid-validation",
            Mode::TemporalOrder => "temporal-order",
            Mode::CoeffDecay => "coeff-decay",
        }
    }

    fn parse(s: &str) -> Option<Mode> {
        match s {
            "simulate" => Some(Mode::Simulate),
            "error-table" => Some(Mode::ErrorTable),
            "grid-validation" => Some(Mode::GridValidation),
            "temporal-order" => Some(Mode::TemporalOrder),
            "coeff-decay" => Some(Mode::CoeffDecay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConductivitySpec {
    /// Constant anisotropic diagonal: 1.2e-3 along the first axis and
    /// 2.5562e-4 along the remaining axes, identical in both compartments.
    Example3,
    /// Per-axis constant diagonals for each compartment.
    Constant { intra: Vec<f64>, extra: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IonicSpec {
    pub a: f64,
    pub k_w: f64,
    pub c1: f64,
    pub c2: f64,
    pub d: usize,
}

impl Default for IonicSpec {
    fn default() -> IonicSpec {
        IonicSpec {
            a: 0.1,
            k_w: 1.0,
            c1: 1.0,
            c2: 2.0,
            d: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StimulusSpec {
    Zero,
    /// Intracellular current of the given amplitude inside the box
    /// `[lo, hi]` during `[t_on, t_off]`.
    BoxPulse {
        amplitude: f64,
        lo: Vec<f64>,
        hi: Vec<f64>,
        t_on: f64,
        t_off: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldSpec {
    Constant(f64),
    /// base + amplitude * product of cos(pi s_a) over the marked axes, with
    /// s_a the coordinate rescaled to [0, 1].
    Cosine {
        base: f64,
        amplitude: f64,
        axes: Vec<bool>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSpec {
    Point,
    ZeroMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayFunction {
    /// f(x, y) = |x - y|
    AbsDiff,
    /// f(x, y) = x + y
    Additive,
    /// f(x, y) = 1
    Constant,
}

impl DecayFunction {
    pub fn name(self) -> &'static str {
        match self {
            DecayFunction::AbsDiff => "abs-diff",
            DecayFunction::Additive => "additive",
            DecayFunction::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalRefSpec {
    SelfConsistent,
    GatingClosedForm,
}

impl TemporalRefSpec {
    pub fn name(self) -> &'static str {
        match self {
            TemporalRefSpec::SelfConsistent => "self",
            TemporalRefSpec::GatingClosedForm => "gating-closed-form",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSection {
    pub dim: usize,
    pub domain: Vec<(f64, f64)>,
    pub cm: f64,
    pub conductivity: ConductivitySpec,
    pub ionic: IonicSpec,
    pub stimulus: StimulusSpec,
    pub v0: FieldSpec,
    pub w0: FieldSpec,
    pub t_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericsSection {
    /// Resolution level per axis (key `j`; a single entry applies to every
    /// axis).
    pub levels: Vec<usize>,
    pub dt: f64,
    pub gmres_tol: f64,
    pub gmres_restart: usize,
    pub gmres_max_iters: usize,
    pub anchor: AnchorSpec,
    pub anchor_index: usize,
    pub warm_start: bool,
    pub allow_large_j: bool,
    /// Step sizes compared by the error-table and temporal-order modes.
    pub dts: Option<Vec<f64>>,
    /// Reference step for error-table mode and self-consistent temporal
    /// sweeps.
    pub ref_dt: Option<f64>,
    /// Resolution level of the error-table reference run (defaults to `j`).
    pub ref_j: Option<usize>,
    /// Isotropic levels swept by grid-validation mode; the last entry is the
    /// reference.
    pub js: Option<Vec<usize>>,
    /// Finest wavelet level examined by coeff-decay mode.
    pub j_max: Option<usize>,
    /// Target function of coeff-decay mode.
    pub function: Option<DecayFunction>,
    pub temporal_reference: TemporalRefSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputsSection {
    pub snapshot_every: usize,
    pub probes: Vec<Vec<f64>>,
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Set by a top-level `mode` key; when present it must agree with the
    /// subcommand the tool was invoked with.
    pub mode: Option<Mode>,
    pub problem: ProblemSection,
    pub numerics: NumericsSection,
    pub outputs: OutputsSection,
}

/// Largest resolution level accepted per axis without `allow_large_j`.
pub fn guard_rail_limit(dim: usize) -> usize {
    match dim {
        1 => 7,
        2 => 5,
        _ => 3,
    }
}

struct Entry {
    line: usize,
    section: &'static str,
    key: String,
    value: String,
    used: bool,
}

const TOP_KEYS: &[&str] = &["mode"];
const PROBLEM_KEYS: &[&str] = &[
    "dim",
    "domain",
    "cm",
    "conductivity",
    "ionic",
    "ionic_a",
    "ionic_kw",
    "ionic_c1",
    "ionic_c2",
    "ionic_d",
    "stimulus",
    "v0",
    "w0",
    "t_final",
];
const NUMERICS_KEYS: &[&str] = &[
    "j",
    "dt",
    "gmres_tol",
    "gmres_restart",
    "gmres_max_iters",
    "anchor",
    "anchor_index",
    "warm_start",
    "allow_large_j",
    "dts",
    "ref_dt",
    "ref_j",
    "js",
    "j_max",
    "function",
    "temporal_reference",
];
const OUTPUTS_KEYS: &[&str] = &["snapshot_every", "probes", "out_dir"];

fn section_keys(section: &str) -> &'static [&'static str] {
    match section {
        "problem" => PROBLEM_KEYS,
        "numerics" => NUMERICS_KEYS,
        "outputs" => OUTPUTS_KEYS,
        _ => TOP_KEYS,
    }
}

fn section_display(section: &str) -> String {
    if section.is_empty() {
        "the top level".to_string()
    } else {
        format!("[{section}]")
    }
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    let mut section: &'static str = "";
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(ConfigError::BadLine {
                line,
                text: trimmed.to_string(),
            })?;
            section = match name {
                "problem" => "problem",
                "numerics" => "numerics",
                "outputs" => "outputs",
                _ => {
                    return Err(ConfigError::UnknownSection {
                        line,
                        name: name.to_string(),
                    })
                }
            };
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or(ConfigError::BadLine {
            line,
            text: trimmed.to_string(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !section_keys(section).contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                line,
                section: section_display(section),
                key,
            });
        }
        if let Some(dup) = entries
            .iter()
            .find(|e: &&Entry| e.section == section && e.key == key)
        {
            return Err(ConfigError::BadValue {
                line,
                key,
                reason: format!("duplicate key, first set on line {}", dup.line),
            });
        }
        entries.push(Entry {
            line,
            section,
            key,
            value,
            used: false,
        });
    }
    Ok(entries)
}

fn take<'a>(entries: &'a mut [Entry], section: &str, key: &str) -> Option<(&'a str, usize)> {
    let entry = entries
        .iter_mut()
        .find(|e| e.section == section && e.key == key)?;
    entry.used = true;
    Some((entry.value.as_str(), entry.line))
}

fn parse_f64(key: &str, line: usize, s: &str) -> Result<f64, ConfigError> {
    let v: f64 = s.trim().parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: format!("expected a number, got \"{s}\""),
    })?;
    if !v.is_finite() {
        return Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason: "expected a finite number".to_string(),
        });
    }
    Ok(v)
}

fn parse_positive_f64(key: &str, line: usize, s: &str) -> Result<f64, ConfigError> {
    let v = parse_f64(key, line, s)?;
    if v <= 0.0 {
        return Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason: format!("must be positive, got {v}"),
        });
    }
    Ok(v)
}

fn parse_usize(key: &str, line: usize, s: &str) -> Result<usize, ConfigError> {
    s.trim().parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: format!("expected a nonnegative integer, got \"{s}\""),
    })
}

fn parse_bool(key: &str, line: usize, s: &str) -> Result<bool, ConfigError> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason: format!("expected true or false, got \"{other}\""),
        }),
    }
}

fn parse_f64_list(key: &str, line: usize, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',').map(|p| parse_f64(key, line, p)).collect()
}

fn parse_usize_list(key: &str, line: usize, s: &str) -> Result<Vec<usize>, ConfigError> {
    s.split(',').map(|p| parse_usize(key, line, p)).collect()
}

fn broadcast<T: Clone>(
    key: &str,
    line: usize,
    list: Vec<T>,
    dim: usize,
) -> Result<Vec<T>, ConfigError> {
    if list.len() == dim {
        Ok(list)
    } else if list.len() == 1 {
        Ok(vec![list[0].clone(); dim])
    } else {
        Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason: format!("expected 1 or {dim} entries, got {}", list.len()),
        })
    }
}

fn parse_axes_mask(key: &str, line: usize, s: &str, dim: usize) -> Result<Vec<bool>, ConfigError> {
    let bad = |reason: String| ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason,
    };
    if s.len() != dim {
        return Err(bad(format!(
            "axes mask needs {dim} digits of 0 or 1, got \"{s}\""
        )));
    }
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(bad(format!(
                "axes mask needs digits of 0 or 1, got \"{s}\""
            ))),
        })
        .collect()
}

fn parse_field_spec(key: &str, line: usize, s: &str, dim: usize) -> Result<FieldSpec, ConfigError> {
    if let Some(rest) = s.strip_prefix("constant:") {
        return Ok(FieldSpec::Constant(parse_f64(key, line, rest)?));
    }
    if let Some(rest) = s.strip_prefix("cosine:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() < 2 || parts.len() > 2 + dim {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!(
                    "cosine takes <base>,<amplitude>[,<axes>], got \"{rest}\""
                ),
            });
        }
        let base = parse_f64(key, line, parts[0])?;
        let amplitude = parse_f64(key, line, parts[1])?;
        let axes = if parts.len() == 3 {
            parse_axes_mask(key, line, parts[2], dim)?
        } else {
            vec![true; dim]
        };
        return Ok(FieldSpec::Cosine {
            base,
            amplitude,
            axes,
        });
    }
    Err(ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: format!(
            "unknown field form \"{s}\", expected constant:<value> or cosine:<base>,<amplitude>[,<axes>]"
        ),
    })
}

fn parse_conductivity(
    key: &str,
    line: usize,
    s: &str,
    dim: usize,
) -> Result<ConductivitySpec, ConfigError> {
    if s == "example3-conductivity" {
        return Ok(ConductivitySpec::Example3);
    }
    if let Some(rest) = s.strip_prefix("constant:") {
        let parts: Vec<&str> = rest.split(';').collect();
        if parts.len() != 2 {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!(
                    "constant takes <intra>;<extra> per-axis lists, got \"{rest}\""
                ),
            });
        }
        let intra = broadcast(key, line, parse_f64_list(key, line, parts[0])?, dim)?;
        let extra = broadcast(key, line, parse_f64_list(key, line, parts[1])?, dim)?;
        for &v in intra.iter().chain(extra.iter()) {
            if v < 0.0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    reason: format!("conductivity entries must be nonnegative, got {v}"),
                });
            }
        }
        return Ok(ConductivitySpec::Constant { intra, extra });
    }
    Err(ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: format!(
            "unknown conductivity preset \"{s}\", expected example3-conductivity or constant:<intra>;<extra>"
        ),
    })
}

fn parse_stimulus(
    key: &str,
    line: usize,
    s: &str,
    dim: usize,
) -> Result<StimulusSpec, ConfigError> {
    if s == "zero" {
        return Ok(StimulusSpec::Zero);
    }
    if let Some(rest) = s.strip_prefix("box-pulse:") {
        let parts: Vec<&str> = rest.split(';').collect();
        if parts.len() != 5 {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!(
                    "box-pulse takes <amplitude>;<lo>;<hi>;<t_on>;<t_off>, got \"{rest}\""
                ),
            });
        }
        let amplitude = parse_f64(key, line, parts[0])?;
        let lo = broadcast(key, line, parse_f64_list(key, line, parts[1])?, dim)?;
        let hi = broadcast(key, line, parse_f64_list(key, line, parts[2])?, dim)?;
        let t_on = parse_f64(key, line, parts[3])?;
        let t_off = parse_f64(key, line, parts[4])?;
        if t_off < t_on {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!("pulse window ends before it starts: [{t_on}, {t_off}]"),
            });
        }
        return Ok(StimulusSpec::BoxPulse {
            amplitude,
            lo,
            hi,
            t_on,
            t_off,
        });
    }
    Err(ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: format!(
            "unknown stimulus preset \"{s}\", expected zero or box-pulse:<amplitude>;<lo>;<hi>;<t_on>;<t_off>"
        ),
    })
}

fn parse_domain(
    key: &str,
    line: usize,
    s: &str,
    dim: usize,
) -> Result<Vec<(f64, f64)>, ConfigError> {
    let mut pairs = Vec::new();
    for part in s.split(';') {
        let list = parse_f64_list(key, line, part)?;
        if list.len() != 2 {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!("each axis needs <lo>,<hi>, got \"{part}\""),
            });
        }
        if list[1] <= list[0] {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!("axis upper end must exceed the lower end, got {},{}", list[0], list[1]),
            });
        }
        pairs.push((list[0], list[1]));
    }
    broadcast(key, line, pairs, dim)
}

fn parse_probes(
    key: &str,
    line: usize,
    s: &str,
    dim: usize,
    domain: &[(f64, f64)],
) -> Result<Vec<Vec<f64>>, ConfigError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let mut points = Vec::new();
    for part in s.split(';') {
        let coords = parse_f64_list(key, line, part)?;
        if coords.len() != dim {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!("each probe needs {dim} coordinates, got \"{part}\""),
            });
        }
        for (axis, (&x, &(lo, hi))) in coords.iter().zip(domain.iter()).enumerate() {
            if x < lo || x > hi {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    reason: format!(
                        "coordinate {x} on axis {axis} falls outside the domain [{lo}, {hi}]"
                    ),
                });
            }
        }
        points.push(coords);
    }
    Ok(points)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries = tokenize(text)?;

    let mode = match take(&mut entries, "", "mode") {
        Some((value, line)) => Some(Mode::parse(value).ok_or_else(|| ConfigError::BadValue {
            line,
            key: "mode".to_string(),
            reason: format!(
                "expected simulate, error-table, grid-validation, temporal-order, or coeff-decay, got \"{value}\""
            ),
        })?),
        None => None,
    };

    let dim = match take(&mut entries, "problem", "dim") {
        Some((value, line)) => {
            let d = parse_usize("dim", line, value)?;
            if !(1..=3).contains(&d) {
                return Err(ConfigError::BadValue {
                    line,
                    key: "dim".to_string(),
                    reason: format!("must be 1, 2, or 3, got {d}"),
                });
            }
            d
        }
        None => 1,
    };

    let domain = match take(&mut entries, "problem", "domain") {
        Some((value, line)) => parse_domain("domain", line, value, dim)?,
        None => vec![(0.0, 1.0); dim],
    };

    let cm = match take(&mut entries, "problem", "cm") {
        Some((value, line)) => parse_positive_f64("cm", line, value)?,
        None => 1.0,
    };

    let conductivity = match take(&mut entries, "problem", "conductivity") {
        Some((value, line)) => parse_conductivity("conductivity", line, value, dim)?,
        None => ConductivitySpec::Constant {
            intra: vec![1.2e-3; dim],
            extra: vec![1.2e-3; dim],
        },
    };

    if let Some((value, line)) = take(&mut entries, "problem", "ionic") {
        if value != "fhn-cubic" {
            return Err(ConfigError::BadValue {
                line,
                key: "ionic".to_string(),
                reason: format!("unknown ionic preset \"{value}\", expected fhn-cubic"),
            });
        }
    }
    let mut ionic = IonicSpec::default();
    if let Some((value, line)) = take(&mut entries, "problem", "ionic_a") {
        ionic.a = parse_f64("ionic_a", line, value)?;
    }
    if let Some((value, line)) = take(&mut entries, "problem", "ionic_kw") {
        ionic.k_w = parse_f64("ionic_kw", line, value)?;
    }
    if let Some((value, line)) = take(&mut entries, "problem", "ionic_c1") {
        ionic.c1 = parse_f64("ionic_c1", line, value)?;
    }
    if let Some((value, line)) = take(&mut entries, "problem", "ionic_c2") {
        ionic.c2 = parse_positive_f64("ionic_c2", line, value)?;
    }
    if let Some((value, line)) = take(&mut entries, "problem", "ionic_d") {
        let d = parse_usize("ionic_d", line, value)?;
        if d == 0 {
            return Err(ConfigError::BadValue {
                line,
                key: "ionic_d".to_string(),
                reason: "needs at least one gating component".to_string(),
            });
        }
        ionic.d = d;
    }

    let stimulus = match take(&mut entries, "problem", "stimulus") {
        Some((value, line)) => parse_stimulus("stimulus", line, value, dim)?,
        None => StimulusSpec::Zero,
    };

    let v0 = match take(&mut entries, "problem", "v0") {
        Some((value, line)) => parse_field_spec("v0", line, value, dim)?,
        None => FieldSpec::Constant(0.2),
    };
    let w0 = match take(&mut entries, "problem", "w0") {
        Some((value, line)) => parse_field_spec("w0", line, value, dim)?,
        None => FieldSpec::Constant(0.2),
    };

    let (t_final_value, t_final_line) =
        take(&mut entries, "problem", "t_final").ok_or(ConfigError::MissingKey {
            section: "[problem]",
            key: "t_final",
        })?;
    let t_final = parse_positive_f64("t_final", t_final_line, t_final_value)?;

    let (j_value, j_line) = take(&mut entries, "numerics", "j").ok_or(ConfigError::MissingKey {
        section: "[numerics]",
        key: "j",
    })?;
    let levels = broadcast("j", j_line, parse_usize_list("j", j_line, j_value)?, dim)?;

    let (dt_value, dt_line) =
        take(&mut entries, "numerics", "dt").ok_or(ConfigError::MissingKey {
            section: "[numerics]",
            key: "dt",
        })?;
    let dt = parse_positive_f64("dt", dt_line, dt_value)?;

    let gmres_tol = match take(&mut entries, "numerics", "gmres_tol") {
        Some((value, line)) => parse_positive_f64("gmres_tol", line, value)?,
        None => 1e-10,
    };
    let gmres_restart = match take(&mut entries, "numerics", "gmres_restart") {
        Some((value, line)) => {
            let r = parse_usize("gmres_restart", line, value)?;
            if r == 0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: "gmres_restart".to_string(),
                    reason: "must be at least 1".to_string(),
                });
            }
            r
        }
        None => 50,
    };
    let gmres_max_iters = match take(&mut entries, "numerics", "gmres_max_iters") {
        Some((value, line)) => {
            let r = parse_usize("gmres_max_iters", line, value)?;
            if r == 0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: "gmres_max_iters".to_string(),
                    reason: "must be at least 1".to_string(),
                });
            }
            r
        }
        None => 500,
    };

    let anchor = match take(&mut entries, "numerics", "anchor") {
        Some((value, line)) => match value {
            "point" => AnchorSpec::Point,
            "zero-mean" => AnchorSpec::ZeroMean,
            other => {
                return Err(ConfigError::BadValue {
                    line,
                    key: "anchor".to_string(),
                    reason: format!("expected point or zero-mean, got \"{other}\""),
                })
            }
        },
        None => AnchorSpec::Point,
    };
    let anchor_index = match take(&mut entries, "numerics", "anchor_index") {
        Some((value, line)) => parse_usize("anchor_index", line, value)?,
        None => 0,
    };
    let warm_start = match take(&mut entries, "numerics", "warm_start") {
        Some((value, line)) => parse_bool("warm_start", line, value)?,
        None => true,
    };
    let allow_large_j = match take(&mut entries, "numerics", "allow_large_j") {
        Some((value, line)) => parse_bool("allow_large_j", line, value)?,
        None => false,
    };

    let dts = match take(&mut entries, "numerics", "dts") {
        Some((value, line)) => {
            let list: Result<Vec<f64>, ConfigError> = value
                .split(',')
                .map(|p| parse_positive_f64("dts", line, p))
                .collect();
            Some(list?)
        }
        None => None,
    };
    let ref_dt = match take(&mut entries, "numerics", "ref_dt") {
        Some((value, line)) => Some(parse_positive_f64("ref_dt", line, value)?),
        None => None,
    };
    let ref_j = match take(&mut entries, "numerics", "ref_j") {
        Some((value, line)) => Some(parse_usize("ref_j", line, value)?),
        None => None,
    };
    let js = match take(&mut entries, "numerics", "js") {
        Some((value, line)) => Some(parse_usize_list("js", line, value)?),
        None => None,
    };
    let j_max = match take(&mut entries, "numerics", "j_max") {
        Some((value, line)) => {
            let j = parse_usize("j_max", line, value)?;
            if j > 10 {
                return Err(ConfigError::BadValue {
                    line,
                    key: "j_max".to_string(),
                    reason: format!("levels above 10 are not tabulated, got {j}"),
                });
            }
            Some(j)
        }
        None => None,
    };
    let function = match take(&mut entries, "numerics", "function") {
        Some((value, line)) => Some(match value {
            "abs-diff" => DecayFunction::AbsDiff,
            "additive" => DecayFunction::Additive,
            "constant" => DecayFunction::Constant,
            other => {
                return Err(ConfigError::BadValue {
                    line,
                    key: "function".to_string(),
                    reason: format!("expected abs-diff, additive, or constant, got \"{other}\""),
                })
            }
        }),
        None => None,
    };
    let temporal_reference = match take(&mut entries, "numerics", "temporal_reference") {
        Some((value, line)) => match value {
            "self" => TemporalRefSpec::SelfConsistent,
            "gating-closed-form" => TemporalRefSpec::GatingClosedForm,
            other => {
                return Err(ConfigError::BadValue {
                    line,
                    key: "temporal_reference".to_string(),
                    reason: format!("expected self or gating-closed-form, got \"{other}\""),
                })
            }
        },
        None => TemporalRefSpec::SelfConsistent,
    };

    let snapshot_every = match take(&mut entries, "outputs", "snapshot_every") {
        Some((value, line)) => parse_usize("snapshot_every", line, value)?,
        None => 0,
    };
    let probes = match take(&mut entries, "outputs", "probes") {
        Some((value, line)) => parse_probes("probes", line, value, dim, &domain)?,
        None if dim == 1 => {
            let (lo, hi) = domain[0];
            TABLE_PROBES_1D
                .iter()
                .map(|&s| vec![lo + (hi - lo) * s])
                .collect()
        }
        None => Vec::new(),
    };
    let out_dir = take(&mut entries, "outputs", "out_dir").map(|(value, _)| value.to_string());

    debug_assert!(entries.iter().all(|e| e.used));

    Ok(RunConfig {
        mode,
        problem: ProblemSection {
            dim,
            domain,
            cm,
            conductivity,
            ionic,
            stimulus,
            v0,
            w0,
            t_final,
        },
        numerics: NumericsSection {
            levels,
            dt,
            gmres_tol,
            gmres_restart,
            gmres_max_iters,
            anchor,
            anchor_index,
            warm_start,
            allow_large_j,
            dts,
            ref_dt,
            ref_j,
            js,
            j_max,
            function,
            temporal_reference,
        },
        outputs: OutputsSection {
            snapshot_every,
            probes,
            out_dir,
        },
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn fmt_f64_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
}

fn fmt_usize_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_axes(axes: &[bool]) -> String {
    axes.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn fmt_field(f: &FieldSpec) -> String {
    match f {
        FieldSpec::Constant(v) => format!("constant:{}", fmt_f64(*v)),
        FieldSpec::Cosine {
            base,
            amplitude,
            axes,
        } => format!(
            "cosine:{},{},{}",
            fmt_f64(*base),
            fmt_f64(*amplitude),
            fmt_axes(axes)
        ),
    }
}

/// Canonical text form of a config; `parse_config` maps it back to an equal
/// value.
pub fn emit_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    if let Some(mode) = cfg.mode {
        let _ = writeln!(out, "mode = {}", mode.name());
        out.push('\n');
    }

    let p = &cfg.problem;
    let _ = writeln!(out, "[problem]");
    let _ = writeln!(out, "dim = {}", p.dim);
    let domain = p
        .domain
        .iter()
        .map(|&(lo, hi)| format!("{},{}", fmt_f64(lo), fmt_f64(hi)))
        .collect::<Vec<_>>()
        .join(";");
    let _ = writeln!(out, "domain = {domain}");
    let _ = writeln!(out, "cm = {}", fmt_f64(p.cm));
    let conductivity = match &p.conductivity {
        ConductivitySpec::Example3 => "example3-conductivity".to_string(),
        ConductivitySpec::Constant { intra, extra } => {
            format!("constant:{};{}", fmt_f64_list(intra), fmt_f64_list(extra))
        }
    };
    let _ = writeln!(out, "conductivity = {conductivity}");
    let _ = writeln!(out, "ionic = fhn-cubic");
    let _ = writeln!(out, "ionic_a = {}", fmt_f64(p.ionic.a));
    let _ = writeln!(out, "ionic_kw = {}", fmt_f64(p.ionic.k_w));
    let _ = writeln!(out, "ionic_c1 = {}", fmt_f64(p.ionic.c1));
    let _ = writeln!(out, "ionic_c2 = {}", fmt_f64(p.ionic.c2));
    let _ = writeln!(out, "ionic_d = {}", p.ionic.d);
    let stimulus = match &p.stimulus {
        StimulusSpec::Zero => "zero".to_string(),
        StimulusSpec::BoxPulse {
            amplitude,
            lo,
            hi,
            t_on,
            t_off,
        } => format!(
            "box-pulse:{};{};{};{};{}",
            fmt_f64(*amplitude),
            fmt_f64_list(lo),
            fmt_f64_list(hi),
            fmt_f64(*t_on),
            fmt_f64(*t_off)
        ),
    };
    let _ = writeln!(out, "stimulus = {stimulus}");
    let _ = writeln!(out, "v0 = {}", fmt_field(&p.v0));
    let _ = writeln!(out, "w0 = {}", fmt_field(&p.w0));
    let _ = writeln!(out, "t_final = {}", fmt_f64(p.t_final));
    out.push('\n');

    let n = &cfg.numerics;
    let _ = writeln!(out, "[numerics]");
    let _ = writeln!(out, "j = {}", fmt_usize_list(&n.levels));
    let _ = writeln!(out, "dt = {}", fmt_f64(n.dt));
    let _ = writeln!(out, "gmres_tol = {}", fmt_f64(n.gmres_tol));
    let _ = writeln!(out, "gmres_restart = {}", n.gmres_restart);
    let _ = writeln!(out, "gmres_max_iters = {}", n.gmres_max_iters);
    let anchor = match n.anchor {
        AnchorSpec::Point => "point",
        AnchorSpec::ZeroMean => "zero-mean",
    };
    let _ = writeln!(out, "anchor = {anchor}");
    let _ = writeln!(out, "anchor_index = {}", n.anchor_index);
    let _ = writeln!(out, "warm_start = {}", n.warm_start);
    let _ = writeln!(out, "allow_large_j = {}", n.allow_large_j);
    if let Some(dts) = &n.dts {
        let _ = writeln!(out, "dts = {}", fmt_f64_list(dts));
    }
    if let Some(ref_dt) = n.ref_dt {
        let _ = writeln!(out, "ref_dt = {}", fmt_f64(ref_dt));
    }
    if let Some(ref_j) = n.ref_j {
        let _ = writeln!(out, "ref_j = {ref_j}");
    }
    if let Some(js) = &n.js {
        let _ = writeln!(out, "js = {}", fmt_usize_list(js));
    }
    if let Some(j_max) = n.j_max {
        let _ = writeln!(out, "j_max = {j_max}");
    }
    if let Some(function) = n.function {
        let _ = writeln!(out, "function = {}", function.name());
    }
    let _ = writeln!(out, "temporal_reference = {}", n.temporal_reference.name());
    out.push('\n');

    let o = &cfg.outputs;
    let _ = writeln!(out, "[outputs]");
    let _ = writeln!(out, "snapshot_every = {}", o.snapshot_every);
    let probes = o
        .probes
        .iter()
        .map(|p| fmt_f64_list(p))
        .collect::<Vec<_>>()
        .join(";");
    let _ = writeln!(out, "probes = {probes}");
    if let Some(dir) = &o.out_dir {
        let _ = writeln!(out, "out_dir = {dir}");
    }
    out
}

/// Rejects run levels above the per-dimension guard rail unless the override
/// flag is set; with the override, returns the warning to print.
pub fn check_guard_rails(cfg: &RunConfig) -> Result<Option<String>, ConfigError> {
    let dim = cfg.problem.dim;
    let limit = guard_rail_limit(dim);
    let mut max_j = *cfg.numerics.levels.iter().max().expect("levels nonempty");
    if let Some(js) = &cfg.numerics.js {
        for &j in js {
            max_j = max_j.max(j);
        }
    }
    if let Some(ref_j) = cfg.numerics.ref_j {
        max_j = max_j.max(ref_j);
    }
    if max_j <= limit {
        return Ok(None);
    }
    if cfg.numerics.allow_large_j {
        Ok(Some(format!(
            "warning: level {max_j} exceeds the usual {dim}D limit of {limit}; expect a large dense factorization"
        )))
    } else {
        Err(ConfigError::Invalid(format!(
            "level {max_j} exceeds the {dim}D guard rail of {limit}; set allow_large_j = true to override"
        )))
    }
}

/// Human-oriented listing of the presets and named modes the config format
/// accepts.
pub fn describe_presets() -> String {
    let mut out = String::new();
    let _ = writeln!(out, "conductivity presets");
    let _ = writeln!(
        out,
        "  example3-conductivity      constant anisotropic diagonal, identical in both"
    );
    let _ = writeln!(
        out,
        "                             compartments: d11 = 1.2e-3 along the first axis,"
    );
    let _ = writeln!(
        out,
        "                             d22 = d33 = 2.5562e-4 along the remaining axes"
    );
    let _ = writeln!(
        out,
        "  constant:<intra>;<extra>   per-axis constant diagonals, comma-separated"
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "ionic presets");
    let _ = writeln!(
        out,
        "  fhn-cubic                  cubic excitation f(v,w) = v(v-a)(1-v) - kw*w with"
    );
    let _ = writeln!(
        out,
        "                             a = 0.1, kw = 1, and linear recovery g(v,w) ="
    );
    let _ = writeln!(
        out,
        "                             c1*v - c2*w with c1 = 1, c2 = 2, d = 1 component;"
    );
    let _ = writeln!(
        out,
        "                             override via ionic_a, ionic_kw, ionic_c1, ionic_c2, ionic_d"
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "stimulus presets");
    let _ = writeln!(out, "  zero                       no applied current");
    let _ = writeln!(
        out,
        "  box-pulse:<amplitude>;<lo>;<hi>;<t_on>;<t_off>"
    );
    let _ = writeln!(
        out,
        "                             intracellular current inside the box during the window"
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "initial fields (v0, w0)");
    let _ = writeln!(out, "  constant:<value>");
    let _ = writeln!(
        out,
        "  cosine:<base>,<amplitude>[,<axes>]"
    );
    let _ = writeln!(
        out,
        "                             base + amplitude * product of cos(pi s) over the"
    );
    let _ = writeln!(
        out,
        "                             marked axes (axes as 0/1 digits, default all)"
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "anchor modes");
    let _ = writeln!(
        out,
        "  point                      u_e fixed to zero at collocation point anchor_index"
    );
    let _ = writeln!(
        out,
        "  zero-mean                  u_e fixed to zero average over the collocation points"
    );
    out
}
