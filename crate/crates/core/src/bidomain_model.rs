//! Problem definition for the coupled parabolic-elliptic system: axis-aligned
//! conductivity fields (zeros allowed), cubic ionic kinetics with linear
//! gating, applied currents, membrane capacitance, and initial data.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension {0} not supported (expected 1, 2, or 3)")]
    Dimension(usize),
    #[error("axis {axis} domain ends not increasing: [{a}, {b}]")]
    EmptyDomain { axis: usize, a: f64, b: f64 },
    #[error("point coordinate {x} outside [{a}, {b}] on axis {axis}")]
    OutsideDomain { axis: usize, x: f64, a: f64, b: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{which} conductivity on axis {axis} is negative ({value:.3e}) near coordinate {at}")]
    NegativeConductivity {
        which: &'static str,
        axis: usize,
        at: f64,
        value: f64,
    },
    #[error("field shape mismatch: {0}")]
    Shape(String),
}

/// Scalar profile along one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum AxisProfile {
    Constant(f64),
    /// Polynomial coefficients in ascending powers of the coordinate.
    Polynomial(Vec<f64>),
    /// Values on a uniform grid along the coordinate; evaluation interpolates
    /// linearly and the derivative is a centered difference of the samples.
    Tabulated {
        origin: f64,
        spacing: f64,
        values: Vec<f64>,
    },
}

impl AxisProfile {
    fn value(&self, x: f64) -> f64 {
        match self {
            AxisProfile::Constant(c) => *c,
            AxisProfile::Polynomial(coeffs) => {
                coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
            }
            AxisProfile::Tabulated {
                origin,
                spacing,
                values,
            } => {
                let last = values.len() - 1;
                let s = ((x - origin) / spacing).clamp(0.0, last as f64);
                let k = (s.floor() as usize).min(last.saturating_sub(1));
                if values.len() == 1 {
                    return values[0];
                }
                let frac = s - k as f64;
                values[k] * (1.0 - frac) + values[k + 1] * frac
            }
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match self {
            AxisProfile::Constant(_) => 0.0,
            AxisProfile::Polynomial(coeffs) => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (p, &c)| acc * x + p as f64 * c),
            AxisProfile::Tabulated {
                origin,
                spacing,
                values,
            } => {
                if values.len() < 2 {
                    return 0.0;
                }
                let last = values.len() - 1;
                let k = (((x - origin) / spacing).round() as isize).clamp(0, last as isize) as usize;
                if k == 0 {
                    (values[1] - values[0]) / spacing
                } else if k == last {
                    (values[last] - values[last - 1]) / spacing
                } else {
                    (values[k + 1] - values[k - 1]) / (2.0 * spacing)
                }
            }
        }
    }
}

/// One compartment's conductivity along one principal axis, as a product of
/// per-coordinate profiles so separable fields like p(x)q(y) are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableField {
    pub factors: Vec<AxisProfile>,
}

impl SeparableField {
    pub fn constant(dim: usize, value: f64) -> SeparableField {
        let mut factors = vec![AxisProfile::Constant(1.0); dim];
        factors[0] = AxisProfile::Constant(value);
        SeparableField { factors }
    }

    fn value(&self, point: &[f64]) -> f64 {
        self.factors
            .iter()
            .zip(point)
            .map(|(f, &x)| f.value(x))
            .product()
    }

    fn derivative_along(&self, axis: usize, point: &[f64]) -> f64 {
        let mut acc = self.factors[axis].derivative(point[axis]);
        for (b, (f, &x)) in self.factors.iter().zip(point).enumerate() {
            if b != axis {
                acc *= f.value(x);
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compartment {
    Intra,
    Extra,
}

/// Axis-aligned diagonal conductivities for both compartments. Entry `a` of
/// each list is the coefficient multiplying the second derivative along axis
/// `a`; degenerate (zero) regions are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    pub domain: Vec<(f64, f64)>,
    pub intra: Vec<SeparableField>,
    pub extra: Vec<SeparableField>,
}

const VALIDATION_SAMPLES: usize = 33;

impl ConductivityField {
    pub fn new(
        domain: Vec<(f64, f64)>,
        intra: Vec<SeparableField>,
        extra: Vec<SeparableField>,
    ) -> Result<ConductivityField, ModelError> {
        let dim = domain.len();
        check_domain(&domain)?;
        for (name, list) in [("intracellular", &intra), ("extracellular", &extra)] {
            if list.len() != dim {
                return Err(ModelError::Shape(format!(
                    "{name} conductivity needs {dim} axis entries, got {}",
                    list.len()
                )));
            }
            for field in list.iter() {
                if field.factors.len() != dim {
                    return Err(ModelError::Shape(format!(
                        "{name} conductivity factor list needs {dim} entries, got {}",
                        field.factors.len()
                    )));
                }
            }
        }
        let field = ConductivityField {
            domain,
            intra,
            extra,
        };
        field.check_nonnegative("intracellular", &field.intra)?;
        field.check_nonnegative("extracellular", &field.extra)?;
        Ok(field)
    }

    fn check_nonnegative(
        &self,
        which: &'static str,
        list: &[SeparableField],
    ) -> Result<(), ModelError> {
        for (axis, field) in list.iter().enumerate() {
            for (b, factor) in field.factors.iter().enumerate() {
                let (a, bb) = self.domain[b];
                let mut best = (0.0f64, a);
                for s in 0..VALIDATION_SAMPLES {
                    let x = a + (bb - a) * s as f64 / (VALIDATION_SAMPLES - 1) as f64;
                    let v = factor.value(x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
                if best.0 < 0.0 {
                    return Err(ModelError::NegativeConductivity {
                        which,
                        axis,
                        at: best.1,
                        value: best.0,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn constant(
        domain: Vec<(f64, f64)>,
        intra: &[f64],
        extra: &[f64],
    ) -> Result<ConductivityField, ModelError> {
        let dim = domain.len();
        let build = |vals: &[f64]| -> Vec<SeparableField> {
            vals.iter()
                .map(|&v| SeparableField::constant(dim, v))
                .collect()
        };
        ConductivityField::new(domain, build(intra), build(extra))
    }

    /// Constant anisotropic preset: 1.2e-3 along the first axis and
    /// 2.5562e-4 along the remaining axes, identical in both compartments.
    pub fn anisotropic_cardiac(domain: Vec<(f64, f64)>) -> Result<ConductivityField, ModelError> {
        let dim = domain.len();
        let values: Vec<f64> = (0..dim)
            .map(|a| if a == 0 { 1.2e-3 } else { 2.5562e-4 })
            .collect();
        ConductivityField::constant(domain, &values, &values)
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }
}

fn check_domain(domain: &[(f64, f64)]) -> Result<(), ModelError> {
    if domain.is_empty() || domain.len() > 3 {
        return Err(ModelError::Dimension(domain.len()));
    }
    for (axis, &(a, b)) in domain.iter().enumerate() {
        if !(b > a) {
            return Err(ModelError::EmptyDomain { axis, a, b });
        }
    }
    Ok(())
}

fn check_point(domain: &[(f64, f64)], point: &[f64]) -> Result<(), ModelError> {
    if point.len() != domain.len() {
        return Err(ModelError::Shape(format!(
            "point has {} coordinates, domain has {}",
            point.len(),
            domain.len()
        )));
    }
    for (axis, (&x, &(a, b))) in point.iter().zip(domain).enumerate() {
        if x < a || x > b {
            return Err(ModelError::OutsideDomain { axis, x, a, b });
        }
    }
    Ok(())
}

/// Conductivity of the chosen compartment along `axis` at `point`, together
/// with its derivative along that same axis.
pub fn conductivity_at(
    c: &ConductivityField,
    axis: usize,
    which: Compartment,
    point: &[f64],
) -> Result<(f64, f64), ModelError> {
    check_point(&c.domain, point)?;
    if axis >= c.dim() {
        return Err(ModelError::Shape(format!(
            "axis {axis} out of range for dimension {}",
            c.dim()
        )));
    }
    let field = match which {
        Compartment::Intra => &c.intra[axis],
        Compartment::Extra => &c.extra[axis],
    };
    Ok((field.value(point), field.derivative_along(axis, point)))
}

/// Cubic excitation current with `d` linear gating components. The current
/// is f(v, w) = v(v - a)(1 - v) - k_w * (w_1 + ... + w_d) and each gating
/// component evolves by g(v, w_k) = c1 * v - c2 * w_k.
#[derive(Debug, Clone, PartialEq)]
pub struct IonicModel {
    pub a: f64,
    pub k_w: f64,
    pub c1: f64,
    pub c2: f64,
    pub d: usize,
}

impl IonicModel {
    pub fn cubic_default() -> IonicModel {
        IonicModel {
            a: 0.1,
            k_w: 1.0,
            c1: 1.0,
            c2: 2.0,
            d: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 {
            return Err(ModelError::Shape(
                "ionic model needs at least one gating component".into(),
            ));
        }
        Ok(())
    }
}

/// f(v, w) with `w_sum` the sum of the gating components.
pub fn ionic_current(m: &IonicModel, v: f64, w_sum: f64) -> f64 {
    v * (v - m.a) * (1.0 - v) - m.k_w * w_sum
}

/// Rate of one gating component.
pub fn gating_rate(m: &IonicModel, v: f64, w: f64) -> f64 {
    m.c1 * v - m.c2 * w
}

#[derive(Debug, Clone, PartialEq)]
pub enum StimulusProfile {
    Zero,
    Constant(f64),
    BoxPulse {
        amplitude: f64,
        lo: Vec<f64>,
        hi: Vec<f64>,
        t_on: f64,
        t_off: f64,
    },
}

impl StimulusProfile {
    pub fn eval(&self, point: &[f64], t: f64) -> f64 {
        match self {
            StimulusProfile::Zero => 0.0,
            StimulusProfile::Constant(c) => *c,
            StimulusProfile::BoxPulse {
                amplitude,
                lo,
                hi,
                t_on,
                t_off,
            } => {
                let inside_space = point
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(&x, (&l, &h))| x >= l && x <= h);
                if inside_space && t >= *t_on && t <= *t_off {
                    *amplitude
                } else {
                    0.0
                }
            }
        }
    }
}

/// Applied currents: `intra` enters the excitation equation, `extra` enters
/// the balance equation through the difference of the two.
#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    pub intra: StimulusProfile,
    pub extra: StimulusProfile,
}

impl Stimulus {
    pub fn zero() -> Stimulus {
        Stimulus {
            intra: StimulusProfile::Zero,
            extra: StimulusProfile::Zero,
        }
    }

    pub fn i1_at(&self, point: &[f64], t: f64) -> f64 {
        self.intra.eval(point, t)
    }

    pub fn i2_at(&self, point: &[f64], t: f64) -> f64 {
        self.extra.eval(point, t)
    }
}

/// Initial data for v or the gating components.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialField {
    Constant(f64),
    /// base + amplitude * product over marked axes of cos(pi * s_a) where
    /// s_a is the coordinate rescaled to [0, 1]; compatible with zero-flux
    /// boundaries on every axis.
    CosineProduct {
        base: f64,
        amplitude: f64,
        axes: Vec<bool>,
    },
}

impl InitialField {
    pub fn eval(&self, point: &[f64], domain: &[(f64, f64)]) -> f64 {
        match self {
            InitialField::Constant(c) => *c,
            InitialField::CosineProduct {
                base,
                amplitude,
                axes,
            } => {
                let mut prod = 1.0;
                for (a, (&x, &(lo, hi))) in point.iter().zip(domain).enumerate() {
                    if axes.get(a).copied().unwrap_or(false) {
                        let s = (x - lo) / (hi - lo);
                        prod *= (std::f64::consts::PI * s).cos();
                    }
                }
                base + amplitude * prod
            }
        }
    }

    /// First derivative along `axis`, analytic.
    pub fn derivative(&self, axis: usize, point: &[f64], domain: &[(f64, f64)]) -> f64 {
        match self {
            InitialField::Constant(_) => 0.0,
            InitialField::CosineProduct {
                amplitude, axes, ..
            } => {
                if !axes.get(axis).copied().unwrap_or(false) {
                    return 0.0;
                }
                let mut prod = *amplitude;
                for (a, (&x, &(lo, hi))) in point.iter().zip(domain).enumerate() {
                    if !axes.get(a).copied().unwrap_or(false) {
                        continue;
                    }
                    let len = hi - lo;
                    let arg = std::f64::consts::PI * (x - lo) / len;
                    if a == axis {
                        prod *= -(std::f64::consts::PI / len) * arg.sin();
                    } else {
                        prod *= arg.cos();
                    }
                }
                prod
            }
        }
    }

    /// Second derivative along `axis`, analytic.
    pub fn second_derivative(&self, axis: usize, point: &[f64], domain: &[(f64, f64)]) -> f64 {
        match self {
            InitialField::Constant(_) => 0.0,
            InitialField::CosineProduct {
                amplitude, axes, ..
            } => {
                if !axes.get(axis).copied().unwrap_or(false) {
                    return 0.0;
                }
                let mut prod = *amplitude;
                for (a, (&x, &(lo, hi))) in point.iter().zip(domain).enumerate() {
                    if !axes.get(a).copied().unwrap_or(false) {
                        continue;
                    }
                    let len = hi - lo;
                    let arg = std::f64::consts::PI * (x - lo) / len;
                    prod *= arg.cos();
                    if a == axis {
                        let scale = std::f64::consts::PI / len;
                        prod *= -scale * scale;
                    }
                }
                prod
            }
        }
    }
}

/// Full problem statement handed to the stepper.
#[derive(Debug, Clone, PartialEq)]
pub struct BidomainProblem {
    pub dim: usize,
    pub domain: Vec<(f64, f64)>,
    pub c_m: f64,
    pub conductivity: ConductivityField,
    pub ionic: IonicModel,
    pub stimulus: Stimulus,
    pub v0: InitialField,
    pub w0: InitialField,
    pub t_final: f64,
}

impl BidomainProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        domain: Vec<(f64, f64)>,
        c_m: f64,
        conductivity: ConductivityField,
        ionic: IonicModel,
        stimulus: Stimulus,
        v0: InitialField,
        w0: InitialField,
        t_final: f64,
    ) -> Result<BidomainProblem, ModelError> {
        check_domain(&domain)?;
        if conductivity.domain != domain {
            return Err(ModelError::Shape(
                "conductivity field domain differs from problem domain".into(),
            ));
        }
        if !(c_m > 0.0) {
            return Err(ModelError::NonPositive {
                name: "membrane capacitance",
                value: c_m,
            });
        }
        if !(t_final > 0.0) {
            return Err(ModelError::NonPositive {
                name: "final time",
                value: t_final,
            });
        }
        ionic.validate()?;
        Ok(BidomainProblem {
            dim: domain.len(),
            domain,
            c_m,
            conductivity,
            ionic,
            stimulus,
            v0,
            w0,
            t_final,
        })
    }

    /// Baseline closure on the unit box: constant conductivity 1.2e-3 in
    /// both compartments, cubic kinetics, zero stimulus, v0 = w0 = 0.2.
    pub fn baseline(dim: usize, t_final: f64) -> Result<BidomainProblem, ModelError> {
        if !(1..=3).contains(&dim) {
            return Err(ModelError::Dimension(dim));
        }
        let domain = vec![(0.0, 1.0); dim];
        let values = vec![1.2e-3; dim];
        let conductivity = ConductivityField::constant(domain.clone(), &values, &values)?;
        BidomainProblem::new(
            domain,
            1.0,
            conductivity,
            IonicModel::cubic_default(),
            Stimulus::zero(),
            InitialField::Constant(0.2),
            InitialField::Constant(0.2),
            t_final,
        )
    }
}
