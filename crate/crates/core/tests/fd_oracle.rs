//! Cross-validation of the wavelet stepper against an independent
//! finite-difference solver: explicit in time, conservative face-flux
//! divergence on the same midpoint grid, zero-flux boundary faces, and an
//! anchored dense elliptic solve for the extracellular potential.

use haarcol::bidomain_model::{
    AxisProfile, BidomainProblem, ConductivityField, InitialField, IonicModel, SeparableField,
    Stimulus,
};
use haarcol::collocation_stepper::{Stepper, SteppingConfig};
use haarcol::dense::{LuFactors, Matrix, DEFAULT_PIVOT_FLOOR};

struct FdSolution {
    y: Vec<f64>,
    v: Vec<f64>,
    ue: Vec<f64>,
}

fn div_flux(d_face: &[f64], u: &[f64], dx: f64, out: &mut [f64]) {
    let nx = u.len();
    let mut flux = vec![0.0; nx + 1];
    for f in 1..nx {
        flux[f] = d_face[f] * (u[f] - u[f - 1]) / dx;
    }
    for p in 0..nx {
        out[p] = (flux[p + 1] - flux[p]) / dx;
    }
}

fn run_fd(
    nx: usize,
    dt: f64,
    t_final: f64,
    d_intra: &dyn Fn(f64) -> f64,
    d_extra: &dyn Fn(f64) -> f64,
    v0: &dyn Fn(f64) -> f64,
) -> FdSolution {
    let model = IonicModel::cubic_default();
    let dx = 1.0 / nx as f64;
    let y: Vec<f64> = (0..nx).map(|p| (p as f64 + 0.5) * dx).collect();
    let mut v: Vec<f64> = y.iter().map(|&x| v0(x)).collect();
    let mut w = vec![0.2; nx];
    let di_face: Vec<f64> = (0..=nx).map(|f| d_intra(f as f64 * dx)).collect();
    let de_face: Vec<f64> = (0..=nx).map(|f| d_extra(f as f64 * dx)).collect();
    let sum_face: Vec<f64> = di_face.iter().zip(&de_face).map(|(a, b)| a + b).collect();

    let mut a = Matrix::zeros(nx, nx);
    let mut e = vec![0.0; nx];
    let mut col = vec![0.0; nx];
    for k in 0..nx {
        e[k] = 1.0;
        div_flux(&sum_face, &e, dx, &mut col);
        for p in 0..nx {
            a.data[p * nx + k] = -col[p];
        }
        e[k] = 0.0;
    }
    for k in 0..nx {
        a.data[k] = 0.0;
    }
    a.data[0] = 1.0;
    let lu = LuFactors::factor(a, DEFAULT_PIVOT_FLOOR);

    let steps = (t_final / dt).round() as usize;
    let mut rhs = vec![0.0; nx];
    let mut dpot = vec![0.0; nx];
    let mut ue = vec![0.0; nx];
    for _ in 0..steps {
        for p in 0..nx {
            w[p] += dt * (model.c1 * v[p] - model.c2 * w[p]);
        }
        div_flux(&di_face, &v, dx, &mut rhs);
        rhs[0] = 0.0;
        ue = lu.solve(&rhs);
        div_flux(&de_face, &ue, dx, &mut dpot);
        for p in 0..nx {
            let f = v[p] * (v[p] - model.a) * (1.0 - v[p]) - model.k_w * w[p];
            v[p] += dt * (-dpot[p] - f);
        }
    }
    FdSolution { y, v, ue }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&p| p < x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}

#[test]
fn degenerate_conductivity_matches_the_difference_oracle() {
    let scale = 4.0 * 1.2e-3;
    let profile = SeparableField {
        factors: vec![AxisProfile::Polynomial(vec![0.0, scale, -scale])],
    };
    let domain = vec![(0.0, 1.0)];
    let conductivity = ConductivityField::new(
        domain.clone(),
        vec![profile.clone()],
        vec![profile.clone()],
    )
    .unwrap();
    let problem = BidomainProblem::new(
        domain,
        1.0,
        conductivity,
        IonicModel::cubic_default(),
        Stimulus::zero(),
        InitialField::CosineProduct {
            base: 0.2,
            amplitude: 0.05,
            axes: vec![true],
        },
        InitialField::Constant(0.2),
        0.5,
    )
    .unwrap();
    let cfg = SteppingConfig {
        dt: 1e-3,
        ..SteppingConfig::default()
    };
    let mut stepper = Stepper::new(&problem, &[4], &cfg).unwrap();
    let trajectory = stepper.run(0).unwrap();
    assert!(trajectory.stats.all_converged);
    let haar = trajectory.final_state();

    let d = |x: f64| scale * x * (1.0 - x);
    let v0 = |x: f64| 0.2 + 0.05 * (std::f64::consts::PI * x).cos();
    let fd = run_fd(512, 1e-4, 0.5, &d, &d, &v0);
    let ue_shift = interp(&fd.y, &fd.ue, stepper.axis_grid(0)[0]);

    let mut max_dv = 0.0f64;
    let mut max_due = 0.0f64;
    let mut max_ue = 0.0f64;
    for (k, &x) in stepper.axis_grid(0).iter().enumerate() {
        max_dv = max_dv.max((haar.v[k] - interp(&fd.y, &fd.v, x)).abs());
        max_due = max_due.max((haar.ue[k] - (interp(&fd.y, &fd.ue, x) - ue_shift)).abs());
        max_ue = max_ue.max(haar.ue[k].abs());
    }
    assert!(max_ue > 1e-2, "extracellular field too small: {max_ue}");
    assert!(max_dv <= 1e-4, "v mismatch {max_dv}");
    assert!(max_due <= 1e-4, "ue mismatch {max_due}");
}

#[test]
fn uniform_initial_data_matches_the_oracle_and_grows_monotonically() {
    let problem = BidomainProblem::baseline(1, 0.5).unwrap();
    let cfg = SteppingConfig {
        dt: 1e-3,
        ..SteppingConfig::default()
    };
    let mut stepper = Stepper::new(&problem, &[5], &cfg).unwrap();
    let trajectory = stepper.run(50).unwrap();
    assert!(trajectory.stats.all_converged);

    let means: Vec<f64> = trajectory
        .snapshots
        .iter()
        .map(|s| s.v.iter().sum::<f64>() / s.v.len() as f64)
        .collect();
    for pair in means.windows(2) {
        assert!(pair[1] > pair[0], "mean v not increasing: {means:?}");
    }
    let final_state = trajectory.final_state();
    let final_mean = *means.last().unwrap();
    assert!(final_mean > 0.25 && final_mean < 0.45, "final mean {final_mean}");

    let d = |_: f64| 1.2e-3;
    let v0 = |_: f64| 0.2;
    let fd = run_fd(64, 1e-3, 0.5, &d, &d, &v0);
    for (k, &x) in stepper.axis_grid(0).iter().enumerate() {
        let dv = (final_state.v[k] - interp(&fd.y, &fd.v, x)).abs();
        assert!(dv <= 5e-3, "v mismatch {dv} at {x}");
        assert!(final_state.ue[k].abs() <= 1e-10);
    }
}
