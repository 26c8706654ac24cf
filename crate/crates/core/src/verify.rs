//! The verification workflow behind `curvtomo verify`: energy conservation,
//! the phase-volume/boundary identity, convexity and non-trapping
//! diagnostics, and the adjoint identity, each with a pinned threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary::{santalo_check_many, BoundarySinogram, DomainTag};
use crate::config::ExperimentConfig;
use crate::diagnostics::{check_nontrapping, check_strict_convexity, energy_drift_sweep};
use crate::error::Result;
use crate::grid::GridImage;
use crate::ray::build_ray_operator;


pub const ENERGY_DRIFT_TOL: f64 = 1e-8;
pub const ENERGY_ORDER_MIN_RATIO: f64 = 8.0;
pub const SANTALO_TOL: f64 = 1e-3;
pub const ADJOINT_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    /// Measured value (smaller is better unless stated otherwise).
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, value: f64, threshold: f64, pass: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            value,
            threshold,
            pass,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Machine-readable CSV: `check,value,threshold,pass,detail`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,value,threshold,pass,detail\n");
        for c in &self.checks {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{},{}\n",
                c.name,
                c.value,
                c.threshold,
                c.pass,
                c.detail.replace(',', ";")
            ));
        }
        s
    }
}

/// Run the full verification suite for a configuration.
pub fn run_verify(cfg: &ExperimentConfig, seed: u64) -> Result<VerifyReport> {
    let scene = cfg.scene()?;
    let mut checks = Vec::new();

    // Energy conservation and its fourth-order signature.
    let drift = energy_drift_sweep(
        &scene.domain,
        &scene.force,
        &scene.shell,
        cfg.verify_trajectories,
        cfg.verify_drift_h,
        seed ^ 0xd21f,
    )?;
    checks.push(CheckResult::new(
        "energy-drift",
        drift.max_drift,
        ENERGY_DRIFT_TOL,
        drift.max_drift <= ENERGY_DRIFT_TOL,
        format!("{} trajectories at h = {}", drift.n_trajectories, drift.h),
    ));
    let drift_half = energy_drift_sweep(
        &scene.domain,
        &scene.force,
        &scene.shell,
        cfg.verify_trajectories,
        cfg.verify_drift_h / 2.0,
        seed ^ 0xd21f,
    )?;
    // Below the round-off floor the truncation order is unobservable and
    // the check passes vacuously (straight-line flows are integrated
    // exactly).
    let floor = 1e-13;
    let at_floor = drift.max_drift < floor && drift_half.max_drift < floor;
    let ratio = if drift_half.max_drift > 0.0 {
        drift.max_drift / drift_half.max_drift
    } else {
        f64::INFINITY
    };
    checks.push(CheckResult::new(
        "energy-drift-order",
        ratio,
        ENERGY_ORDER_MIN_RATIO,
        at_floor || ratio >= ENERGY_ORDER_MIN_RATIO,
        format!(
            "drift {} at h vs {} at h/2{}",
            drift.max_drift,
            drift_half.max_drift,
            if at_floor { " (round-off floor)" } else { "" }
        ),
    ));

    // Phase-volume/boundary identity on the three standard test functions.
    let fns: [&(dyn Fn([f64; 2], [f64; 2]) -> f64 + Sync); 3] = [
        &|_, _| 1.0,
        &|x, _| (-(x[0] * x[0] + x[1] * x[1])).exp(),
        &|x, th| (-(x[0] * x[0] + x[1] * x[1])).exp() * th[1].atan2(th[0]).cos(),
    ];
    let names = ["santalo-constant", "santalo-gaussian", "santalo-gaussian-cos"];
    let inner = cfg.scene_inner()?;
    let reports = santalo_check_many(
        &fns,
        &inner.domain,
        &inner.force,
        &inner.shell,
        &cfg.santalo_options(&inner),
    )?;
    for (name, rep) in names.iter().zip(&reports) {
        checks.push(CheckResult::new(
            name,
            rep.rel_err,
            SANTALO_TOL,
            rep.rel_err <= SANTALO_TOL,
            format!("lhs {} rhs {}", rep.lhs, rep.rhs),
        ));
    }

    // Strict convexity and non-trapping of the enclosing domain.
    let conv = check_strict_convexity(
        &scene.domain,
        &scene.force,
        &scene.shell,
        cfg.verify_convexity_boundary,
        cfg.verify_convexity_tangent,
    )?;
    let detail = if conv.pass() {
        format!("{} samples", conv.n_checked)
    } else {
        let v = &conv.violations[0];
        format!(
            "{} violations; first at x = ({:.4}, {:.4}) t = {:.4}",
            conv.violations.len(),
            v.x[0],
            v.x[1],
            v.t
        )
    };
    checks.push(CheckResult::new(
        "convexity",
        conv.violations.len() as f64,
        0.0,
        conv.pass(),
        detail,
    ));

    let budget = 50.0 * scene.domain.diameter() / scene.shell.min_speed();
    let nt = check_nontrapping(
        &scene.domain,
        &scene.force,
        &scene.shell,
        cfg.verify_nontrap_samples,
        budget,
        seed ^ 0x7a11,
    )?;
    let detail = if nt.pass() {
        format!("max |l+-| = {:.4}", nt.max_abs_time)
    } else {
        let t = &nt.trapped[0];
        format!(
            "{} trapped; first at x = ({:.4}, {:.4})",
            nt.trapped.len(),
            t.x[0],
            t.x[1]
        )
    };
    checks.push(CheckResult::new(
        "nontrapping",
        nt.trapped.len() as f64,
        0.0,
        nt.pass(),
        detail,
    ));

    // Adjoint identity on random pairs.
    let op = build_ray_operator(
        &scene,
        &cfg.sigma_field(),
        cfg.spatial_grid(),
        cfg.boundary_layout(&scene)?,
        &cfg.ray_options(&scene),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad01);
    let mut worst = 0.0f64;
    for _ in 0..cfg.verify_adjoint_pairs {
        let f = GridImage::new(
            *op.grid(),
            (0..op.grid().len())
                .map(|_| rng.gen::<f64>() - 0.5)
                .collect(),
        )?;
        let mut g = BoundarySinogram::zeros(op.layout().clone(), DomainTag::Enclosing);
        g.values.iter_mut().for_each(|v| *v = rng.gen::<f64>() - 0.5);
        let lhs = op.forward(&f)?.dot(&g);
        let rhs = f.dot(&op.adjoint(&g)?);
        let scale = (f.l2_norm() * g.norm()).max(lhs.abs());
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    checks.push(CheckResult::new(
        "adjoint",
        worst,
        ADJOINT_TOL,
        worst <= ADJOINT_TOL,
        format!("{} random pairs", cfg.verify_adjoint_pairs),
    ));

    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.grid_nx = 25;
        cfg.grid_ny = 25;
        cfg.nodes_boundary = 24;
        cfg.nodes_dir = 12;
        cfg.ray_samples = 96;
        cfg.verify_trajectories = 40;
        cfg.verify_santalo_boundary = 64;
        cfg.verify_santalo_dir = 48;
        cfg.verify_santalo_ray = 96;
        cfg.verify_santalo_interior = 64;
        cfg.verify_santalo_interior_angular = 96;
        cfg.verify_santalo_fiber = 48;
        cfg.verify_convexity_boundary = 24;
        cfg.verify_nontrap_samples = 32;
        cfg.verify_adjoint_pairs = 5;
        cfg
    }

    #[test]
    fn default_euclidean_config_passes() {
        let report = run_verify(&quick_cfg(), 1).unwrap();
        assert!(
            report.all_pass(),
            "failed checks: {:?}",
            report
                .checks
                .iter()
                .filter(|c| !c.pass)
                .map(|c| (&c.name, c.value))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn strong_magnetic_fails_convexity() {
        let mut cfg = quick_cfg();
        cfg.magnetic = "constant".into();
        cfg.force_b = 2.0;
        // Orbits of radius 1/2 are trapped inside the enclosing disc, so the
        // ray operator cannot be built; only run the geometric checks up to
        // the convexity verdict by using the report.
        let report = run_verify(&cfg, 1);
        match report {
            Ok(r) => {
                let conv = r.checks.iter().find(|c| c.name == "convexity").unwrap();
                assert!(!conv.pass);
            }
            // Trapped trajectories surface as errors before the report
            // completes; that also flags the configuration as bad.
            Err(e) => {
                let msg = format!("{e}");
                assert!(msg.contains("trapped"), "unexpected error: {msg}");
            }
        }
    }

    #[test]
    fn report_csv_shape() {
        let report = run_verify(&quick_cfg(), 2).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "check,value,threshold,pass,detail");
        assert_eq!(lines.len(), report.checks.len() + 1);
    }
}
