//! Numeric diagnostics: strict convexity with respect to the force,
//! non-trapping, and energy-drift sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Domain, EnergyShell, ForceField, PhaseState};
use crate::par::try_par_reduce;
use crate::scalar::{self, Scalar, Vector};
use crate::trajectory::{
    shoot_trajectory, IntegratorOptions, ShootDirection, TrajectoryStatus,
};

/// A boundary sample whose tangential trajectory re-entered the closed
/// domain within the probe window.
#[derive(Clone, Copy, Debug)]
pub struct ConvexityViolation<S: Scalar> {
    pub x: Vector<S>,
    pub theta: Vector<S>,
    /// Probe time at which the trajectory was found inside.
    pub t: S,
    /// Level-set value there (negative = inside).
    pub level: S,
}

#[derive(Clone, Debug)]
pub struct ConvexityReport<S: Scalar> {
    pub n_checked: usize,
    pub delta: S,
    pub violations: Vec<ConvexityViolation<S>>,
}

impl<S: Scalar> ConvexityReport<S> {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Probe strict convexity of `domain` with respect to the force: from
/// sampled boundary points, short tangential arcs must leave the closed
/// domain immediately in both time directions.
pub fn check_strict_convexity<S: Scalar>(
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    n_boundary: usize,
    n_tangent: usize,
) -> Result<ConvexityReport<S>> {
    assert!(n_boundary >= 1 && n_tangent >= 1);
    let delta_len = S::of(0.02) * domain.diameter();
    let n_steps = 32usize;
    let samples = domain.boundary_samples(n_boundary);
    let n_dirs = n_tangent.min(2);

    let violations = try_par_reduce(
        samples.len(),
        Vec::new,
        |acc: &mut Vec<ConvexityViolation<S>>, i| -> Result<()> {
            let bp = &samples[i];
            let p = shell.speed(force, bp.x)?;
            let tangent = scalar::perp(bp.normal);
            for d in 0..n_dirs {
                let sign = if d % 2 == 0 { S::one() } else { -S::one() };
                let theta = scalar::scale(sign * p, tangent);
                let delta_t = delta_len / p;
                let h = delta_t / S::of(n_steps as f64);
                for time_sign in [S::one(), -S::one()] {
                    let mut x = bp.x;
                    let mut th = theta;
                    for k in 1..=n_steps {
                        let (xn, tn) = rk4_free(x, th, time_sign * h, force)?;
                        x = xn;
                        th = tn;
                        let level = domain.level(x);
                        if level < S::zero() {
                            acc.push(ConvexityViolation {
                                x: bp.x,
                                theta,
                                t: time_sign * h * S::of(k as f64),
                                level,
                            });
                            break;
                        }
                    }
                }
            }
            Ok(())
        },
        |a, b| a.extend(b),
    )?;

    Ok(ConvexityReport {
        n_checked: samples.len() * n_dirs,
        delta: delta_len,
        violations,
    })
}

/// One RK4 step ignoring the domain (probes run outside it).
fn rk4_free<S: Scalar>(
    x: Vector<S>,
    theta: Vector<S>,
    h: S,
    force: &ForceField<S>,
) -> Result<(Vector<S>, Vector<S>)> {
    let half = h / S::of(2.0);
    let a1 = force.accel(x, theta)?;
    let t2 = scalar::add(theta, scalar::scale(half, a1));
    let x2 = scalar::add(x, scalar::scale(half, theta));
    let a2 = force.accel(x2, t2)?;
    let t3 = scalar::add(theta, scalar::scale(half, a2));
    let x3 = scalar::add(x, scalar::scale(half, t2));
    let a3 = force.accel(x3, t3)?;
    let t4 = scalar::add(theta, scalar::scale(h, a3));
    let x4 = scalar::add(x, scalar::scale(h, t3));
    let a4 = force.accel(x4, t4)?;
    let sixth = h / S::of(6.0);
    let two = S::of(2.0);
    Ok((
        [
            x[0] + sixth * (theta[0] + two * (t2[0] + t3[0]) + t4[0]),
            x[1] + sixth * (theta[1] + two * (t2[1] + t3[1]) + t4[1]),
        ],
        [
            theta[0] + sixth * (a1[0] + two * (a2[0] + a3[0]) + a4[0]),
            theta[1] + sixth * (a1[1] + two * (a2[1] + a3[1]) + a4[1]),
        ],
    ))
}

#[derive(Clone, Debug)]
pub struct NontrappingReport<S: Scalar> {
    pub n_samples: usize,
    pub budget: S,
    /// Largest observed |l+-| over all exiting samples.
    pub max_abs_time: S,
    pub trapped: Vec<PhaseState<S>>,
}

impl<S: Scalar> NontrappingReport<S> {
    pub fn pass(&self) -> bool {
        self.trapped.is_empty()
    }
}

/// Shoot random interior shell states both ways and report exit-time
/// extremes plus any trapped samples.
pub fn check_nontrapping<S: Scalar>(
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    n_samples: usize,
    budget: S,
    seed: u64,
) -> Result<NontrappingReport<S>> {
    assert!(budget > S::zero(), "budget must be positive");
    let states = random_shell_states(domain, force, shell, n_samples, seed)?;
    let mut opts = IntegratorOptions::for_domain(domain, shell);
    opts.max_time = budget;

    let (max_abs_time, trapped) = try_par_reduce(
        states.len(),
        || (S::zero(), Vec::new()),
        |(max_t, trapped): &mut (S, Vec<PhaseState<S>>), i| -> Result<()> {
            let traj =
                shoot_trajectory(&states[i], ShootDirection::Both, domain, force, shell, &opts)?;
            if traj.status == TrajectoryStatus::Trapped {
                trapped.push(states[i]);
            } else {
                *max_t = max_t.max(traj.l_plus).max(-traj.l_minus);
            }
            Ok(())
        },
        |a, b| {
            a.0 = a.0.max(b.0);
            a.1.extend(b.1);
        },
    )?;

    Ok(NontrappingReport {
        n_samples,
        budget,
        max_abs_time,
        trapped,
    })
}

/// Seeded uniform interior shell states (rejection sampling in the box).
pub fn random_shell_states<S: Scalar>(
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    n: usize,
    seed: u64,
) -> Result<Vec<PhaseState<S>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = domain.bounding_box();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = [
            lo[0] + (hi[0] - lo[0]) * S::of(rng.gen::<f64>()),
            lo[1] + (hi[1] - lo[1]) * S::of(rng.gen::<f64>()),
        ];
        if !domain.inside(x) {
            continue;
        }
        let angle = S::of(rng.gen::<f64>() * std::f64::consts::TAU);
        out.push(PhaseState::from_angle(x, angle, force, shell)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct EnergyDriftReport<S: Scalar> {
    pub n_trajectories: usize,
    pub h: S,
    /// Max over trajectories of the max relative energy drift.
    pub max_drift: S,
}

/// Maximum relative energy drift over an ensemble of random trajectories
/// integrated at step `h`.
pub fn energy_drift_sweep<S: Scalar>(
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    n_trajectories: usize,
    h: S,
    seed: u64,
) -> Result<EnergyDriftReport<S>> {
    let states = random_shell_states(domain, force, shell, n_trajectories, seed)?;
    let opts = IntegratorOptions::for_domain(domain, shell).with_step(h);
    let max_drift = try_par_reduce(
        states.len(),
        || S::zero(),
        |worst: &mut S, i| -> Result<()> {
            let traj =
                shoot_trajectory(&states[i], ShootDirection::Both, domain, force, shell, &opts)?;
            *worst = worst.max(traj.energy_drift(force, shell)?);
            Ok(())
        },
        |a, b| *a = a.max(b),
    )?;
    Ok(EnergyDriftReport {
        n_trajectories,
        h,
        max_drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_without_force_is_convex() {
        let dom = Domain::<f64>::unit_disc();
        let force = ForceField::zero();
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let report = check_strict_convexity(&dom, &force, &shell, 32, 2).unwrap();
        assert!(report.pass(), "{} violations", report.violations.len());
    }

    #[test]
    fn weak_magnetic_stays_convex() {
        // Trajectory curvature b << boundary curvature 1.
        let dom = Domain::<f64>::unit_disc();
        let force = ForceField::constant_magnetic(0.1);
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let report = check_strict_convexity(&dom, &force, &shell, 32, 2).unwrap();
        assert!(report.pass());
    }

    #[test]
    fn strong_magnetic_breaks_convexity() {
        // Orbit radius 1/b = 0.5 < 1: tangential circles re-enter the disc.
        let dom = Domain::<f64>::unit_disc();
        let force = ForceField::constant_magnetic(2.0);
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let report = check_strict_convexity(&dom, &force, &shell, 32, 2).unwrap();
        assert!(!report.pass());
        assert!(report.violations.len() >= 16, "each sample should flag one side");
    }

    #[test]
    fn chords_bound_exit_times_without_force() {
        let dom = Domain::<f64>::unit_disc();
        let force = ForceField::zero();
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let report = check_nontrapping(&dom, &force, &shell, 64, 200.0, 7).unwrap();
        assert!(report.pass());
        assert!(report.max_abs_time <= 2.0 + 1e-6, "max {}", report.max_abs_time);
    }

    #[test]
    fn weak_magnetic_arc_bound() {
        // Arc through a disc of radius 1 on circles of radius 1/b: the arc
        // length is bounded by the full chord-arc formula; use the coarse
        // bound 2 asin(min(1, b)) / b * 2 from circle-arc geometry.
        let b = 0.4_f64;
        let dom = Domain::<f64>::unit_disc();
        let force = ForceField::constant_magnetic(b);
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let report = check_nontrapping(&dom, &force, &shell, 96, 400.0, 11).unwrap();
        assert!(report.pass());
        let bound = 2.0 * (1.0_f64.min(b)).asin() * (1.0 / b) * 2.0;
        assert!(
            report.max_abs_time <= bound,
            "max {} vs bound {}",
            report.max_abs_time,
            bound
        );
    }

    #[test]
    fn strong_magnetic_traps_interior_orbits() {
        let dom = Domain::<f64>::unit_disc();
        let force = ForceField::constant_magnetic(4.0);
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let report = check_nontrapping(&dom, &force, &shell, 64, 100.0, 3).unwrap();
        assert!(!report.pass());
    }

    #[test]
    fn drift_sweep_reports_small_drift() {
        let dom = Domain::<f64>::unit_disc();
        let force = ForceField::gaussian_bump(0.3, 1.0, [0.0, 0.0])
            .with_magnetic(crate::geometry::Magnetic::Constant { b: 0.2 });
        let shell = EnergyShell::new(1.0, &force, &dom).unwrap();
        let report = energy_drift_sweep(&dom, &force, &shell, 20, 1e-3, 1).unwrap();
        assert!(report.max_drift < 1e-8, "drift {}", report.max_drift);
    }
}
