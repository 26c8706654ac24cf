//! Newton trajectories of the force-field flow.
//!
//! Classical RK4 with a fixed step; boundary crossings are localized by
//! bisection on the domain level set. Energy drift is monitored, never
//! corrected.

use crate::error::{Error, Result};
use crate::geometry::{Domain, EnergyShell, ForceField, PhaseState};
use crate::scalar::{self, Matrix2, Scalar, Vector};

/// Fixed-step integrator configuration.
#[derive(Clone, Copy, Debug)]
pub struct IntegratorOptions<S: Scalar> {
    /// RK4 step size (time units).
    pub h: S,
    /// Absolute tolerance for boundary localization.
    pub eps_bdry: S,
    /// Travel-time budget; exceeding it marks the trajectory trapped.
    pub max_time: S,
}

impl<S: Scalar> IntegratorOptions<S> {
    /// Defaults scaled to the domain: `h = 1e-3 diam`,
    /// `eps_bdry = 1e-10 diam`, budget `50 diam / min p`.
    pub fn for_domain(domain: &Domain<S>, shell: &EnergyShell<S>) -> Self {
        let diam = domain.diameter();
        IntegratorOptions {
            h: S::of(1e-3) * diam,
            eps_bdry: S::of(1e-10) * diam,
            max_time: S::of(50.0) * diam / shell.min_speed(),
        }
    }

    pub fn with_step(mut self, h: S) -> Self {
        self.h = h;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.h > S::zero()) {
            return Err(Error::InvalidArgument(format!(
                "integrator step must be positive, got {}",
                self.h
            )));
        }
        Ok(())
    }
}

/// Which time direction(s) to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShootDirection {
    Forward,
    Backward,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryStatus {
    Exited,
    /// The travel-time budget was exceeded before a boundary exit.
    Trapped,
}

/// One stored integration sample.
#[derive(Clone, Copy, Debug)]
pub struct TrajectorySample<S: Scalar> {
    pub s: S,
    pub x: Vector<S>,
    pub theta: Vector<S>,
    /// Acceleration at the sample, kept for Hermite resampling.
    pub accel: Vector<S>,
}

/// A sampled solution of Newton's equation with exit data.
#[derive(Clone, Debug)]
pub struct Trajectory<S: Scalar> {
    /// Samples ordered by increasing `s`; `s = 0` is always present.
    pub samples: Vec<TrajectorySample<S>>,
    /// Backward exit time (<= 0; 0 when backward was not requested or the
    /// start already sits on the outgoing boundary).
    pub l_minus: S,
    /// Forward exit time (>= 0).
    pub l_plus: S,
    pub exit_backward: Option<PhaseState<S>>,
    pub exit_forward: Option<PhaseState<S>>,
    pub status: TrajectoryStatus,
}

impl<S: Scalar> Trajectory<S> {
    /// Max relative energy drift over the stored samples.
    pub fn energy_drift(&self, force: &ForceField<S>, shell: &EnergyShell<S>) -> Result<S> {
        let mut worst = S::zero();
        for smp in &self.samples {
            let h = shell.energy(force, smp.x, smp.theta)?;
            worst = worst.max(((h - shell.tau) / shell.tau).abs());
        }
        Ok(worst)
    }

    /// Cubic Hermite interpolation of `(x, theta)` at time `s` within the
    /// sampled range.
    pub fn interpolate(&self, s: S) -> (Vector<S>, Vector<S>) {
        let n = self.samples.len();
        if s <= self.samples[0].s {
            return (self.samples[0].x, self.samples[0].theta);
        }
        if s >= self.samples[n - 1].s {
            return (self.samples[n - 1].x, self.samples[n - 1].theta);
        }
        let hi = self.samples.partition_point(|smp| smp.s < s).max(1);
        let (a, b) = (&self.samples[hi - 1], &self.samples[hi]);
        let dt = b.s - a.s;
        if dt <= S::zero() {
            return (a.x, a.theta);
        }
        let t = (s - a.s) / dt;
        let x = [
            hermite(a.x[0], a.theta[0], b.x[0], b.theta[0], t, dt),
            hermite(a.x[1], a.theta[1], b.x[1], b.theta[1], t, dt),
        ];
        let theta = [
            hermite(a.theta[0], a.accel[0], b.theta[0], b.accel[0], t, dt),
            hermite(a.theta[1], a.accel[1], b.theta[1], b.accel[1], t, dt),
        ];
        (x, theta)
    }

    /// `m` uniformly spaced samples over `[s0, s1]`, inclusive.
    pub fn resample(&self, s0: S, s1: S, m: usize) -> Vec<(S, Vector<S>, Vector<S>)> {
        assert!(m >= 2);
        (0..m)
            .map(|j| {
                let t = S::of(j as f64 / (m - 1) as f64);
                let s = s0 + (s1 - s0) * t;
                let (x, theta) = self.interpolate(s);
                (s, x, theta)
            })
            .collect()
    }
}

#[inline]
fn hermite<S: Scalar>(p0: S, m0: S, p1: S, m1: S, t: S, dt: S) -> S {
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = S::of(2.0) * t3 - S::of(3.0) * t2 + S::one();
    let h10 = t3 - S::of(2.0) * t2 + t;
    let h01 = -S::of(2.0) * t3 + S::of(3.0) * t2;
    let h11 = t3 - t2;
    h00 * p0 + h10 * dt * m0 + h01 * p1 + h11 * dt * m1
}

#[inline]
fn rk4_step<S: Scalar>(
    x: Vector<S>,
    theta: Vector<S>,
    h: S,
    force: &ForceField<S>,
) -> Result<(Vector<S>, Vector<S>)> {
    let half = h / S::of(2.0);
    let sixth = h / S::of(6.0);
    let two = S::of(2.0);

    let a1 = force.accel(x, theta)?;
    let x2 = scalar::add(x, scalar::scale(half, theta));
    let t2 = scalar::add(theta, scalar::scale(half, a1));
    let a2 = force.accel(x2, t2)?;
    let x3 = scalar::add(x, scalar::scale(half, t2));
    let t3 = scalar::add(theta, scalar::scale(half, a2));
    let a3 = force.accel(x3, t3)?;
    let x4 = scalar::add(x, scalar::scale(h, t3));
    let t4 = scalar::add(theta, scalar::scale(h, a3));
    let a4 = force.accel(x4, t4)?;

    let xn = [
        x[0] + sixth * (theta[0] + two * t2[0] + two * t3[0] + t4[0]),
        x[1] + sixth * (theta[1] + two * t2[1] + two * t3[1] + t4[1]),
    ];
    let tn = [
        theta[0] + sixth * (a1[0] + two * a2[0] + two * a3[0] + a4[0]),
        theta[1] + sixth * (a1[1] + two * a2[1] + two * a3[1] + a4[1]),
    ];
    Ok((xn, tn))
}

/// Integrate the trajectory through `start` until it exits `domain` (or the
/// budget runs out) in the requested direction(s).
pub fn shoot_trajectory<S: Scalar>(
    start: &PhaseState<S>,
    dir: ShootDirection,
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    opts: &IntegratorOptions<S>,
) -> Result<Trajectory<S>> {
    opts.validate()?;
    let _ = shell; // shell participates through the start state's speed
    let accel0 = force.accel(start.x, start.theta)?;
    let origin = TrajectorySample {
        s: S::zero(),
        x: start.x,
        theta: start.theta,
        accel: accel0,
    };

    let mut samples: Vec<TrajectorySample<S>> = Vec::with_capacity(256);
    let mut status = TrajectoryStatus::Exited;
    let mut l_minus = S::zero();
    let mut l_plus = S::zero();
    let mut exit_backward = None;
    let mut exit_forward = None;

    if matches!(dir, ShootDirection::Backward | ShootDirection::Both) {
        match integrate_one_way(&origin, -opts.h, domain, force, opts)? {
            OneWay::Exited { mut path, exit } => {
                l_minus = exit.s;
                exit_backward = Some(PhaseState::new(exit.x, exit.theta));
                path.push(exit);
                path.reverse();
                samples.extend(path);
            }
            OneWay::Trapped { mut path } => {
                status = TrajectoryStatus::Trapped;
                l_minus = path.last().map(|p| p.s).unwrap_or(S::zero());
                path.reverse();
                samples.extend(path);
            }
        }
    }
    samples.push(origin);
    if matches!(dir, ShootDirection::Forward | ShootDirection::Both) {
        match integrate_one_way(&origin, opts.h, domain, force, opts)? {
            OneWay::Exited { path, exit } => {
                l_plus = exit.s;
                exit_forward = Some(PhaseState::new(exit.x, exit.theta));
                samples.extend(path);
                samples.push(exit);
            }
            OneWay::Trapped { path } => {
                status = TrajectoryStatus::Trapped;
                l_plus = path.last().map(|p| p.s).unwrap_or(S::zero());
                samples.extend(path);
            }
        }
    }

    Ok(Trajectory {
        samples,
        l_minus,
        l_plus,
        exit_backward,
        exit_forward,
        status,
    })
}

enum OneWay<S: Scalar> {
    Exited {
        /// Interior samples past the origin (origin excluded), |s| increasing.
        path: Vec<TrajectorySample<S>>,
        exit: TrajectorySample<S>,
    },
    Trapped {
        path: Vec<TrajectorySample<S>>,
    },
}

fn integrate_one_way<S: Scalar>(
    origin: &TrajectorySample<S>,
    signed_h: S,
    domain: &Domain<S>,
    force: &ForceField<S>,
    opts: &IntegratorOptions<S>,
) -> Result<OneWay<S>> {
    let mut path = Vec::new();
    let mut cur = *origin;

    // A start on (or numerically past) the boundary, moving outward, exits
    // immediately.
    if domain.level(cur.x) >= -opts.eps_bdry {
        let outward = scalar::dot(domain.grad_level(cur.x), cur.theta) * signed_h.signum();
        if outward > S::zero() {
            return Ok(OneWay::Exited {
                path,
                exit: cur,
            });
        }
    }

    loop {
        if cur.s.abs() >= opts.max_time {
            return Ok(OneWay::Trapped { path });
        }
        let (xn, tn) = rk4_step(cur.x, cur.theta, signed_h, force)?;
        let next = TrajectorySample {
            s: cur.s + signed_h,
            x: xn,
            theta: tn,
            accel: force.accel(xn, tn)?,
        };
        if domain.level(next.x) >= S::zero() {
            let exit = bisect_exit(&cur, signed_h, domain, force, opts)?;
            return Ok(OneWay::Exited { path, exit });
        }
        path.push(next);
        cur = next;
    }
}

/// Bisection on the step size from the last interior sample: each probe is a
/// single RK4 step of the probed size, so the localized state has full RK4
/// accuracy.
fn bisect_exit<S: Scalar>(
    inside: &TrajectorySample<S>,
    signed_h: S,
    domain: &Domain<S>,
    force: &ForceField<S>,
    opts: &IntegratorOptions<S>,
) -> Result<TrajectorySample<S>> {
    let mut lo = S::zero(); // step fraction staying inside
    let mut hi = signed_h.abs();
    let speed = scalar::norm(inside.theta).max(S::one());
    let tol = opts.eps_bdry / speed;
    let mut state = (inside.x, inside.theta);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) / S::of(2.0);
        let trial = rk4_step(inside.x, inside.theta, mid * signed_h.signum(), force)?;
        if domain.level(trial.0) >= S::zero() {
            hi = mid;
            state = trial;
        } else {
            lo = mid;
        }
    }
    // Land on the outside branch so the exit satisfies |level| <= eps_bdry.
    let s_exit = inside.s + hi * signed_h.signum();
    let accel = force.accel(state.0, state.1)?;
    Ok(TrajectorySample {
        s: s_exit,
        x: state.0,
        theta: state.1,
        accel,
    })
}

/// Forward flow with the variational (linearized) system attached.
///
/// Integrates `Phi' = A(s) Phi` alongside the trajectory, where `A` is the
/// Jacobian of the Newton field with respect to `(x, theta)`, plus an
/// optional attenuation accumulator. Used to assemble exit Jacobians for the
/// continuous adjoint.
#[derive(Clone, Debug)]
pub struct FlowWithJacobian<S: Scalar> {
    pub exit: PhaseState<S>,
    pub l_plus: S,
    /// 4x4 flow Jacobian d(x(l+), theta(l+)) / d(x0, theta0), row-major
    /// blocks [dx/dx0 dx/dth0; dth/dx0 dth/dth0].
    pub jacobian: [[S; 4]; 4],
    /// Integral of the supplied attenuation along the arc (zero if none).
    pub attenuation: S,
}

pub fn shoot_forward_with_jacobian<S: Scalar>(
    start: &PhaseState<S>,
    domain: &Domain<S>,
    force: &ForceField<S>,
    opts: &IntegratorOptions<S>,
    attenuation: Option<&(dyn Fn(Vector<S>, Vector<S>) -> S + Sync)>,
) -> Result<FlowWithJacobian<S>> {
    opts.validate()?;
    // Augmented state: x (2) + theta (2) + Phi (16, row-major) + att (1).
    let mut y = [S::zero(); 21];
    y[0] = start.x[0];
    y[1] = start.x[1];
    y[2] = start.theta[0];
    y[3] = start.theta[1];
    for i in 0..4 {
        y[4 + 5 * i] = S::one(); // Phi = I
    }

    let deriv = |y: &[S; 21]| -> Result<[S; 21]> {
        let x = [y[0], y[1]];
        let theta = [y[2], y[3]];
        let a = force.accel(x, theta)?;
        let jac = field_jacobian(force, x, theta)?;
        let mut dy = [S::zero(); 21];
        dy[0] = theta[0];
        dy[1] = theta[1];
        dy[2] = a[0];
        dy[3] = a[1];
        // dPhi = A * Phi
        for col in 0..4 {
            let phi_col = [y[4 + col], y[8 + col], y[12 + col], y[16 + col]];
            for row in 0..4 {
                let mut v = S::zero();
                for k in 0..4 {
                    v = v + jac[row][k] * phi_col[k];
                }
                dy[4 + 4 * row + col] = v;
            }
        }
        dy[20] = attenuation.map_or(S::zero(), |f| f(x, theta));
        Ok(dy)
    };

    let step = |y: &[S; 21], h: S| -> Result<[S; 21]> {
        let k1 = deriv(y)?;
        let k2 = deriv(&axpy21(y, h / S::of(2.0), &k1))?;
        let k3 = deriv(&axpy21(y, h / S::of(2.0), &k2))?;
        let k4 = deriv(&axpy21(y, h, &k3))?;
        let mut out = *y;
        let w = h / S::of(6.0);
        for i in 0..21 {
            out[i] = out[i] + w * (k1[i] + S::of(2.0) * (k2[i] + k3[i]) + k4[i]);
        }
        Ok(out)
    };

    let mut s = S::zero();
    // Immediate exit for outward boundary starts.
    if domain.level([y[0], y[1]]) >= -opts.eps_bdry {
        let n = domain.grad_level([y[0], y[1]]);
        if n[0] * y[2] + n[1] * y[3] > S::zero() {
            return Ok(pack_flow(&y, s));
        }
    }
    loop {
        if s >= opts.max_time {
            return Err(Error::Trapped {
                x: start.x[0].to_f64_lossy(),
                y: start.x[1].to_f64_lossy(),
                budget: opts.max_time.to_f64_lossy(),
            });
        }
        let next = step(&y, opts.h)?;
        if domain.level([next[0], next[1]]) >= S::zero() {
            // Bisect the step size as in the plain integrator.
            let mut lo = S::zero();
            let mut hi = opts.h;
            let speed = scalar::norm([y[2], y[3]]).max(S::one());
            let tol = opts.eps_bdry / speed;
            let mut exit_state = next;
            for _ in 0..200 {
                if hi - lo <= tol {
                    break;
                }
                let mid = (lo + hi) / S::of(2.0);
                let trial = step(&y, mid)?;
                if domain.level([trial[0], trial[1]]) >= S::zero() {
                    hi = mid;
                    exit_state = trial;
                } else {
                    lo = mid;
                }
            }
            return Ok(pack_flow(&exit_state, s + hi));
        }
        y = next;
        s = s + opts.h;
    }
}

fn pack_flow<S: Scalar>(y: &[S; 21], s: S) -> FlowWithJacobian<S> {
    let mut jac = [[S::zero(); 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            jac[r][c] = y[4 + 4 * r + c];
        }
    }
    FlowWithJacobian {
        exit: PhaseState::new([y[0], y[1]], [y[2], y[3]]),
        l_plus: s,
        jacobian: jac,
        attenuation: y[20],
    }
}

fn axpy21<S: Scalar>(y: &[S; 21], a: S, d: &[S; 21]) -> [S; 21] {
    let mut out = [S::zero(); 21];
    for i in 0..21 {
        out[i] = y[i] + a * d[i];
    }
    out
}

/// Jacobian of `(theta, F(x, theta))` w.r.t. `(x, theta)`.
fn field_jacobian<S: Scalar>(
    force: &ForceField<S>,
    x: Vector<S>,
    theta: Vector<S>,
) -> Result<[[S; 4]; 4]> {
    let hess: Matrix2<S> = force.hess_phi(x)?;
    let b = force.b(x)?;
    let gb = force.grad_b(x)?;
    let z = S::zero();
    // F = (-phi_x1 + b th2, -phi_x2 - b th1)
    Ok([
        [z, z, S::one(), z],
        [z, z, z, S::one()],
        [
            -hess[0][0] + gb[0] * theta[1],
            -hess[0][1] + gb[1] * theta[1],
            z,
            b,
        ],
        [
            -hess[1][0] - gb[0] * theta[0],
            -hess[1][1] - gb[1] * theta[0],
            -b,
            z,
        ],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domain, EnergyShell, ForceField};

    fn unit_setup() -> (Domain<f64>, ForceField<f64>, EnergyShell<f64>) {
        let dom = Domain::unit_disc();
        let force = ForceField::zero();
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap(); // p = 1
        (dom, force, shell)
    }

    #[test]
    fn straight_chord_exit_times() {
        let (dom, force, shell) = unit_setup();
        let opts = IntegratorOptions::for_domain(&dom, &shell);
        let start = PhaseState::new([0.0, 0.0], [1.0, 0.0]);
        let traj =
            shoot_trajectory(&start, ShootDirection::Both, &dom, &force, &shell, &opts).unwrap();
        assert_eq!(traj.status, TrajectoryStatus::Exited);
        assert!((traj.l_plus - 1.0).abs() < 1e-9, "l+ = {}", traj.l_plus);
        assert!((traj.l_minus + 1.0).abs() < 1e-9, "l- = {}", traj.l_minus);
        let exit = traj.exit_forward.unwrap();
        assert!((exit.x[0] - 1.0).abs() < 1e-9 && exit.x[1].abs() < 1e-12);
        // Straight segment: every sample has x[1] = 0.
        for s in &traj.samples {
            assert!(s.x[1].abs() < 1e-14);
        }
    }

    #[test]
    fn constant_magnetic_circle_oracle() {
        // With p = 1 and constant b the orbit is a circle of radius 1/b
        // centered at x0 - perp(theta0)/b.
        let dom = Domain::<f64>::disc([0.0, 0.0], 1.0);
        let force = ForceField::constant_magnetic(0.8);
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let opts = IntegratorOptions::for_domain(&dom, &shell);
        let start = PhaseState::new([-0.3, 0.1], [1.0, 0.0]);
        let traj =
            shoot_trajectory(&start, ShootDirection::Both, &dom, &force, &shell, &opts).unwrap();
        let r = 1.0 / 0.8;
        let center = [
            start.x[0] - (-start.theta[1]) / 0.8,
            start.x[1] - start.theta[0] / 0.8,
        ];
        for s in &traj.samples {
            let d = ((s.x[0] - center[0]).powi(2) + (s.x[1] - center[1]).powi(2)).sqrt();
            assert!((d - r).abs() < 1e-10, "radius error {}", (d - r).abs());
            // Closed form: angle advances at rate -b.
            let phi0 = (start.x[1] - center[1]).atan2(start.x[0] - center[0]);
            let expect = [
                center[0] + r * (phi0 - 0.8 * s.s).cos(),
                center[1] + r * (phi0 - 0.8 * s.s).sin(),
            ];
            assert!((s.x[0] - expect[0]).abs() < 1e-9);
            assert!((s.x[1] - expect[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn trapped_in_harmonic_trap() {
        // Strong confinement: tau just above the potential maximum leaves
        // too little speed near the rim; a tangential start orbits inside.
        let dom = Domain::<f64>::disc([0.0, 0.0], 1.0);
        let force = ForceField::harmonic(1.0); // phi = |x|^2, max on rim = 1
        let shell = EnergyShell::new(1.02, &force, &dom).unwrap();
        let mut opts = IntegratorOptions::for_domain(&dom, &shell);
        opts.max_time = 50.0;
        let x = [0.5, 0.0];
        let p = shell.speed(&force, x).unwrap();
        let start = PhaseState::new(x, [0.0, p]);
        let traj =
            shoot_trajectory(&start, ShootDirection::Forward, &dom, &force, &shell, &opts)
                .unwrap();
        assert_eq!(traj.status, TrajectoryStatus::Trapped);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let (dom, force, shell) = unit_setup();
        let opts = IntegratorOptions {
            h: 0.0,
            eps_bdry: 1e-12,
            max_time: 10.0,
        };
        let start = PhaseState::new([0.0, 0.0], [1.0, 0.0]);
        assert!(
            shoot_trajectory(&start, ShootDirection::Forward, &dom, &force, &shell, &opts)
                .is_err()
        );
    }

    #[test]
    fn energy_drift_fourth_order() {
        let dom = Domain::<f64>::disc([0.0, 0.0], 1.0);
        let force = ForceField::gaussian_bump(0.3, 1.0, [0.0, 0.0])
            .with_magnetic(crate::geometry::Magnetic::Constant { b: 0.2 });
        let shell = EnergyShell::new(1.0, &force, &dom).unwrap();
        let start = PhaseState::from_angle([0.2, -0.3], 0.7, &force, &shell).unwrap();
        let mut drifts = Vec::new();
        for &h in &[4e-3, 2e-3] {
            let opts = IntegratorOptions::for_domain(&dom, &shell).with_step(h);
            let traj =
                shoot_trajectory(&start, ShootDirection::Both, &dom, &force, &shell, &opts)
                    .unwrap();
            drifts.push(traj.energy_drift(&force, &shell).unwrap());
        }
        assert!(
            drifts[0] / drifts[1] > 8.0,
            "drift ratio {} not 4th order",
            drifts[0] / drifts[1]
        );
    }

    #[test]
    fn time_reversal_with_flip() {
        // With Y = 0 the flow is time-reversal symmetric under the velocity
        // flip: the reversed trajectory from the flipped exit state passes
        // through (x, -theta) at time l+.
        let (dom, _, base_shell) = unit_setup();
        let opts = IntegratorOptions::for_domain(&dom, &base_shell);
        let cases = [
            (ForceField::zero(), [0.1, -0.2], [0.6, 0.8]),
            (
                ForceField::gaussian_bump(0.2, 0.9, [0.0, 0.0]),
                [0.1, -0.2],
                [0.0, 0.0], // placeholder, velocity set on shell below
            ),
        ];
        for (i, (force, x0, th0)) in cases.iter().enumerate() {
            let shell = EnergyShell::new(0.5, force, &dom).unwrap();
            let start = if i == 0 {
                PhaseState::new(*x0, *th0)
            } else {
                PhaseState::from_angle(*x0, 0.93, force, &shell).unwrap()
            };
            let fwd =
                shoot_trajectory(&start, ShootDirection::Forward, &dom, force, &shell, &opts)
                    .unwrap();
            let exit = fwd.exit_forward.unwrap();
            let back_start = PhaseState::new(exit.x, [-exit.theta[0], -exit.theta[1]]);
            let back = shoot_trajectory(
                &back_start,
                ShootDirection::Forward,
                &dom,
                force,
                &shell,
                &opts,
            )
            .unwrap();
            let (rx, rt) = back.interpolate(fwd.l_plus);
            let tol = 10.0 * opts.eps_bdry + 2e-10;
            assert!(
                (rx[0] - start.x[0]).abs() < tol && (rx[1] - start.x[1]).abs() < tol,
                "case {i}: return point off by ({}, {})",
                rx[0] - start.x[0],
                rx[1] - start.x[1]
            );
            assert!((rt[0] + start.theta[0]).abs() < 1e-9);
            assert!((rt[1] + start.theta[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_semigroup_property() {
        let dom = Domain::<f64>::disc([0.0, 0.0], 1.0);
        let force = ForceField::gaussian_bump(0.2, 0.8, [0.1, 0.0])
            .with_magnetic(crate::geometry::Magnetic::Constant { b: 0.3 });
        let shell = EnergyShell::new(1.0, &force, &dom).unwrap();
        let opts = IntegratorOptions::for_domain(&dom, &shell).with_step(1e-3);
        let start = PhaseState::from_angle([-0.2, 0.15], 1.1, &force, &shell).unwrap();
        let traj =
            shoot_trajectory(&start, ShootDirection::Forward, &dom, &force, &shell, &opts)
                .unwrap();
        let s_mid = 0.37 * traj.l_plus;
        let (xm, tm) = traj.interpolate(s_mid);
        let retraj = shoot_trajectory(
            &PhaseState::new(xm, tm),
            ShootDirection::Forward,
            &dom,
            &force,
            &shell,
            &opts,
        )
        .unwrap();
        let t_rest = 0.5 * (traj.l_plus - s_mid);
        let (xa, ta) = traj.interpolate(s_mid + t_rest);
        let (xb, tb) = retraj.interpolate(t_rest);
        assert!((xa[0] - xb[0]).abs() < 1e-8 && (xa[1] - xb[1]).abs() < 1e-8);
        assert!((ta[0] - tb[0]).abs() < 1e-8 && (ta[1] - tb[1]).abs() < 1e-8);
    }

    #[test]
    fn jacobian_flow_matches_finite_differences() {
        let dom = Domain::<f64>::disc([0.0, 0.0], 1.0);
        let force = ForceField::gaussian_bump(0.25, 0.9, [0.0, 0.1])
            .with_magnetic(crate::geometry::Magnetic::Constant { b: 0.25 });
        let shell = EnergyShell::new(1.0, &force, &dom).unwrap();
        let opts = IntegratorOptions::for_domain(&dom, &shell).with_step(5e-4);
        let x0 = [0.2, -0.1];
        let p = shell.speed(&force, x0).unwrap();
        let th0 = [p * 0.6_f64.cos(), p * 0.6_f64.sin()];
        let flow =
            shoot_forward_with_jacobian(&PhaseState::new(x0, th0), &dom, &force, &opts, None)
                .unwrap();

        // Compare Phi against finite differences at a FIXED time (the exit
        // time of the base trajectory), using plain integration.
        let t_end = flow.l_plus;
        let eval = |x: [f64; 2], th: [f64; 2]| -> [f64; 4] {
            let big = Domain::disc([0.0, 0.0], 3.0);
            let opts2 = IntegratorOptions {
                h: 5e-4,
                eps_bdry: 1e-12,
                max_time: 100.0,
            };
            let traj = shoot_trajectory(
                &PhaseState::new(x, th),
                ShootDirection::Forward,
                &big,
                &force,
                &shell,
                &opts2,
            )
            .unwrap();
            let (xe, te) = traj.interpolate(t_end);
            [xe[0], xe[1], te[0], te[1]]
        };
        let delta = 1e-6;
        for c in 0..4 {
            let mut xp = x0;
            let mut tp = th0;
            let mut xm = x0;
            let mut tm = th0;
            match c {
                0 => {
                    xp[0] += delta;
                    xm[0] -= delta;
                }
                1 => {
                    xp[1] += delta;
                    xm[1] -= delta;
                }
                2 => {
                    tp[0] += delta;
                    tm[0] -= delta;
                }
                _ => {
                    tp[1] += delta;
                    tm[1] -= delta;
                }
            }
            let fp = eval(xp, tp);
            let fm = eval(xm, tm);
            for r in 0..4 {
                let fd = (fp[r] - fm[r]) / (2.0 * delta);
                assert!(
                    (flow.jacobian[r][c] - fd).abs() < 5e-4,
                    "J[{r}][{c}] = {} vs fd {}",
                    flow.jacobian[r][c],
                    fd
                );
            }
        }
    }
}
