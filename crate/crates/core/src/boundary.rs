//! Outgoing-boundary quadrature and the phase-volume/boundary identity.
//!
//! Nodes on the outgoing phase boundary carry the measure
//! `dxi = |n(x) . theta| dmu(x) dtheta`, discretized as a midpoint lattice in
//! (arc length) x (direction angle relative to the outward normal). The
//! [`santalo_check`] routine compares the interior phase-space integral of a
//! function against its boundary representation along backward trajectories.

use crate::error::{Error, Result};
use crate::geometry::{Domain, EnergyShell, ForceField, PhaseState};
use crate::par::try_par_reduce;
use crate::scalar::{self, Scalar, Vector};
use crate::trajectory::{shoot_trajectory, IntegratorOptions, ShootDirection, TrajectoryStatus};

/// Direction angles closer to tangential than this get zero weight.
pub const EPS_TANGENT: f64 = 1e-8;

/// One quadrature node on the outgoing boundary.
#[derive(Clone, Copy, Debug)]
pub struct MeasureNode<S: Scalar> {
    pub index: usize,
    /// Arc-length coordinate of the boundary point.
    pub arc: S,
    /// Direction angle relative to the outward normal, in (-pi/2, pi/2).
    pub psi: S,
    pub x: Vector<S>,
    /// Outgoing physical velocity, `|theta| = p(x)`.
    pub theta: Vector<S>,
    /// dxi quadrature weight.
    pub weight: S,
}

/// Midpoint lattice over the outgoing phase boundary.
#[derive(Clone, Debug)]
pub struct BoundaryLayout<S: Scalar> {
    pub n_boundary: usize,
    pub n_dir: usize,
    pub nodes: Vec<MeasureNode<S>>,
    /// Total boundary length (for periodic arc interpolation).
    pub perimeter: S,
}

impl<S: Scalar> BoundaryLayout<S> {
    pub fn total_measure(&self) -> S {
        self.nodes.iter().map(|n| n.weight).sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// dxi weight of one lattice cell: `|n . theta| * (arc weight) * (angular
/// weight on the radius-p fiber)`, with the tangential guard.
pub fn dxi_weight<S: Scalar>(cos_psi: S, arc_w: S, speed: S, d_psi: S) -> S {
    if cos_psi < S::of(EPS_TANGENT) {
        return S::zero();
    }
    // |n . theta| = p cos(psi); dtheta on the radius-p circle = p dpsi.
    cos_psi * speed * arc_w * speed * d_psi
}

/// Quadrature nodes covering the outgoing boundary of the energy shell over
/// `domain`: `n_boundary` arc-length midpoints times `n_dir` direction
/// midpoints in (-pi/2, pi/2) relative to the normal.
pub fn boundary_measure_nodes<S: Scalar>(
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    n_boundary: usize,
    n_dir: usize,
) -> Result<BoundaryLayout<S>> {
    if n_boundary < 2 || n_dir < 2 {
        return Err(Error::InvalidArgument(format!(
            "node counts must be >= 2, got {n_boundary} x {n_dir}"
        )));
    }
    let d_psi = S::PI() / S::of(n_dir as f64);
    let mut nodes = Vec::with_capacity(n_boundary * n_dir);
    for bp in domain.boundary_samples(n_boundary) {
        let p = shell.speed(force, bp.x)?;
        let normal_angle = scalar::angle_of(bp.normal);
        for k in 0..n_dir {
            let psi = -S::PI() / S::of(2.0) + (S::of(k as f64) + S::of(0.5)) * d_psi;
            let theta = scalar::scale(p, scalar::unit_from_angle(normal_angle + psi));
            let weight = dxi_weight(psi.cos(), bp.weight, p, d_psi);
            nodes.push(MeasureNode {
                index: nodes.len(),
                arc: bp.arc,
                psi,
                x: bp.x,
                theta,
                weight,
            });
        }
    }
    Ok(BoundaryLayout {
        n_boundary,
        n_dir,
        nodes,
        perimeter: domain.perimeter(),
    })
}

/// Which domain a sinogram was measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    /// The inner (source support) domain.
    Inner,
    /// The enclosing measurement domain.
    Enclosing,
}

/// Measurement values on the outgoing boundary lattice, with dxi weights.
#[derive(Clone, Debug)]
pub struct BoundarySinogram<S: Scalar> {
    pub layout: std::sync::Arc<BoundaryLayout<S>>,
    pub values: Vec<S>,
    pub domain_tag: DomainTag,
}

impl<S: Scalar> BoundarySinogram<S> {
    pub fn zeros(layout: std::sync::Arc<BoundaryLayout<S>>, tag: DomainTag) -> Self {
        BoundarySinogram {
            values: vec![S::zero(); layout.len()],
            layout,
            domain_tag: tag,
        }
    }

    pub fn compatible_with(&self, other: &BoundarySinogram<S>) -> bool {
        std::sync::Arc::ptr_eq(&self.layout, &other.layout)
            || (self.layout.n_boundary == other.layout.n_boundary
                && self.layout.n_dir == other.layout.n_dir
                && self.values.len() == other.values.len())
    }

    /// dxi-weighted inner product.
    pub fn dot(&self, other: &BoundarySinogram<S>) -> S {
        debug_assert!(self.compatible_with(other));
        self.values
            .iter()
            .zip(&other.values)
            .zip(&self.layout.nodes)
            .map(|((&a, &b), n)| a * b * n.weight)
            .fold(S::zero(), |s, v| s + v)
    }

    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn axpy(&mut self, alpha: S, other: &BoundarySinogram<S>) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + alpha * b;
        }
    }
}

/// Resolutions for the two sides of the identity check.
#[derive(Clone, Copy, Debug)]
pub struct SantaloOptions<S: Scalar> {
    /// Boundary arc nodes for the right-hand side.
    pub n_boundary: usize,
    /// Direction nodes per boundary point.
    pub n_dir: usize,
    /// Quadrature samples along each backward trajectory.
    pub n_ray: usize,
    /// Interior resolution (radial for discs, per-axis otherwise).
    pub n_interior: usize,
    /// Interior angular resolution.
    pub n_interior_angular: usize,
    /// Fiber directions for the interior velocity integral.
    pub n_fiber: usize,
    /// Integrator override; defaults to the domain-scaled options.
    pub integrator: Option<IntegratorOptions<S>>,
}

impl<S: Scalar> Default for SantaloOptions<S> {
    fn default() -> Self {
        SantaloOptions {
            n_boundary: 200,
            n_dir: 128,
            n_ray: 256,
            n_interior: 128,
            n_interior_angular: 256,
            n_fiber: 128,
            integrator: None,
        }
    }
}

impl<S: Scalar> SantaloOptions<S> {
    /// Double every quadrature resolution (integrator step unchanged).
    pub fn doubled(&self) -> Self {
        SantaloOptions {
            n_boundary: self.n_boundary * 2,
            n_dir: self.n_dir * 2,
            n_ray: self.n_ray * 2,
            n_interior: self.n_interior * 2,
            n_interior_angular: self.n_interior_angular * 2,
            n_fiber: self.n_fiber * 2,
            integrator: self.integrator,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SantaloReport<S: Scalar> {
    /// Interior phase-space integral.
    pub lhs: S,
    /// Boundary integral along backward trajectories.
    pub rhs: S,
    /// |lhs - rhs| over |lhs|, or over the L1 scale when lhs is
    /// numerically zero (odd integrands).
    pub rel_err: S,
    /// Quadrature of |f| over the shell, used as the fallback scale.
    pub l1_scale: S,
}

/// Interior quadrature nodes `(x, weight)` for the spatial integral.
/// Polar midpoint rule for discs; Cartesian cells with subsampled inside
/// fractions for level-set domains.
pub fn interior_quadrature<S: Scalar>(
    domain: &Domain<S>,
    n_radial: usize,
    n_angular: usize,
) -> Vec<(Vector<S>, S)> {
    match domain {
        Domain::Disc { center, radius } => {
            let dr = *radius / S::of(n_radial as f64);
            let dphi = (S::PI() + S::PI()) / S::of(n_angular as f64);
            let mut out = Vec::with_capacity(n_radial * n_angular);
            for i in 0..n_radial {
                let r = (S::of(i as f64) + S::of(0.5)) * dr;
                let w = r * dr * dphi;
                for j in 0..n_angular {
                    let phi = (S::of(j as f64) + S::of(0.5)) * dphi;
                    out.push((
                        scalar::add(*center, scalar::scale(r, scalar::unit_from_angle(phi))),
                        w,
                    ));
                }
            }
            out
        }
        Domain::LevelSet { .. } => {
            let (lo, hi) = domain.bounding_box();
            let n = n_radial.max(n_angular);
            let dx = (hi[0] - lo[0]) / S::of(n as f64);
            let dy = (hi[1] - lo[1]) / S::of(n as f64);
            let sub = 4;
            let cell = dx * dy;
            let subcell = cell / S::of((sub * sub) as f64);
            let mut out = Vec::new();
            for iy in 0..n {
                for ix in 0..n {
                    let cx = lo[0] + (S::of(ix as f64) + S::of(0.5)) * dx;
                    let cy = lo[1] + (S::of(iy as f64) + S::of(0.5)) * dy;
                    let mut frac = 0usize;
                    for sy in 0..sub {
                        for sx in 0..sub {
                            let px = lo[0]
                                + (S::of(ix as f64)
                                    + (S::of(sx as f64) + S::of(0.5)) / S::of(sub as f64))
                                    * dx;
                            let py = lo[1]
                                + (S::of(iy as f64)
                                    + (S::of(sy as f64) + S::of(0.5)) / S::of(sub as f64))
                                    * dy;
                            if domain.inside([px, py]) {
                                frac += 1;
                            }
                        }
                    }
                    if frac > 0 {
                        out.push(([cx, cy], subcell * S::of(frac as f64)));
                    }
                }
            }
            out
        }
    }
}

/// Check the identity for several phase functions in one pass (the backward
/// trajectories are traced once and shared).
pub fn santalo_check_many<S: Scalar>(
    fs: &[&(dyn Fn(Vector<S>, Vector<S>) -> S + Sync)],
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    opts: &SantaloOptions<S>,
) -> Result<Vec<SantaloReport<S>>> {
    let nf = fs.len();
    let interior = interior_quadrature(domain, opts.n_interior, opts.n_interior_angular);
    let d_alpha = (S::PI() + S::PI()) / S::of(opts.n_fiber as f64);

    // Left side: volume integral over the shell, plus the |f| scale.
    let (lhs, l1) = try_par_reduce(
        interior.len(),
        || (vec![S::zero(); nf], vec![S::zero(); nf]),
        |(lhs, l1): &mut (Vec<S>, Vec<S>), i| -> Result<()> {
            let (x, w) = interior[i];
            let p = shell.speed(force, x)?;
            for (fi, f) in fs.iter().enumerate() {
                let mut fiber = S::zero();
                let mut fiber_abs = S::zero();
                for a in 0..opts.n_fiber {
                    let alpha = S::of(a as f64) * d_alpha;
                    let v = f(x, scalar::scale(p, scalar::unit_from_angle(alpha)));
                    fiber = fiber + v;
                    fiber_abs = fiber_abs + v.abs();
                }
                // dtheta on the radius-p fiber contributes the factor p.
                lhs[fi] = lhs[fi] + w * p * fiber * d_alpha;
                l1[fi] = l1[fi] + w * p * fiber_abs * d_alpha;
            }
            Ok(())
        },
        |a, b| {
            for i in 0..nf {
                a.0[i] = a.0[i] + b.0[i];
                a.1[i] = a.1[i] + b.1[i];
            }
        },
    )?;

    // Right side: backward trajectories from the outgoing boundary.
    let layout = boundary_measure_nodes(domain, force, shell, opts.n_boundary, opts.n_dir)?;
    let integrator = opts
        .integrator
        .unwrap_or_else(|| IntegratorOptions::for_domain(domain, shell));

    let rhs = try_par_reduce(
        layout.nodes.len(),
        || vec![S::zero(); nf],
        |rhs: &mut Vec<S>, i| -> Result<()> {
            let node = &layout.nodes[i];
            if node.weight == S::zero() {
                return Ok(());
            }
            let start = PhaseState::new(node.x, node.theta);
            let traj = shoot_trajectory(
                &start,
                ShootDirection::Backward,
                domain,
                force,
                shell,
                &integrator,
            )?;
            if traj.status == TrajectoryStatus::Trapped {
                return Err(Error::TrappedBoundaryNode { index: node.index });
            }
            let p_bdry = shell.speed(force, node.x)?;
            let samples = traj.resample(traj.l_minus, S::zero(), opts.n_ray);
            let ds = -traj.l_minus / S::of((opts.n_ray - 1) as f64);
            for (fi, f) in fs.iter().enumerate() {
                let mut inner = S::zero();
                for (j, (_, x, th)) in samples.iter().enumerate() {
                    let half_ends = j == 0 || j == opts.n_ray - 1;
                    let w = if half_ends { ds / S::of(2.0) } else { ds };
                    let p_here = shell.p_squared(force, *x)?.max(S::zero()).sqrt();
                    inner = inner + w * p_here * f(*x, *th);
                }
                rhs[fi] = rhs[fi] + node.weight * inner / p_bdry;
            }
            Ok(())
        },
        |a, b| {
            for i in 0..nf {
                a[i] = a[i] + b[i];
            }
        },
    )?;

    Ok((0..nf)
        .map(|i| {
            let scale = l1[i].max(S::of(1e-300));
            let denom = if lhs[i].abs() > S::of(1e-6) * scale {
                lhs[i].abs()
            } else {
                scale
            };
            SantaloReport {
                lhs: lhs[i],
                rhs: rhs[i],
                rel_err: (lhs[i] - rhs[i]).abs() / denom,
                l1_scale: l1[i],
            }
        })
        .collect())
}

/// Single-function convenience wrapper around [`santalo_check_many`].
pub fn santalo_check<S: Scalar>(
    f: &(dyn Fn(Vector<S>, Vector<S>) -> S + Sync),
    domain: &Domain<S>,
    force: &ForceField<S>,
    shell: &EnergyShell<S>,
    opts: &SantaloOptions<S>,
) -> Result<SantaloReport<S>> {
    Ok(santalo_check_many(&[f], domain, force, shell, opts)?[0])
}
