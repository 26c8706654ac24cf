//! The attenuated ray transform along force-field trajectories, its exact
//! transpose adjoint, the continuous adjoint formula, and the normal
//! operator.
//!
//! The operator freezes its geometry at build time: every backward
//! trajectory from the outgoing boundary lattice is traced once and stored
//! as bilinear interpolation stencils with attenuation-weighted quadrature
//! coefficients. Forward and transpose applications walk the identical
//! discrete matrix, so the adjoint identity holds to round-off. The
//! continuous adjoint re-derives the boundary-to-interior change of
//! variables through the linearized flow and serves as an independent
//! cross-check of the transpose path.

use std::sync::Arc;

use rayon::prelude::*;

use crate::boundary::{BoundaryLayout, BoundarySinogram, DomainTag};
use crate::error::{Error, Result};
use crate::geometry::{Domain, PhaseState, Scene};
use crate::grid::{GridImage, SpatialGrid};
use crate::par::{chunk_ranges, REDUCTION_CHUNKS};
use crate::scalar::{self, Scalar, Vector};
use crate::transport::AttenuationField;
use crate::trajectory::{
    shoot_forward_with_jacobian, shoot_trajectory, FlowWithJacobian, IntegratorOptions,
    ShootDirection, TrajectoryStatus,
};

/// Build options for [`RayOperator`].
#[derive(Clone, Copy, Debug)]
pub struct RayOptions<S: Scalar> {
    /// Target quadrature samples along a budget-length ray; shorter rays get
    /// proportionally fewer (min 2).
    pub quad_samples: usize,
    pub integrator: Option<IntegratorOptions<S>>,
}

impl<S: Scalar> Default for RayOptions<S> {
    fn default() -> Self {
        RayOptions {
            quad_samples: 256,
            integrator: None,
        }
    }
}

struct RaySpan {
    start: u32,
    len: u32,
}

/// Frozen, matrix-free discretization of the attenuated ray transform from a
/// source grid to the outgoing boundary lattice.
pub struct RayOperator<S: Scalar> {
    scene: Scene<S>,
    grid: SpatialGrid<S>,
    layout: Arc<BoundaryLayout<S>>,
    rays: Vec<RaySpan>,
    base: Vec<u32>,
    wx: Vec<S>,
    wy: Vec<S>,
    /// `W(s_j) * trapezoid weight`.
    coeff: Vec<S>,
}

impl<S: Scalar> RayOperator<S> {
    pub fn grid(&self) -> &SpatialGrid<S> {
        &self.grid
    }

    pub fn layout(&self) -> &Arc<BoundaryLayout<S>> {
        &self.layout
    }

    pub fn scene(&self) -> &Scene<S> {
        &self.scene
    }

    pub fn sample_count(&self) -> usize {
        self.base.len()
    }

    /// Apply the transform: per-node trapezoid quadrature of `W f` along the
    /// cached trajectory.
    pub fn forward(&self, f: &GridImage<S>) -> Result<BoundarySinogram<S>> {
        if !f.grid.same_shape(&self.grid) {
            return Err(Error::GridMismatch {
                expected: self.grid.shape_string(),
                got: f.grid.shape_string(),
            });
        }
        let values = self.forward_with_coeffs(&self.coeff, f);
        Ok(BoundarySinogram {
            layout: self.layout.clone(),
            values,
            domain_tag: DomainTag::Enclosing,
        })
    }

    fn forward_with_coeffs(&self, coeff: &[S], f: &GridImage<S>) -> Vec<S> {
        let nx = self.grid.nx;
        let one = S::one();
        self.rays
            .par_iter()
            .map(|ray| {
                let lo = ray.start as usize;
                let hi = lo + ray.len as usize;
                let mut acc = S::zero();
                for s in lo..hi {
                    let b = self.base[s] as usize;
                    let (fx, fy) = (self.wx[s], self.wy[s]);
                    let v = (one - fy)
                        * ((one - fx) * f.values[b] + fx * f.values[b + 1])
                        + fy * ((one - fx) * f.values[b + nx] + fx * f.values[b + nx + 1]);
                    acc = acc + coeff[s] * v;
                }
                acc
            })
            .collect()
    }

    /// Exact transpose of [`RayOperator::forward`] with respect to the dxi
    /// inner product on sinograms and the cell-area inner product on images.
    pub fn adjoint(&self, g: &BoundarySinogram<S>) -> Result<GridImage<S>> {
        if g.values.len() != self.layout.len() {
            return Err(Error::NodeSetMismatch {
                expected: self.layout.len(),
                got: g.values.len(),
            });
        }
        Ok(self.adjoint_with_coeffs(&self.coeff, &g.values))
    }

    fn adjoint_with_coeffs(&self, coeff: &[S], g: &[S]) -> GridImage<S> {
        let nx = self.grid.nx;
        let one = S::one();
        let inv_area = S::one() / self.grid.cell_area();
        let n_rays = self.rays.len();
        // Deterministic reduction: fixed chunks, sequential combine.
        let partials: Vec<Vec<S>> = chunk_ranges(n_rays, REDUCTION_CHUNKS)
            .into_par_iter()
            .map(|range| {
                let mut img = vec![S::zero(); self.grid.len()];
                for r in range {
                    let weight = self.layout.nodes[r].weight * g[r] * inv_area;
                    if weight == S::zero() {
                        continue;
                    }
                    let ray = &self.rays[r];
                    let lo = ray.start as usize;
                    let hi = lo + ray.len as usize;
                    for s in lo..hi {
                        let b = self.base[s] as usize;
                        let (fx, fy) = (self.wx[s], self.wy[s]);
                        let c = coeff[s] * weight;
                        img[b] = img[b] + c * (one - fx) * (one - fy);
                        img[b + 1] = img[b + 1] + c * fx * (one - fy);
                        img[b + nx] = img[b + nx] + c * (one - fx) * fy;
                        img[b + nx + 1] = img[b + nx + 1] + c * fx * fy;
                    }
                }
                img
            })
            .collect();
        let mut out = GridImage::zeros(self.grid);
        for part in partials {
            for (o, v) in out.values.iter_mut().zip(part) {
                *o = *o + v;
            }
        }
        out
    }

    /// `adjoint(forward(f))`: symmetric positive semidefinite by
    /// construction.
    pub fn normal(&self, f: &GridImage<S>) -> Result<GridImage<S>> {
        let sino = self.forward(f)?;
        self.adjoint(&sino)
    }
}

/// Build the frozen ray operator. Fails with the node id if any boundary
/// node's backward trajectory is trapped.
pub fn build_ray_operator<S: Scalar>(
    scene: &Scene<S>,
    sigma: &AttenuationField<S>,
    grid: SpatialGrid<S>,
    layout: Arc<BoundaryLayout<S>>,
    opts: &RayOptions<S>,
) -> Result<RayOperator<S>> {
    Ok(build_ray_operator_with_factor(scene, sigma, grid, layout, opts, None)?.0)
}

/// As [`build_ray_operator`], additionally producing a parallel coefficient
/// set `W(s) wq * factor(x(s), theta(s))` for integrands carrying an extra
/// per-sample weight (used by the scattering measurement path).
pub fn build_ray_operator_with_factor<S: Scalar>(
    scene: &Scene<S>,
    sigma: &AttenuationField<S>,
    grid: SpatialGrid<S>,
    layout: Arc<BoundaryLayout<S>>,
    opts: &RayOptions<S>,
    factor: Option<&(dyn Fn(Vector<S>, Vector<S>) -> S + Sync)>,
) -> Result<(RayOperator<S>, Option<Vec<S>>)> {
    let integrator = opts
        .integrator
        .unwrap_or_else(|| IntegratorOptions::for_domain(&scene.domain, &scene.shell));
    let time_scale = scene.domain.diameter() / scene.shell.min_speed();

    struct RayData<S> {
        base: Vec<u32>,
        wx: Vec<S>,
        wy: Vec<S>,
        coeff: Vec<S>,
        extra: Vec<S>,
    }

    let built: Vec<Vec<RayData<S>>> = chunk_ranges(layout.len(), REDUCTION_CHUNKS)
        .into_par_iter()
        .map(|range| -> Result<Vec<RayData<S>>> {
            let mut block = Vec::with_capacity(range.len());
            for i in range {
                let node = &layout.nodes[i];
                let mut data = RayData {
                    base: Vec::new(),
                    wx: Vec::new(),
                    wy: Vec::new(),
                    coeff: Vec::new(),
                    extra: Vec::new(),
                };
                if node.weight == S::zero() {
                    block.push(data);
                    continue;
                }
                let start = PhaseState::new(node.x, node.theta);
                let traj = shoot_trajectory(
                    &start,
                    ShootDirection::Backward,
                    &scene.domain,
                    &scene.force,
                    &scene.shell,
                    &integrator,
                )?;
                if traj.status == TrajectoryStatus::Trapped {
                    return Err(Error::TrappedBoundaryNode { index: node.index });
                }
                let len = -traj.l_minus;
                let m = ((S::of(opts.quad_samples as f64) * len / time_scale)
                    .ceil()
                    .to_usize()
                    .unwrap_or(2))
                .clamp(2, opts.quad_samples.max(2));
                let samples = traj.resample(traj.l_minus, S::zero(), m);
                let ds = len / S::of((m - 1) as f64);
                let sig: Vec<S> = samples
                    .iter()
                    .map(|(_, xx, tt)| sigma.eval(*xx, *tt))
                    .collect();
                let mut att = vec![S::zero(); m];
                for idx in (0..m - 1).rev() {
                    att[idx] = att[idx + 1] + ds * (sig[idx] + sig[idx + 1]) / S::of(2.0);
                }
                for (idx, (_, xx, tt)) in samples.iter().enumerate() {
                    let half = idx == 0 || idx == m - 1;
                    let wq = if half { ds / S::of(2.0) } else { ds };
                    let (b, fx, fy) = grid.stencil(*xx);
                    let c = (-att[idx]).exp() * wq;
                    data.base.push(b as u32);
                    data.wx.push(fx);
                    data.wy.push(fy);
                    data.coeff.push(c);
                    if let Some(fac) = factor {
                        data.extra.push(c * fac(*xx, *tt));
                    }
                }
                block.push(data);
            }
            Ok(block)
        })
        .collect::<Result<Vec<_>>>()?;

    let total: usize = built.iter().flatten().map(|d| d.base.len()).sum();
    let mut op = RayOperator {
        scene: scene.clone(),
        grid,
        layout,
        rays: Vec::with_capacity(total),
        base: Vec::with_capacity(total),
        wx: Vec::with_capacity(total),
        wy: Vec::with_capacity(total),
        coeff: Vec::with_capacity(total),
    };
    let mut extra = factor.map(|_| Vec::with_capacity(total));
    for data in built.into_iter().flatten() {
        op.rays.push(RaySpan {
            start: op.base.len() as u32,
            len: data.base.len() as u32,
        });
        op.base.extend(data.base);
        op.wx.extend(data.wx);
        op.wy.extend(data.wy);
        op.coeff.extend(data.coeff);
        if let Some(e) = extra.as_mut() {
            e.extend(data.extra);
        }
    }
    Ok((op, extra))
}

/// Apply a prebuilt extra-coefficient set (from
/// [`build_ray_operator_with_factor`]) in place of the plain attenuation
/// coefficients.
pub fn forward_with_extra<S: Scalar>(
    op: &RayOperator<S>,
    extra: &[S],
    f: &GridImage<S>,
) -> BoundarySinogram<S> {
    BoundarySinogram {
        layout: op.layout.clone(),
        values: op.forward_with_coeffs(extra, f),
        domain_tag: DomainTag::Enclosing,
    }
}

/// Transpose counterpart of [`forward_with_extra`].
pub fn adjoint_with_extra<S: Scalar>(
    op: &RayOperator<S>,
    extra: &[S],
    g: &BoundarySinogram<S>,
) -> GridImage<S> {
    op.adjoint_with_coeffs(extra, &g.values)
}

/// Options for the continuous adjoint evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ContinuousAdjointOptions<S: Scalar> {
    /// Fiber directions per evaluation point.
    pub n_fiber: usize,
    pub integrator: Option<IntegratorOptions<S>>,
}

impl<S: Scalar> Default for ContinuousAdjointOptions<S> {
    fn default() -> Self {
        ContinuousAdjointOptions {
            n_fiber: 64,
            integrator: None,
        }
    }
}

/// Periodic-in-arc, zero-padded-in-angle bilinear interpolation of boundary
/// data at `(arc, psi)`.
pub fn interp_sinogram<S: Scalar>(g: &BoundarySinogram<S>, arc: S, psi: S) -> S {
    let layout = &g.layout;
    let nb = layout.n_boundary;
    let nd = layout.n_dir;
    let d_arc = layout.perimeter / S::of(nb as f64);
    let d_psi = S::PI() / S::of(nd as f64);

    let u = arc / d_arc - S::of(0.5);
    let iu = u.floor();
    let wu = u - iu;
    let i0 = ((iu.to_isize().unwrap_or(0) % nb as isize) + nb as isize) as usize % nb;
    let i1 = (i0 + 1) % nb;

    let v = (psi + S::PI() / S::of(2.0)) / d_psi - S::of(0.5);
    let at = |bi: usize, k: isize| -> S {
        if k < 0 || k >= nd as isize {
            S::zero()
        } else {
            g.values[bi * nd + k as usize]
        }
    };
    // Outgoing data vanishes at grazing angles; the half-cells against the
    // walls interpolate linearly to zero there.
    let angular = |bi: usize| -> S {
        if v < S::of(-0.5) || v > S::of(nd as f64) - S::of(0.5) {
            S::zero()
        } else if v < S::zero() {
            (v + S::of(0.5)) / S::of(0.5) * at(bi, 0)
        } else if v > S::of((nd - 1) as f64) {
            (S::of(nd as f64) - S::of(0.5) - v) / S::of(0.5) * at(bi, nd as isize - 1)
        } else {
            let kv = v.floor();
            let wv = v - kv;
            let k0 = kv.to_isize().unwrap_or(0);
            (S::one() - wv) * at(bi, k0) + wv * at(bi, k0 + 1)
        }
    };
    (S::one() - wu) * angular(i0) + wu * angular(i1)
}

/// Exit data of the forward flow from an interior phase point, with the
/// boundary-measure Jacobian assembled from the linearized flow.
#[derive(Clone, Copy, Debug)]
pub struct ExitData<S: Scalar> {
    pub z: Vector<S>,
    pub theta_z: Vector<S>,
    pub l_plus: S,
    /// Attenuation integral along the forward arc.
    pub att: S,
    /// Jacobian density of `ds dxi` against `dx dtheta'`.
    pub jb: S,
}

/// Trace forward to the boundary and assemble the exit Jacobian from the
/// variational flow.
pub fn exit_data_variational<S: Scalar>(
    scene: &Scene<S>,
    sigma: &AttenuationField<S>,
    x: Vector<S>,
    angle: S,
    integrator: &IntegratorOptions<S>,
) -> Result<ExitData<S>> {
    let p = scene.speed(x)?;
    let v = scalar::unit_from_angle(angle);
    let state = PhaseState::new(x, scalar::scale(p, v));
    let att_fn = |xx: Vector<S>, tt: Vector<S>| sigma.eval(xx, tt);
    let flow = shoot_forward_with_jacobian(
        &state,
        &scene.domain,
        &scene.force,
        integrator,
        Some(&att_fn),
    )?;
    let jb = exit_jacobian_from_flow(scene, x, p, v, &flow)?;
    Ok(ExitData {
        z: flow.exit.x,
        theta_z: flow.exit.theta,
        l_plus: flow.l_plus,
        att: flow.attenuation,
        jb,
    })
}

/// Assemble `J^b = |n(z).theta_z| p(z) D / p(x)` where `D` is the 3x3
/// determinant of the boundary chart `(arc, exit angle, time)` with respect
/// to the interior chart `(x, direction angle)`.
fn exit_jacobian_from_flow<S: Scalar>(
    scene: &Scene<S>,
    x: Vector<S>,
    p: S,
    v: Vector<S>,
    flow: &FlowWithJacobian<S>,
) -> Result<S> {
    let z = flow.exit.x;
    let theta_z = flow.exit.theta;
    let grad_level = scene.domain.grad_level(z);
    let denom = scalar::dot(grad_level, theta_z);
    if denom <= S::zero() {
        return Err(Error::InvalidArgument(
            "exit state is not outgoing".into(),
        ));
    }
    let accel_z = scene.force.accel(z, theta_z)?;
    let normal = scene.domain.normal(z);
    let tangent = scalar::perp(normal);
    let p_z = scalar::norm(theta_z);
    let grad_phi = scene.force.grad_phi(x)?;
    let grad_p = scalar::scale(-S::one() / p, grad_phi);

    // Tangent inputs of the shell chart (x1, x2, beta).
    let inputs: [[S; 4]; 3] = [
        [S::one(), S::zero(), grad_p[0] * v[0], grad_p[0] * v[1]],
        [S::zero(), S::one(), grad_p[1] * v[0], grad_p[1] * v[1]],
        [S::zero(), S::zero(), -p * v[1], p * v[0]],
    ];
    let mut cols = [[S::zero(); 3]; 3];
    for (c, u) in inputs.iter().enumerate() {
        let mut w = [S::zero(); 4];
        for r in 0..4 {
            for k in 0..4 {
                w[r] = w[r] + flow.jacobian[r][k] * u[k];
            }
        }
        let dz_free = [w[0], w[1]];
        let dth_free = [w[2], w[3]];
        let ds = -scalar::dot(grad_level, dz_free) / denom;
        let dz = scalar::add(dz_free, scalar::scale(ds, theta_z));
        let dth = scalar::add(dth_free, scalar::scale(ds, accel_z));
        cols[0][c] = scalar::dot(dz, tangent);
        cols[1][c] = scalar::cross(theta_z, dth) / (p_z * p_z);
        cols[2][c] = ds;
    }
    let d = det3(&cols).abs();
    Ok(scalar::dot(normal, theta_z).abs() * p_z * d / p)
}

fn det3<S: Scalar>(m: &[[S; 3]; 3]) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Finite-difference oracle for the exit Jacobian (testing path; step
/// `delta` around `(x, angle)`).
pub fn exit_jacobian_fd<S: Scalar>(
    scene: &Scene<S>,
    x: Vector<S>,
    angle: S,
    delta: S,
    integrator: &IntegratorOptions<S>,
) -> Result<S> {
    let outputs = |x: Vector<S>, beta: S| -> Result<[S; 3]> {
        let p = scene.speed(x)?;
        let state = PhaseState::new(x, scalar::scale(p, scalar::unit_from_angle(beta)));
        let traj = shoot_trajectory(
            &state,
            ShootDirection::Forward,
            &scene.domain,
            &scene.force,
            &scene.shell,
            integrator,
        )?;
        if traj.status == TrajectoryStatus::Trapped {
            return Err(Error::Trapped {
                x: x[0].to_f64_lossy(),
                y: x[1].to_f64_lossy(),
                budget: integrator.max_time.to_f64_lossy(),
            });
        }
        let exit = traj.exit_forward.unwrap();
        Ok([
            scene.domain.arc_coordinate(exit.x),
            scalar::angle_of(exit.theta),
            -traj.l_plus,
        ])
    };

    let mut jac = [[S::zero(); 3]; 3];
    let two_delta = delta + delta;
    for c in 0..3 {
        let (mut xp, mut bp) = (x, angle);
        let (mut xm, mut bm) = (x, angle);
        match c {
            0 => {
                xp[0] = xp[0] + delta;
                xm[0] = xm[0] - delta;
            }
            1 => {
                xp[1] = xp[1] + delta;
                xm[1] = xm[1] - delta;
            }
            _ => {
                bp = bp + delta;
                bm = bm - delta;
            }
        }
        let op = outputs(xp, bp)?;
        let om = outputs(xm, bm)?;
        let perim = scene.domain.perimeter();
        // Wrap periodic outputs.
        let d_arc = {
            let mut d = op[0] - om[0];
            if d > perim / S::of(2.0) {
                d = d - perim;
            }
            if d < -perim / S::of(2.0) {
                d = d + perim;
            }
            d
        };
        jac[0][c] = d_arc / two_delta;
        jac[1][c] = scalar::wrap_angle(op[1] - om[1]) / two_delta;
        jac[2][c] = (op[2] - om[2]) / two_delta;
    }
    let d = det3(&jac).abs();
    let base = outputs(x, angle)?;
    let _ = base;
    let p = scene.speed(x)?;
    let state = PhaseState::new(x, scalar::scale(p, scalar::unit_from_angle(angle)));
    let traj = shoot_trajectory(
        &state,
        ShootDirection::Forward,
        &scene.domain,
        &scene.force,
        &scene.shell,
        integrator,
    )?;
    let exit = traj.exit_forward.unwrap();
    let n = scene.domain.normal(exit.x);
    Ok(scalar::dot(n, exit.theta).abs() * scalar::norm(exit.theta) * d / p)
}

/// The continuous adjoint: at each evaluation node,
/// `integral over the fiber of W-bar J^b g-sharp dtheta'`, where `g-sharp`
/// extends the boundary data backward along the flow (found by tracing each
/// fiber direction forward to its exit).
pub fn continuous_adjoint<S: Scalar>(
    g: &BoundarySinogram<S>,
    scene: &Scene<S>,
    sigma: &AttenuationField<S>,
    grid: SpatialGrid<S>,
    eval_domain: &Domain<S>,
    opts: &ContinuousAdjointOptions<S>,
) -> Result<GridImage<S>> {
    let integrator = opts
        .integrator
        .unwrap_or_else(|| IntegratorOptions::for_domain(&scene.domain, &scene.shell));
    let nodes: Vec<(usize, Vector<S>)> = grid
        .node_iter()
        .enumerate()
        .filter(|(_, (_, _, x))| eval_domain.inside(*x))
        .map(|(i, (_, _, x))| (i, x))
        .collect();
    let d_alpha = (S::PI() + S::PI()) / S::of(opts.n_fiber as f64);

    let computed: Vec<Vec<(usize, S)>> = chunk_ranges(nodes.len(), REDUCTION_CHUNKS)
        .into_par_iter()
        .map(|range| -> Result<Vec<(usize, S)>> {
            let mut block = Vec::with_capacity(range.len());
            for r in range {
                let (idx, x) = nodes[r];
                let p = scene.speed(x)?;
                let mut acc = S::zero();
                for k in 0..opts.n_fiber {
                    let alpha = (S::of(k as f64) + S::of(0.5)) * d_alpha;
                    let exit = exit_data_variational(scene, sigma, x, alpha, &integrator)?;
                    let arc = scene.domain.arc_coordinate(exit.z);
                    let normal_angle = scalar::angle_of(scene.domain.normal(exit.z));
                    let psi = scalar::wrap_angle(scalar::angle_of(exit.theta_z) - normal_angle);
                    let gs = interp_sinogram(g, arc, psi);
                    acc = acc + (-exit.att).exp() * exit.jb * gs;
                }
                // dtheta' on the radius-p fiber.
                block.push((idx, acc * p * d_alpha));
            }
            Ok(block)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = GridImage::zeros(grid);
    for block in computed {
        for (idx, v) in block {
            out.values[idx] = v;
        }
    }
    Ok(out)
}
