//! Domains, force fields, and the fixed-energy shell.
//!
//! A [`ForceField`] is a scalar potential plus a skew-symmetric magnetic term;
//! in 2D the skew matrix `Y(x)` reduces to a single scalar `b(x)` with
//! `Y = [[0, b], [-b, 0]]`. The [`EnergyShell`] fixes the conserved energy
//! `H = |theta|^2 / 2 + phi(x)` and hence the local speed
//! `p(x) = sqrt(2 (tau - phi(x)))`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::scalar::{self, Matrix2, Scalar, Vector};

/// Closed planar region with a signed level-set description
/// (negative inside, positive outside).
#[derive(Clone)]
pub enum Domain<S: Scalar> {
    Disc {
        center: Vector<S>,
        radius: S,
    },
    /// Smooth star-shaped region given by a level-set function and its
    /// gradient. `anchor` must be an interior point from which every
    /// boundary point is visible along a ray.
    LevelSet {
        psi: Arc<dyn Fn(Vector<S>) -> S + Send + Sync>,
        grad: Arc<dyn Fn(Vector<S>) -> Vector<S> + Send + Sync>,
        anchor: Vector<S>,
        bbox: (Vector<S>, Vector<S>),
    },
}

impl<S: Scalar> Domain<S> {
    pub fn disc(center: Vector<S>, radius: S) -> Self {
        Domain::Disc { center, radius }
    }

    pub fn unit_disc() -> Self {
        Domain::Disc {
            center: [S::zero(), S::zero()],
            radius: S::one(),
        }
    }

    /// Signed boundary function: negative inside, positive outside.
    pub fn level(&self, x: Vector<S>) -> S {
        match self {
            Domain::Disc { center, radius } => scalar::norm(scalar::sub(x, *center)) - *radius,
            Domain::LevelSet { psi, .. } => psi(x),
        }
    }

    pub fn grad_level(&self, x: Vector<S>) -> Vector<S> {
        match self {
            Domain::Disc { center, .. } => {
                let d = scalar::sub(x, *center);
                let n = scalar::norm(d);
                if n > S::zero() {
                    scalar::scale(S::one() / n, d)
                } else {
                    [S::one(), S::zero()]
                }
            }
            Domain::LevelSet { grad, .. } => grad(x),
        }
    }

    pub fn inside(&self, x: Vector<S>) -> bool {
        self.level(x) < S::zero()
    }

    /// Outward unit normal; meaningful on (or near) the boundary.
    pub fn normal(&self, x: Vector<S>) -> Vector<S> {
        let g = self.grad_level(x);
        let n = scalar::norm(g);
        scalar::scale(S::one() / n, g)
    }

    pub fn bounding_box(&self) -> (Vector<S>, Vector<S>) {
        match self {
            Domain::Disc { center, radius } => (
                [center[0] - *radius, center[1] - *radius],
                [center[0] + *radius, center[1] + *radius],
            ),
            Domain::LevelSet { bbox, .. } => *bbox,
        }
    }

    pub fn diameter(&self) -> S {
        let (lo, hi) = self.bounding_box();
        scalar::norm(scalar::sub(hi, lo))
    }

    /// Boundary sampled at `n` points with arc-length quadrature weights
    /// (midpoint rule). Exact chart for discs, radial marching for
    /// level sets.
    pub fn boundary_samples(&self, n: usize) -> Vec<BoundaryPoint<S>> {
        match self {
            Domain::Disc { center, radius } => {
                let perimeter = (S::PI() + S::PI()) * *radius;
                let w = perimeter / S::of(n as f64);
                (0..n)
                    .map(|i| {
                        let s = (S::of(i as f64) + S::of(0.5)) * w;
                        let phi = s / *radius;
                        let dir = scalar::unit_from_angle(phi);
                        BoundaryPoint {
                            arc: s,
                            x: scalar::add(*center, scalar::scale(*radius, dir)),
                            normal: dir,
                            weight: w,
                        }
                    })
                    .collect()
            }
            Domain::LevelSet { anchor, .. } => {
                let pts: Vec<Vector<S>> = (0..n)
                    .map(|i| {
                        let phi = (S::of(i as f64) + S::of(0.5)) * (S::PI() + S::PI())
                            / S::of(n as f64);
                        self.radial_boundary_point(*anchor, scalar::unit_from_angle(phi))
                    })
                    .collect();
                let mut out = Vec::with_capacity(n);
                let mut arc = S::zero();
                for i in 0..n {
                    let prev = pts[(i + n - 1) % n];
                    let next = pts[(i + 1) % n];
                    let w = (scalar::norm(scalar::sub(pts[i], prev))
                        + scalar::norm(scalar::sub(next, pts[i])))
                        / S::of(2.0);
                    out.push(BoundaryPoint {
                        arc,
                        x: pts[i],
                        normal: self.normal(pts[i]),
                        weight: w,
                    });
                    arc = arc + scalar::norm(scalar::sub(next, pts[i]));
                }
                out
            }
        }
    }

    /// Arc-length coordinate of a point on (or near) the boundary.
    pub fn arc_coordinate(&self, x: Vector<S>) -> S {
        match self {
            Domain::Disc { center, radius } => {
                let d = scalar::sub(x, *center);
                let mut phi = scalar::angle_of(d);
                let two_pi = S::PI() + S::PI();
                if phi < S::zero() {
                    phi = phi + two_pi;
                }
                phi * *radius
            }
            Domain::LevelSet { anchor, .. } => {
                // Polyline chart anchored at angle 0; coarse but consistent.
                let d = scalar::sub(x, *anchor);
                let mut phi = scalar::angle_of(d);
                let two_pi = S::PI() + S::PI();
                if phi < S::zero() {
                    phi = phi + two_pi;
                }
                phi
            }
        }
    }

    pub fn perimeter(&self) -> S {
        match self {
            Domain::Disc { radius, .. } => (S::PI() + S::PI()) * *radius,
            Domain::LevelSet { .. } => self
                .boundary_samples(512)
                .iter()
                .map(|b| b.weight)
                .sum(),
        }
    }

    fn radial_boundary_point(&self, anchor: Vector<S>, dir: Vector<S>) -> Vector<S> {
        debug_assert!(self.inside(anchor), "anchor must be interior");
        let mut r_lo = S::zero();
        let mut r_hi = self.diameter();
        // Ensure the outer bracket is really outside.
        let mut guard = 0;
        while self.level(scalar::add(anchor, scalar::scale(r_hi, dir))) < S::zero() {
            r_hi = r_hi + r_hi;
            guard += 1;
            assert!(guard < 64, "level set has no outside along ray");
        }
        for _ in 0..80 {
            let mid = (r_lo + r_hi) / S::of(2.0);
            if self.level(scalar::add(anchor, scalar::scale(mid, dir))) < S::zero() {
                r_lo = mid;
            } else {
                r_hi = mid;
            }
        }
        scalar::add(anchor, scalar::scale((r_lo + r_hi) / S::of(2.0), dir))
    }

    /// Check that every boundary sample of `self` lies strictly inside
    /// `outer`, i.e. that `outer` can serve as the enclosing domain.
    pub fn strictly_inside(&self, outer: &Domain<S>, n_samples: usize) -> bool {
        self.boundary_samples(n_samples)
            .iter()
            .all(|b| outer.level(b.x) < S::zero())
    }
}

/// One boundary quadrature point.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryPoint<S: Scalar> {
    /// Arc-length coordinate along the boundary.
    pub arc: S,
    pub x: Vector<S>,
    pub normal: Vector<S>,
    /// Arc-length quadrature weight.
    pub weight: S,
}

type ScalarFn<S> = Arc<dyn Fn(Vector<S>) -> S + Send + Sync>;
type VectorFn<S> = Arc<dyn Fn(Vector<S>) -> Vector<S> + Send + Sync>;

/// Scalar potential catalog.
#[derive(Clone)]
pub enum Potential<S: Scalar> {
    Zero,
    /// `phi(x) = kappa |x|^2`
    Harmonic { kappa: S },
    /// `phi(x) = amp exp(-|x - center|^2 / width^2)`
    GaussianBump {
        amp: S,
        width: S,
        center: Vector<S>,
    },
    /// Sampled on a grid, evaluated with bicubic interpolation; gradients
    /// from fourth-order centered differences of the sample grid.
    Grid(GridField<S>),
    Custom {
        phi: ScalarFn<S>,
        grad: VectorFn<S>,
    },
}

/// Magnetic catalog: the scalar `b(x)` with `Y = [[0, b], [-b, 0]]`.
#[derive(Clone)]
pub enum Magnetic<S: Scalar> {
    Zero,
    Constant { b: S },
    /// `b(x) = b0 exp(-|x|^2 / width^2)`
    Radial { b0: S, width: S },
    Grid(GridField<S>),
    Custom { b: ScalarFn<S>, grad: VectorFn<S> },
}

/// External force `F(x, theta) = -grad phi(x) + Y(x) theta`.
#[derive(Clone)]
pub struct ForceField<S: Scalar> {
    pub potential: Potential<S>,
    pub magnetic: Magnetic<S>,
}

impl<S: Scalar> ForceField<S> {
    pub fn new(potential: Potential<S>, magnetic: Magnetic<S>) -> Self {
        ForceField {
            potential,
            magnetic,
        }
    }

    pub fn zero() -> Self {
        Self::new(Potential::Zero, Magnetic::Zero)
    }

    pub fn harmonic(kappa: S) -> Self {
        Self::new(Potential::Harmonic { kappa }, Magnetic::Zero)
    }

    pub fn gaussian_bump(amp: S, width: S, center: Vector<S>) -> Self {
        Self::new(Potential::GaussianBump { amp, width, center }, Magnetic::Zero)
    }

    pub fn constant_magnetic(b: S) -> Self {
        Self::new(Potential::Zero, Magnetic::Constant { b })
    }

    pub fn radial_magnetic(b0: S, width: S) -> Self {
        Self::new(Potential::Zero, Magnetic::Radial { b0, width })
    }

    pub fn with_magnetic(mut self, magnetic: Magnetic<S>) -> Self {
        self.magnetic = magnetic;
        self
    }

    pub fn phi(&self, x: Vector<S>) -> Result<S> {
        match &self.potential {
            Potential::Zero => Ok(S::zero()),
            Potential::Harmonic { kappa } => Ok(*kappa * scalar::dot(x, x)),
            Potential::GaussianBump { amp, width, center } => {
                let d = scalar::sub(x, *center);
                Ok(*amp * (-scalar::dot(d, d) / (*width * *width)).exp())
            }
            Potential::Grid(g) => g.eval(x),
            Potential::Custom { phi, .. } => Ok(phi(x)),
        }
    }

    pub fn grad_phi(&self, x: Vector<S>) -> Result<Vector<S>> {
        match &self.potential {
            Potential::Zero => Ok([S::zero(), S::zero()]),
            Potential::Harmonic { kappa } => Ok(scalar::scale(S::of(2.0) * *kappa, x)),
            Potential::GaussianBump { amp, width, center } => {
                let d = scalar::sub(x, *center);
                let w2 = *width * *width;
                let v = *amp * (-scalar::dot(d, d) / w2).exp();
                Ok(scalar::scale(-S::of(2.0) * v / w2, d))
            }
            Potential::Grid(g) => g.eval_grad(x),
            Potential::Custom { grad, .. } => Ok(grad(x)),
        }
    }

    /// Hessian of the potential; analytic for catalog fields, central
    /// differences of the gradient otherwise.
    pub fn hess_phi(&self, x: Vector<S>) -> Result<Matrix2<S>> {
        match &self.potential {
            Potential::Zero => Ok([[S::zero(); 2]; 2]),
            Potential::Harmonic { kappa } => {
                let k2 = S::of(2.0) * *kappa;
                Ok([[k2, S::zero()], [S::zero(), k2]])
            }
            Potential::GaussianBump { amp, width, center } => {
                let d = scalar::sub(x, *center);
                let w2 = *width * *width;
                let v = *amp * (-scalar::dot(d, d) / w2).exp();
                let a = S::of(4.0) * v / (w2 * w2);
                let c = S::of(2.0) * v / w2;
                Ok([
                    [a * d[0] * d[0] - c, a * d[0] * d[1]],
                    [a * d[1] * d[0], a * d[1] * d[1] - c],
                ])
            }
            _ => {
                let h = S::of(1e-5) * (S::one() + scalar::norm(x));
                let gxp = self.grad_phi([x[0] + h, x[1]])?;
                let gxm = self.grad_phi([x[0] - h, x[1]])?;
                let gyp = self.grad_phi([x[0], x[1] + h])?;
                let gym = self.grad_phi([x[0], x[1] - h])?;
                let two_h = h + h;
                Ok([
                    [(gxp[0] - gxm[0]) / two_h, (gyp[0] - gym[0]) / two_h],
                    [(gxp[1] - gxm[1]) / two_h, (gyp[1] - gym[1]) / two_h],
                ])
            }
        }
    }

    pub fn b(&self, x: Vector<S>) -> Result<S> {
        match &self.magnetic {
            Magnetic::Zero => Ok(S::zero()),
            Magnetic::Constant { b } => Ok(*b),
            Magnetic::Radial { b0, width } => {
                Ok(*b0 * (-scalar::dot(x, x) / (*width * *width)).exp())
            }
            Magnetic::Grid(g) => g.eval(x),
            Magnetic::Custom { b, .. } => Ok(b(x)),
        }
    }

    pub fn grad_b(&self, x: Vector<S>) -> Result<Vector<S>> {
        match &self.magnetic {
            Magnetic::Zero | Magnetic::Constant { .. } => Ok([S::zero(), S::zero()]),
            Magnetic::Radial { b0, width } => {
                let w2 = *width * *width;
                let v = *b0 * (-scalar::dot(x, x) / w2).exp();
                Ok(scalar::scale(-S::of(2.0) * v / w2, x))
            }
            Magnetic::Grid(g) => g.eval_grad(x),
            Magnetic::Custom { grad, .. } => Ok(grad(x)),
        }
    }

    /// Skew-symmetric matrix `Y(x)`.
    pub fn y_matrix(&self, x: Vector<S>) -> Result<Matrix2<S>> {
        let b = self.b(x)?;
        Ok([[S::zero(), b], [-b, S::zero()]])
    }

    /// Acceleration `F(x, theta) = -grad phi + Y theta`.
    pub fn accel(&self, x: Vector<S>, theta: Vector<S>) -> Result<Vector<S>> {
        let g = self.grad_phi(x)?;
        let b = self.b(x)?;
        Ok([-g[0] + b * theta[1], -g[1] - b * theta[0]])
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.potential, Potential::Zero) && matches!(self.magnetic, Magnetic::Zero)
    }
}

/// Newton right-hand side: `(x_dot, theta_dot) = (theta, F(x, theta))`.
pub fn rhs<S: Scalar>(
    state: &PhaseState<S>,
    force: &ForceField<S>,
) -> Result<(Vector<S>, Vector<S>)> {
    Ok((state.theta, force.accel(state.x, state.theta)?))
}

/// Scalar samples on a uniform grid with bicubic (Catmull-Rom) evaluation.
///
/// Gradients are precomputed on the grid with fourth-order centered
/// differences (second-order one-sided at the edges) and interpolated with
/// the same bicubic rule, giving a C^1 field.
#[derive(Clone)]
pub struct GridField<S: Scalar> {
    grid: SpatialGrid<S>,
    values: Arc<Vec<S>>,
    grad_x: Arc<Vec<S>>,
    grad_y: Arc<Vec<S>>,
}

impl<S: Scalar> GridField<S> {
    pub fn new(grid: SpatialGrid<S>, values: Vec<S>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch {
                expected: format!("{} values", grid.len()),
                got: format!("{}", values.len()),
            });
        }
        let (nx, ny) = (grid.nx, grid.ny);
        let idx = |ix: usize, iy: usize| iy * nx + ix;
        let mut gx = vec![S::zero(); values.len()];
        let mut gy = vec![S::zero(); values.len()];
        let d4 = |fm2: S, fm1: S, fp1: S, fp2: S, h: S| {
            (fm2 - S::of(8.0) * fm1 + S::of(8.0) * fp1 - fp2) / (S::of(12.0) * h)
        };
        for iy in 0..ny {
            for ix in 0..nx {
                let v = |i: isize, j: isize| {
                    let i = i.clamp(0, nx as isize - 1) as usize;
                    let j = j.clamp(0, ny as isize - 1) as usize;
                    values[idx(i, j)]
                };
                let (i, j) = (ix as isize, iy as isize);
                gx[idx(ix, iy)] = if ix >= 2 && ix + 2 < nx {
                    d4(v(i - 2, j), v(i - 1, j), v(i + 1, j), v(i + 2, j), grid.dx)
                } else {
                    (v(i + 1, j) - v(i - 1, j))
                        / (if ix == 0 || ix + 1 == nx {
                            grid.dx
                        } else {
                            grid.dx + grid.dx
                        })
                };
                gy[idx(ix, iy)] = if iy >= 2 && iy + 2 < ny {
                    d4(v(i, j - 2), v(i, j - 1), v(i, j + 1), v(i, j + 2), grid.dy)
                } else {
                    (v(i, j + 1) - v(i, j - 1))
                        / (if iy == 0 || iy + 1 == ny {
                            grid.dy
                        } else {
                            grid.dy + grid.dy
                        })
                };
            }
        }
        Ok(GridField {
            grid,
            values: Arc::new(values),
            grad_x: Arc::new(gx),
            grad_y: Arc::new(gy),
        })
    }

    pub fn grid(&self) -> &SpatialGrid<S> {
        &self.grid
    }

    pub fn eval(&self, x: Vector<S>) -> Result<S> {
        self.bicubic(&self.values, x)
    }

    pub fn eval_grad(&self, x: Vector<S>) -> Result<Vector<S>> {
        Ok([self.bicubic(&self.grad_x, x)?, self.bicubic(&self.grad_y, x)?])
    }

    fn bicubic(&self, data: &[S], x: Vector<S>) -> Result<S> {
        let g = &self.grid;
        if x[0] < g.x_min || x[0] > g.x_max || x[1] < g.y_min || x[1] > g.y_max {
            return Err(Error::FieldDomain {
                x: x[0].to_f64_lossy(),
                y: x[1].to_f64_lossy(),
            });
        }
        let fx = (x[0] - g.x_min) / g.dx;
        let fy = (x[1] - g.y_min) / g.dy;
        let ix = fx.floor().to_usize().unwrap_or(0).min(g.nx - 2);
        let iy = fy.floor().to_usize().unwrap_or(0).min(g.ny - 2);
        let tx = fx - S::of(ix as f64);
        let ty = fy - S::of(iy as f64);
        let tap = |i: isize, j: isize| {
            let i = i.clamp(0, g.nx as isize - 1) as usize;
            let j = j.clamp(0, g.ny as isize - 1) as usize;
            data[j * g.nx + i]
        };
        let mut rows = [S::zero(); 4];
        for (r, row) in rows.iter_mut().enumerate() {
            let j = iy as isize + r as isize - 1;
            *row = catmull_rom(
                tap(ix as isize - 1, j),
                tap(ix as isize, j),
                tap(ix as isize + 1, j),
                tap(ix as isize + 2, j),
                tx,
            );
        }
        Ok(catmull_rom(rows[0], rows[1], rows[2], rows[3], ty))
    }
}

fn catmull_rom<S: Scalar>(p0: S, p1: S, p2: S, p3: S, t: S) -> S {
    let half = S::of(0.5);
    let a = half * (-p0 + S::of(3.0) * p1 - S::of(3.0) * p2 + p3);
    let b = half * (S::of(2.0) * p0 - S::of(5.0) * p1 + S::of(4.0) * p2 - p3);
    let c = half * (p2 - p0);
    ((a * t + b) * t + c) * t + p1
}

/// Fixed energy level with the derived speed `p(x) = sqrt(2 (tau - phi))`.
#[derive(Clone, Copy, Debug)]
pub struct EnergyShell<S: Scalar> {
    pub tau: S,
    min_speed: S,
}

impl<S: Scalar> EnergyShell<S> {
    /// Validates `tau > max phi` by sampling the bounding box of `domain`
    /// (the widest domain in play, normally the enclosing one).
    pub fn new(tau: S, force: &ForceField<S>, domain: &Domain<S>) -> Result<Self> {
        let (lo, hi) = domain.bounding_box();
        let n = 64;
        let mut max_phi = S::neg_infinity();
        for iy in 0..=n {
            for ix in 0..=n {
                let x = [
                    lo[0] + (hi[0] - lo[0]) * S::of(ix as f64 / n as f64),
                    lo[1] + (hi[1] - lo[1]) * S::of(iy as f64 / n as f64),
                ];
                if domain.level(x) < S::of(1e-9) {
                    if let Ok(p) = force.phi(x) {
                        max_phi = max_phi.max(p);
                    }
                }
            }
        }
        if !(tau > max_phi) {
            return Err(Error::ShellInvalid {
                tau: tau.to_f64_lossy(),
                max_phi: max_phi.to_f64_lossy(),
            });
        }
        let min_speed = (S::of(2.0) * (tau - max_phi)).sqrt();
        Ok(EnergyShell { tau, min_speed })
    }

    /// Speed `p(x)`; fails if `phi(x) >= tau` (outside the validated region).
    pub fn speed(&self, force: &ForceField<S>, x: Vector<S>) -> Result<S> {
        let phi = force.phi(x)?;
        let p2 = S::of(2.0) * (self.tau - phi);
        if p2 <= S::zero() {
            return Err(Error::ShellInvalid {
                tau: self.tau.to_f64_lossy(),
                max_phi: phi.to_f64_lossy(),
            });
        }
        Ok(p2.sqrt())
    }

    /// `P(x) = 2 (tau - phi(x)) = p(x)^2`.
    pub fn p_squared(&self, force: &ForceField<S>, x: Vector<S>) -> Result<S> {
        let phi = force.phi(x)?;
        Ok(S::of(2.0) * (self.tau - phi))
    }

    /// Conservative lower bound on the speed over the validated region.
    pub fn min_speed(&self) -> S {
        self.min_speed
    }

    pub fn energy(&self, force: &ForceField<S>, x: Vector<S>, theta: Vector<S>) -> Result<S> {
        Ok(scalar::dot(theta, theta) / S::of(2.0) + force.phi(x)?)
    }
}

/// Domain, force, and shell frozen together; the unit every transport and
/// ray operation works against.
#[derive(Clone)]
pub struct Scene<S: Scalar> {
    pub domain: Domain<S>,
    pub force: ForceField<S>,
    pub shell: EnergyShell<S>,
}

impl<S: Scalar> Scene<S> {
    pub fn new(domain: Domain<S>, force: ForceField<S>, tau: S) -> Result<Self> {
        let shell = EnergyShell::new(tau, &force, &domain)?;
        Ok(Scene {
            domain,
            force,
            shell,
        })
    }

    pub fn speed(&self, x: Vector<S>) -> Result<S> {
        self.shell.speed(&self.force, x)
    }
}

/// Relative shell tolerance accepted without renormalization.
pub const EPS_SHELL: f64 = 1e-8;
/// Relative speed mismatch up to which constructors renormalize.
pub const EPS_RENORMALIZE: f64 = 1e-6;

/// Point of phase space: position plus velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseState<S: Scalar> {
    pub x: Vector<S>,
    pub theta: Vector<S>,
}

impl<S: Scalar> PhaseState<S> {
    pub fn new(x: Vector<S>, theta: Vector<S>) -> Self {
        PhaseState { x, theta }
    }

    /// Construct a state on the energy shell: directions within
    /// [`EPS_RENORMALIZE`] of the shell speed are rescaled to `p(x)`,
    /// anything further off is rejected.
    pub fn on_shell(
        x: Vector<S>,
        theta: Vector<S>,
        force: &ForceField<S>,
        shell: &EnergyShell<S>,
    ) -> Result<Self> {
        let p = shell.speed(force, x)?;
        let speed = scalar::norm(theta);
        let rel = ((speed - p) / p).abs();
        if rel > S::of(EPS_RENORMALIZE) {
            return Err(Error::OffShell {
                speed: speed.to_f64_lossy(),
                expected: p.to_f64_lossy(),
            });
        }
        let theta = if rel > S::zero() {
            scalar::scale(p / speed, theta)
        } else {
            theta
        };
        Ok(PhaseState { x, theta })
    }

    /// Shell residual `| |theta| - p(x) | / p(x)`.
    pub fn shell_residual(&self, force: &ForceField<S>, shell: &EnergyShell<S>) -> Result<S> {
        let p = shell.speed(force, self.x)?;
        Ok(((scalar::norm(self.theta) - p) / p).abs())
    }

    /// Shell state at `x` pointing along the unit direction of `angle`.
    pub fn from_angle(
        x: Vector<S>,
        angle: S,
        force: &ForceField<S>,
        shell: &EnergyShell<S>,
    ) -> Result<Self> {
        let p = shell.speed(force, x)?;
        Ok(PhaseState {
            x,
            theta: scalar::scale(p, scalar::unit_from_angle(angle)),
        })
    }
}
