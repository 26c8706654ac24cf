//! Experiment configuration: a flat key-value text format with dotted
//! section keys, chosen for diff-friendliness and zero-dependency parsing.
//!
//! Every field has a default; parsing rejects unknown keys and malformed
//! values with the offending line number. Serialization emits all fields in
//! a fixed order, so parse -> serialize -> parse is idempotent.

use std::path::Path;
use std::sync::Arc;

use crate::boundary::{boundary_measure_nodes, BoundaryLayout, SantaloOptions};
use crate::error::{Error, Result};
use crate::geometry::{Domain, ForceField, GridField, Magnetic, Potential, Scene};
use crate::grid::{PhaseGrid, SpatialGrid};
use crate::io::read_grid_image;
use crate::ray::RayOptions;
use crate::scatter::ScatterOptions;
use crate::transport::{AttenuationField, PhaseFn, ScatteringKernel, TransportOptions};

pub type Real = f64;

/// One scalar-coefficient spec (attenuation or a separable kernel factor).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoefficientSpec {
    /// `zero`, `constant`, `gaussian`, or `cosine` (angular modulation).
    pub kind: CoefficientKind,
    pub value: Real,
    pub amp: Real,
    pub width: Real,
    /// Relative amplitude of the `cos(direction angle)` modulation.
    pub aniso: Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoefficientKind {
    Zero,
    Constant,
    Gaussian,
    Cosine,
}

impl CoefficientSpec {
    fn zero() -> Self {
        CoefficientSpec {
            kind: CoefficientKind::Zero,
            value: 0.0,
            amp: 0.0,
            width: 1.0,
            aniso: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, CoefficientKind::Zero)
            || (matches!(self.kind, CoefficientKind::Constant) && self.value == 0.0)
    }

    /// Materialize as a phase-space callable.
    pub fn as_phase_fn(&self) -> PhaseFn<Real> {
        let spec = *self;
        Arc::new(move |x: [Real; 2], th: [Real; 2]| -> Real {
            match spec.kind {
                CoefficientKind::Zero => 0.0,
                CoefficientKind::Constant => spec.value,
                CoefficientKind::Gaussian => {
                    spec.amp * (-(x[0] * x[0] + x[1] * x[1]) / (spec.width * spec.width)).exp()
                }
                CoefficientKind::Cosine => {
                    spec.value * (1.0 + spec.aniso * th[1].atan2(th[0]).cos())
                }
            }
        })
    }

    fn kind_str(&self) -> &'static str {
        match self.kind {
            CoefficientKind::Zero => "zero",
            CoefficientKind::Constant => "constant",
            CoefficientKind::Gaussian => "gaussian",
            CoefficientKind::Cosine => "cosine",
        }
    }
}

/// Full experiment configuration; see the field serializer for the key set.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    // Domains.
    pub domain_cx: Real,
    pub domain_cy: Real,
    pub domain_radius: Real,
    pub domain1_cx: Real,
    pub domain1_cy: Real,
    pub domain1_radius: Real,
    // Energy.
    pub tau: Real,
    // Force field.
    pub potential: String,
    pub force_kappa: Real,
    pub force_amp: Real,
    pub force_width: Real,
    pub force_cx: Real,
    pub force_cy: Real,
    pub potential_file: String,
    pub magnetic: String,
    pub force_b: Real,
    pub force_rwidth: Real,
    pub magnetic_file: String,
    // Attenuation.
    pub sigma: CoefficientSpec,
    // Scattering.
    pub scatter_kind: String,
    pub scatter_lambda: Real,
    pub kappa1: CoefficientSpec,
    pub kappa2: CoefficientSpec,
    // Discretization.
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub grid_ntheta: usize,
    pub nodes_boundary: usize,
    pub nodes_dir: usize,
    pub ray_samples: usize,
    pub phase_samples: usize,
    /// Integrator step; 0 = auto (1e-3 x enclosing diameter).
    pub integrator_h: Real,
    // Solvers.
    pub solver_tol: Real,
    pub solver_max_iter: usize,
    pub recon_tol: Real,
    pub recon_max_iter: usize,
    pub recon_epsilon: Real,
    // Verification workload.
    pub verify_trajectories: usize,
    pub verify_drift_h: Real,
    pub verify_santalo_boundary: usize,
    pub verify_santalo_dir: usize,
    pub verify_santalo_ray: usize,
    pub verify_santalo_interior: usize,
    pub verify_santalo_interior_angular: usize,
    pub verify_santalo_fiber: usize,
    pub verify_convexity_boundary: usize,
    pub verify_convexity_tangent: usize,
    pub verify_nontrap_samples: usize,
    pub verify_adjoint_pairs: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain_cx: 0.0,
            domain_cy: 0.0,
            domain_radius: 1.0,
            domain1_cx: 0.0,
            domain1_cy: 0.0,
            domain1_radius: 1.3,
            tau: 0.5,
            potential: "zero".into(),
            force_kappa: 0.1,
            force_amp: 0.3,
            force_width: 1.0,
            force_cx: 0.0,
            force_cy: 0.0,
            potential_file: String::new(),
            magnetic: "zero".into(),
            force_b: 0.2,
            force_rwidth: 1.0,
            magnetic_file: String::new(),
            sigma: CoefficientSpec::zero(),
            scatter_kind: "zero".into(),
            scatter_lambda: 1.0,
            kappa1: CoefficientSpec::zero(),
            kappa2: CoefficientSpec::zero(),
            grid_nx: 64,
            grid_ny: 64,
            grid_ntheta: 16,
            nodes_boundary: 180,
            nodes_dir: 90,
            ray_samples: 256,
            phase_samples: 128,
            integrator_h: 0.0,
            solver_tol: 1e-10,
            solver_max_iter: 500,
            recon_tol: 1e-8,
            recon_max_iter: 200,
            recon_epsilon: 0.0,
            verify_trajectories: 1000,
            verify_drift_h: 1e-3,
            verify_santalo_boundary: 200,
            verify_santalo_dir: 128,
            verify_santalo_ray: 256,
            verify_santalo_interior: 128,
            verify_santalo_interior_angular: 256,
            verify_santalo_fiber: 128,
            verify_convexity_boundary: 64,
            verify_convexity_tangent: 2,
            verify_nontrap_samples: 200,
            verify_adjoint_pairs: 20,
            seed: 0,
        }
    }
}

macro_rules! parse_value {
    ($value:expr, $line:expr, $ty:ty) => {
        $value.parse::<$ty>().map_err(|_| Error::Parse {
            line: $line,
            msg: format!("cannot parse '{}' as {}", $value, stringify!($ty)),
        })?
    };
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected KEY = VALUE, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim(), line_no)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "domain.cx" => self.domain_cx = parse_value!(value, line, Real),
            "domain.cy" => self.domain_cy = parse_value!(value, line, Real),
            "domain.radius" => self.domain_radius = parse_value!(value, line, Real),
            "domain1.cx" => self.domain1_cx = parse_value!(value, line, Real),
            "domain1.cy" => self.domain1_cy = parse_value!(value, line, Real),
            "domain1.radius" => self.domain1_radius = parse_value!(value, line, Real),
            "tau" => self.tau = parse_value!(value, line, Real),
            "force.kind" => match value {
                "zero" => {
                    self.potential = "zero".into();
                    self.magnetic = "zero".into();
                }
                "harmonic" => {
                    self.potential = "harmonic".into();
                    self.magnetic = "zero".into();
                }
                "gaussian" => {
                    self.potential = "gaussian".into();
                    self.magnetic = "zero".into();
                }
                "magnetic" => {
                    self.potential = "zero".into();
                    self.magnetic = "constant".into();
                }
                "radial-magnetic" => {
                    self.potential = "zero".into();
                    self.magnetic = "radial".into();
                }
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown force.kind '{other}'"),
                    })
                }
            },
            "force.potential" => self.potential = validated_choice(
                value,
                &["zero", "harmonic", "gaussian", "grid"],
                line,
            )?,
            "force.kappa" => self.force_kappa = parse_value!(value, line, Real),
            "force.amp" => self.force_amp = parse_value!(value, line, Real),
            "force.width" => self.force_width = parse_value!(value, line, Real),
            "force.cx" => self.force_cx = parse_value!(value, line, Real),
            "force.cy" => self.force_cy = parse_value!(value, line, Real),
            "force.potential_file" => self.potential_file = value.to_string(),
            "force.magnetic" => self.magnetic = validated_choice(
                value,
                &["zero", "constant", "radial", "grid"],
                line,
            )?,
            "force.b" => self.force_b = parse_value!(value, line, Real),
            "force.rwidth" => self.force_rwidth = parse_value!(value, line, Real),
            "force.magnetic_file" => self.magnetic_file = value.to_string(),
            "sigma.kind" => self.sigma.kind = coefficient_kind(value, line)?,
            "sigma.value" => self.sigma.value = parse_value!(value, line, Real),
            "sigma.amp" => self.sigma.amp = parse_value!(value, line, Real),
            "sigma.width" => self.sigma.width = parse_value!(value, line, Real),
            "sigma.aniso" => self.sigma.aniso = parse_value!(value, line, Real),
            "scatter.kind" => self.scatter_kind = validated_choice(
                value,
                &["zero", "separable"],
                line,
            )?,
            "scatter.lambda" => self.scatter_lambda = parse_value!(value, line, Real),
            "kappa1.kind" => self.kappa1.kind = coefficient_kind(value, line)?,
            "kappa1.value" => self.kappa1.value = parse_value!(value, line, Real),
            "kappa1.amp" => self.kappa1.amp = parse_value!(value, line, Real),
            "kappa1.width" => self.kappa1.width = parse_value!(value, line, Real),
            "kappa1.aniso" => self.kappa1.aniso = parse_value!(value, line, Real),
            "kappa2.kind" => self.kappa2.kind = coefficient_kind(value, line)?,
            "kappa2.value" => self.kappa2.value = parse_value!(value, line, Real),
            "kappa2.amp" => self.kappa2.amp = parse_value!(value, line, Real),
            "kappa2.width" => self.kappa2.width = parse_value!(value, line, Real),
            "kappa2.aniso" => self.kappa2.aniso = parse_value!(value, line, Real),
            "grid.nx" => self.grid_nx = parse_value!(value, line, usize),
            "grid.ny" => self.grid_ny = parse_value!(value, line, usize),
            "grid.ntheta" => self.grid_ntheta = parse_value!(value, line, usize),
            "nodes.boundary" => self.nodes_boundary = parse_value!(value, line, usize),
            "nodes.dir" => self.nodes_dir = parse_value!(value, line, usize),
            "rays.samples" => self.ray_samples = parse_value!(value, line, usize),
            "phase.samples" => self.phase_samples = parse_value!(value, line, usize),
            "integrator.h" => self.integrator_h = parse_value!(value, line, Real),
            "solver.tol" => self.solver_tol = parse_value!(value, line, Real),
            "solver.max_iter" => self.solver_max_iter = parse_value!(value, line, usize),
            "recon.tol" => self.recon_tol = parse_value!(value, line, Real),
            "recon.max_iter" => self.recon_max_iter = parse_value!(value, line, usize),
            "recon.epsilon" => self.recon_epsilon = parse_value!(value, line, Real),
            "verify.trajectories" => self.verify_trajectories = parse_value!(value, line, usize),
            "verify.drift_h" => self.verify_drift_h = parse_value!(value, line, Real),
            "verify.santalo_boundary" => {
                self.verify_santalo_boundary = parse_value!(value, line, usize)
            }
            "verify.santalo_dir" => self.verify_santalo_dir = parse_value!(value, line, usize),
            "verify.santalo_ray" => self.verify_santalo_ray = parse_value!(value, line, usize),
            "verify.santalo_interior" => {
                self.verify_santalo_interior = parse_value!(value, line, usize)
            }
            "verify.santalo_interior_angular" => {
                self.verify_santalo_interior_angular = parse_value!(value, line, usize)
            }
            "verify.santalo_fiber" => {
                self.verify_santalo_fiber = parse_value!(value, line, usize)
            }
            "verify.convexity_boundary" => {
                self.verify_convexity_boundary = parse_value!(value, line, usize)
            }
            "verify.convexity_tangent" => {
                self.verify_convexity_tangent = parse_value!(value, line, usize)
            }
            "verify.nontrap_samples" => {
                self.verify_nontrap_samples = parse_value!(value, line, usize)
            }
            "verify.adjoint_pairs" => {
                self.verify_adjoint_pairs = parse_value!(value, line, usize)
            }
            "seed" => self.seed = parse_value!(value, line, u64),
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key '{other}'"),
                })
            }
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("domain.cx", self.domain_cx.to_string());
        kv("domain.cy", self.domain_cy.to_string());
        kv("domain.radius", self.domain_radius.to_string());
        kv("domain1.cx", self.domain1_cx.to_string());
        kv("domain1.cy", self.domain1_cy.to_string());
        kv("domain1.radius", self.domain1_radius.to_string());
        kv("tau", self.tau.to_string());
        kv("force.potential", self.potential.clone());
        kv("force.kappa", self.force_kappa.to_string());
        kv("force.amp", self.force_amp.to_string());
        kv("force.width", self.force_width.to_string());
        kv("force.cx", self.force_cx.to_string());
        kv("force.cy", self.force_cy.to_string());
        if !self.potential_file.is_empty() {
            kv("force.potential_file", self.potential_file.clone());
        }
        kv("force.magnetic", self.magnetic.clone());
        kv("force.b", self.force_b.to_string());
        kv("force.rwidth", self.force_rwidth.to_string());
        if !self.magnetic_file.is_empty() {
            kv("force.magnetic_file", self.magnetic_file.clone());
        }
        kv("sigma.kind", self.sigma.kind_str().into());
        kv("sigma.value", self.sigma.value.to_string());
        kv("sigma.amp", self.sigma.amp.to_string());
        kv("sigma.width", self.sigma.width.to_string());
        kv("sigma.aniso", self.sigma.aniso.to_string());
        kv("scatter.kind", self.scatter_kind.clone());
        kv("scatter.lambda", self.scatter_lambda.to_string());
        kv("kappa1.kind", self.kappa1.kind_str().into());
        kv("kappa1.value", self.kappa1.value.to_string());
        kv("kappa1.amp", self.kappa1.amp.to_string());
        kv("kappa1.width", self.kappa1.width.to_string());
        kv("kappa1.aniso", self.kappa1.aniso.to_string());
        kv("kappa2.kind", self.kappa2.kind_str().into());
        kv("kappa2.value", self.kappa2.value.to_string());
        kv("kappa2.amp", self.kappa2.amp.to_string());
        kv("kappa2.width", self.kappa2.width.to_string());
        kv("kappa2.aniso", self.kappa2.aniso.to_string());
        kv("grid.nx", self.grid_nx.to_string());
        kv("grid.ny", self.grid_ny.to_string());
        kv("grid.ntheta", self.grid_ntheta.to_string());
        kv("nodes.boundary", self.nodes_boundary.to_string());
        kv("nodes.dir", self.nodes_dir.to_string());
        kv("rays.samples", self.ray_samples.to_string());
        kv("phase.samples", self.phase_samples.to_string());
        kv("integrator.h", self.integrator_h.to_string());
        kv("solver.tol", self.solver_tol.to_string());
        kv("solver.max_iter", self.solver_max_iter.to_string());
        kv("recon.tol", self.recon_tol.to_string());
        kv("recon.max_iter", self.recon_max_iter.to_string());
        kv("recon.epsilon", self.recon_epsilon.to_string());
        kv("verify.trajectories", self.verify_trajectories.to_string());
        kv("verify.drift_h", self.verify_drift_h.to_string());
        kv(
            "verify.santalo_boundary",
            self.verify_santalo_boundary.to_string(),
        );
        kv("verify.santalo_dir", self.verify_santalo_dir.to_string());
        kv("verify.santalo_ray", self.verify_santalo_ray.to_string());
        kv(
            "verify.santalo_interior",
            self.verify_santalo_interior.to_string(),
        );
        kv(
            "verify.santalo_interior_angular",
            self.verify_santalo_interior_angular.to_string(),
        );
        kv("verify.santalo_fiber", self.verify_santalo_fiber.to_string());
        kv(
            "verify.convexity_boundary",
            self.verify_convexity_boundary.to_string(),
        );
        kv(
            "verify.convexity_tangent",
            self.verify_convexity_tangent.to_string(),
        );
        kv(
            "verify.nontrap_samples",
            self.verify_nontrap_samples.to_string(),
        );
        kv("verify.adjoint_pairs", self.verify_adjoint_pairs.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    pub fn omega(&self) -> Domain<Real> {
        Domain::disc([self.domain_cx, self.domain_cy], self.domain_radius)
    }

    pub fn omega1(&self) -> Domain<Real> {
        Domain::disc([self.domain1_cx, self.domain1_cy], self.domain1_radius)
    }

    pub fn force(&self) -> Result<ForceField<Real>> {
        let potential = match self.potential.as_str() {
            "zero" => Potential::Zero,
            "harmonic" => Potential::Harmonic {
                kappa: self.force_kappa,
            },
            "gaussian" => Potential::GaussianBump {
                amp: self.force_amp,
                width: self.force_width,
                center: [self.force_cx, self.force_cy],
            },
            "grid" => {
                if self.potential_file.is_empty() {
                    return Err(Error::InvalidArgument(
                        "force.potential = grid requires force.potential_file".into(),
                    ));
                }
                let img = read_grid_image(Path::new(&self.potential_file))?;
                Potential::Grid(GridField::new(img.grid, img.values)?)
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown potential '{other}'"
                )))
            }
        };
        let magnetic = match self.magnetic.as_str() {
            "zero" => Magnetic::Zero,
            "constant" => Magnetic::Constant { b: self.force_b },
            "radial" => Magnetic::Radial {
                b0: self.force_b,
                width: self.force_rwidth,
            },
            "grid" => {
                if self.magnetic_file.is_empty() {
                    return Err(Error::InvalidArgument(
                        "force.magnetic = grid requires force.magnetic_file".into(),
                    ));
                }
                let img = read_grid_image(Path::new(&self.magnetic_file))?;
                Magnetic::Grid(GridField::new(img.grid, img.values)?)
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown magnetic spec '{other}'"
                )))
            }
        };
        Ok(ForceField::new(potential, magnetic))
    }

    /// Scene over the enclosing domain (validates `tau` against it).
    pub fn scene(&self) -> Result<Scene<Real>> {
        self.validate()?;
        Scene::new(self.omega1(), self.force()?, self.tau)
    }

    /// Scene restricted to the inner domain (same force and energy).
    pub fn scene_inner(&self) -> Result<Scene<Real>> {
        self.validate()?;
        Scene::new(self.omega(), self.force()?, self.tau)
    }

    pub fn sigma_field(&self) -> AttenuationField<Real> {
        if self.sigma.is_zero() {
            AttenuationField::zero()
        } else if self.sigma.kind == CoefficientKind::Constant {
            AttenuationField::constant(self.sigma.value)
        } else {
            AttenuationField::anisotropic(self.sigma.as_phase_fn(), true)
        }
    }

    pub fn scattering_kernel(&self) -> ScatteringKernel<Real> {
        if self.scatter_kind == "zero" || self.kappa1.is_zero() || self.kappa2.is_zero() {
            ScatteringKernel::Zero
        } else {
            let lambda = self.scatter_lambda;
            let k1 = self.kappa1.as_phase_fn();
            let scaled: PhaseFn<Real> = Arc::new(move |x, th| lambda * k1(x, th));
            ScatteringKernel::Separable {
                kappa1: scaled,
                kappa2: self.kappa2.as_phase_fn(),
            }
        }
    }

    pub fn has_scattering(&self) -> bool {
        self.scatter_kind == "separable"
            && !self.kappa1.is_zero()
            && !self.kappa2.is_zero()
            && self.scatter_lambda != 0.0
    }

    pub fn spatial_grid(&self) -> SpatialGrid<Real> {
        SpatialGrid::covering(&self.omega1(), self.grid_nx, self.grid_ny)
    }

    pub fn phase_grid(&self) -> Result<PhaseGrid<Real>> {
        PhaseGrid::new(self.spatial_grid(), self.grid_ntheta)
    }

    pub fn boundary_layout(&self, scene: &Scene<Real>) -> Result<Arc<BoundaryLayout<Real>>> {
        Ok(Arc::new(boundary_measure_nodes(
            &scene.domain,
            &scene.force,
            &scene.shell,
            self.nodes_boundary,
            self.nodes_dir,
        )?))
    }

    pub fn integrator(&self, scene: &Scene<Real>) -> crate::trajectory::IntegratorOptions<Real> {
        let mut opts =
            crate::trajectory::IntegratorOptions::for_domain(&scene.domain, &scene.shell);
        if self.integrator_h > 0.0 {
            opts.h = self.integrator_h;
        }
        opts
    }

    pub fn ray_options(&self, scene: &Scene<Real>) -> RayOptions<Real> {
        RayOptions {
            quad_samples: self.ray_samples,
            integrator: Some(self.integrator(scene)),
        }
    }

    pub fn transport_options(&self, scene: &Scene<Real>) -> TransportOptions<Real> {
        TransportOptions {
            integrator: Some(self.integrator(scene)),
            quad_samples: self.phase_samples,
            tol: self.solver_tol,
            max_iter: self.solver_max_iter,
        }
    }

    pub fn scatter_options(&self, scene: &Scene<Real>) -> ScatterOptions<Real> {
        ScatterOptions {
            ray: self.ray_options(scene),
            n_theta: self.grid_ntheta,
            phase_quad_samples: self.phase_samples,
            ..ScatterOptions::default()
        }
    }

    pub fn santalo_options(&self, scene: &Scene<Real>) -> SantaloOptions<Real> {
        SantaloOptions {
            n_boundary: self.verify_santalo_boundary,
            n_dir: self.verify_santalo_dir,
            n_ray: self.verify_santalo_ray,
            n_interior: self.verify_santalo_interior,
            n_interior_angular: self.verify_santalo_interior_angular,
            n_fiber: self.verify_santalo_fiber,
            integrator: Some(self.integrator(scene)),
        }
    }

    /// Structural validation (domain nesting, grid sizes, energy level).
    pub fn validate(&self) -> Result<()> {
        if self.domain_radius <= 0.0 || self.domain1_radius <= 0.0 {
            return Err(Error::InvalidArgument("domain radii must be positive".into()));
        }
        if !self.omega().strictly_inside(&self.omega1(), 256) {
            return Err(Error::InvalidArgument(
                "the inner domain must lie strictly inside the enclosing domain".into(),
            ));
        }
        if self.grid_nx < 2 || self.grid_ny < 2 {
            return Err(Error::InvalidArgument("grid must be at least 2x2".into()));
        }
        if self.grid_ntheta < 4 || self.grid_ntheta % 2 != 0 {
            return Err(Error::InvalidArgument(
                "grid.ntheta must be even and >= 4".into(),
            ));
        }
        if self.nodes_boundary < 2 || self.nodes_dir < 2 {
            return Err(Error::InvalidArgument("node counts must be >= 2".into()));
        }
        // tau > max phi over the closed enclosing domain.
        crate::geometry::EnergyShell::new(self.tau, &self.force()?, &self.omega1())?;
        Ok(())
    }
}

fn validated_choice(value: &str, choices: &[&str], line: usize) -> Result<String> {
    if choices.contains(&value) {
        Ok(value.to_string())
    } else {
        Err(Error::Parse {
            line,
            msg: format!("expected one of {choices:?}, got '{value}'"),
        })
    }
}

fn coefficient_kind(value: &str, line: usize) -> Result<CoefficientKind> {
    match value {
        "zero" => Ok(CoefficientKind::Zero),
        "constant" => Ok(CoefficientKind::Constant),
        "gaussian" => Ok(CoefficientKind::Gaussian),
        "cosine" => Ok(CoefficientKind::Cosine),
        other => Err(Error::Parse {
            line,
            msg: format!("unknown coefficient kind '{other}'"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_force_shorthand() {
        let cfg = ExperimentConfig::parse("force.kind = magnetic\nforce.b = 0.2\n").unwrap();
        assert_eq!(cfg.potential, "zero");
        assert_eq!(cfg.magnetic, "constant");
        assert_eq!(cfg.force_b, 0.2);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = ExperimentConfig::parse("tau = 1.0\nbogus.key = 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
        let err = ExperimentConfig::parse("tau == 1.0x\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn serialize_parse_roundtrip_idempotent() {
        let text = "tau = 1.25\nforce.kind = gaussian\nforce.amp = 0.3\n\
                    sigma.kind = constant\nsigma.value = 0.4\ngrid.nx = 48\nseed = 7\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let ser = cfg.serialize();
        let cfg2 = ExperimentConfig::parse(&ser).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(ser, cfg2.serialize());
    }

    #[test]
    fn rejects_low_tau_at_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.potential = "gaussian".into();
        cfg.force_amp = 0.9;
        cfg.tau = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::ShellInvalid { .. })));
        cfg.tau = 1.1;
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_domain_not_nested() {
        let mut cfg = ExperimentConfig::default();
        cfg.domain1_radius = 0.9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ExperimentConfig::parse(
            "# comment line\n\n  tau = 0.75  # trailing comment\n",
        )
        .unwrap();
        assert_eq!(cfg.tau, 0.75);
    }
}
