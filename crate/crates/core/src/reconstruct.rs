//! Source recovery from boundary data: conjugate gradients on the normal
//! equations (the workhorse), Landweber iteration (cross-check), and the
//! stability / injectivity probes.
//!
//! Both solvers need only the exact adjoint pair supplied by the transpose
//! path; iterates are masked to the support domain every step.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary::{BoundaryLayout, BoundarySinogram};
use crate::dense::{symmetric_eigenvalues, DenseMatrix};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::grid::{GridImage, SourceImage, SpatialGrid};
use crate::ray::RayOperator;
use crate::scalar::Scalar;
use crate::scatter::ScatterMeasurement;

/// A measurement operator with an exact discrete transpose.
pub trait ForwardOperator<S: Scalar>: Sync {
    fn grid(&self) -> &SpatialGrid<S>;
    fn layout(&self) -> &Arc<BoundaryLayout<S>>;
    fn apply(&self, f: &GridImage<S>) -> Result<BoundarySinogram<S>>;
    fn apply_transpose(&self, g: &BoundarySinogram<S>) -> Result<GridImage<S>>;
}

impl<S: Scalar> ForwardOperator<S> for RayOperator<S> {
    fn grid(&self) -> &SpatialGrid<S> {
        RayOperator::grid(self)
    }
    fn layout(&self) -> &Arc<BoundaryLayout<S>> {
        RayOperator::layout(self)
    }
    fn apply(&self, f: &GridImage<S>) -> Result<BoundarySinogram<S>> {
        self.forward(f)
    }
    fn apply_transpose(&self, g: &BoundarySinogram<S>) -> Result<GridImage<S>> {
        self.adjoint(g)
    }
}

impl<S: Scalar> ForwardOperator<S> for ScatterMeasurement<S> {
    fn grid(&self) -> &SpatialGrid<S> {
        ScatterMeasurement::grid(self)
    }
    fn layout(&self) -> &Arc<BoundaryLayout<S>> {
        ScatterMeasurement::layout(self)
    }
    fn apply(&self, f: &GridImage<S>) -> Result<BoundarySinogram<S>> {
        self.forward(f)
    }
    fn apply_transpose(&self, g: &BoundarySinogram<S>) -> Result<GridImage<S>> {
        self.adjoint(g)
    }
}

/// Frozen inverse-problem configuration: the measurement operator, the
/// support constraint, and the Tikhonov weight.
pub struct InverseProblemSetup<'a, S: Scalar> {
    pub operator: &'a dyn ForwardOperator<S>,
    /// Reconstruction support; iterates are masked to it every step.
    pub support: Domain<S>,
    /// Tikhonov regularization weight (>= 0).
    pub epsilon: S,
}

impl<'a, S: Scalar> InverseProblemSetup<'a, S> {
    pub fn new(operator: &'a dyn ForwardOperator<S>, support: Domain<S>) -> Self {
        InverseProblemSetup {
            operator,
            support,
            epsilon: S::zero(),
        }
    }

    pub fn with_epsilon(mut self, epsilon: S) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn check_data(&self, data: &BoundarySinogram<S>) -> Result<()> {
        if data.values.len() != self.operator.layout().len() {
            return Err(Error::NodeSetMismatch {
                expected: self.operator.layout().len(),
                got: data.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions<S: Scalar> {
    pub max_iter: usize,
    /// Relative tolerance on the normal-equation residual.
    pub tol: S,
}

impl<S: Scalar> Default for SolveOptions<S> {
    fn default() -> Self {
        SolveOptions {
            max_iter: 200,
            tol: S::of(1e-8),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult<S: Scalar> {
    pub f_hat: SourceImage<S>,
    /// Data-space residual norms `||d - A f_m||` per iteration
    /// (nonincreasing for CG on the normal equations at epsilon = 0).
    pub residual_history: Vec<S>,
    pub iterations: usize,
    pub converged: bool,
    /// Final `||d - A f|| / ||d||`.
    pub rel_data_residual: S,
}

/// Conjugate gradients on `(A^T A + eps I) f = A^T d`, restricted to the
/// support mask (CGLS form, so the data residual is tracked for free).
pub fn reconstruct_cgne<S: Scalar>(
    setup: &InverseProblemSetup<'_, S>,
    data: &BoundarySinogram<S>,
    opts: &SolveOptions<S>,
) -> Result<ReconstructionResult<S>> {
    setup.check_data(data)?;
    let op = setup.operator;
    let eps = setup.epsilon;
    let grid = *op.grid();
    let data_norm = data.norm();

    let mut f = GridImage::zeros(grid);
    let mut s = data.clone(); // s = d - A f
    let mut r = op.apply_transpose(&s)?;
    r.mask_to(&setup.support);
    let mut gamma = r.dot(&r);
    let gamma0 = gamma;
    let mut history = vec![data_norm];

    if gamma0 == S::zero() || data_norm == S::zero() {
        return Ok(ReconstructionResult {
            f_hat: SourceImage::new(f, &setup.support),
            residual_history: history,
            iterations: 0,
            converged: true,
            rel_data_residual: S::zero(),
        });
    }

    let mut p = r.clone();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let q = op.apply(&p)?;
        let denom = q.dot(&q) + eps * p.dot(&p);
        if denom <= S::zero() || !denom.is_finite() {
            return Err(Error::NonFinite {
                context: "cgne curvature".into(),
                iteration: it,
            });
        }
        let alpha = gamma / denom;
        f.axpy(alpha, &p);
        f.mask_to(&setup.support);
        s.axpy(-alpha, &q);
        let mut r_new = op.apply_transpose(&s)?;
        r_new.mask_to(&setup.support);
        if eps > S::zero() {
            r_new.axpy(-eps, &f);
        }
        let gamma_new = r_new.dot(&r_new);
        if !gamma_new.is_finite() {
            return Err(Error::NonFinite {
                context: "cgne residual".into(),
                iteration: it,
            });
        }
        history.push(s.norm());
        if gamma_new.sqrt() <= opts.tol * gamma0.sqrt() {
            converged = true;
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        let mut p_next = r_new.clone();
        p_next.axpy(beta, &p);
        p = p_next;
        r = r_new;
    }
    let _ = r;
    let rel = history.last().copied().unwrap_or(S::zero()) / data_norm;
    Ok(ReconstructionResult {
        f_hat: SourceImage::new(f, &setup.support),
        residual_history: history,
        iterations,
        converged,
        rel_data_residual: rel,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LandweberOptions<S: Scalar> {
    /// Step size; `None` picks `1 / lambda_max` from power iteration.
    pub step: Option<S>,
    pub max_iter: usize,
    /// Stop when `||d - A f|| <= tol * ||d||`.
    pub tol: S,
    pub seed: u64,
}

impl<S: Scalar> Default for LandweberOptions<S> {
    fn default() -> Self {
        LandweberOptions {
            step: None,
            max_iter: 500,
            tol: S::of(1e-8),
            seed: 0x4c57,
        }
    }
}

/// Landweber iteration `f <- mask(f + step A^T (d - A f))`. Divergence
/// (growing data residual) is detected and reported as an error.
pub fn reconstruct_landweber<S: Scalar>(
    setup: &InverseProblemSetup<'_, S>,
    data: &BoundarySinogram<S>,
    opts: &LandweberOptions<S>,
) -> Result<ReconstructionResult<S>> {
    setup.check_data(data)?;
    let op = setup.operator;
    let grid = *op.grid();
    let data_norm = data.norm().max(S::of(1e-300));
    let step = match opts.step {
        Some(s) => s,
        None => {
            let lmax = power_iteration_norm(op, &setup.support, 30, opts.seed)?;
            S::one() / lmax.max(S::of(1e-300))
        }
    };

    let mut f = GridImage::zeros(grid);
    let mut history = Vec::with_capacity(opts.max_iter + 1);
    history.push(data.norm());
    let mut converged = false;
    let mut iterations = 0;
    let mut grow_streak = 0usize;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let current = op.apply(&f)?;
        let mut s = data.clone();
        s.axpy(-S::one(), &current);
        let res = s.norm();
        if !res.is_finite() {
            return Err(Error::NonFinite {
                context: "landweber residual".into(),
                iteration: it,
            });
        }
        if step != S::zero() {
            if res > *history.last().unwrap() * S::of(1.0 + 1e-12) {
                grow_streak += 1;
                if grow_streak >= 5 {
                    return Err(Error::LandweberDiverged { iteration: it });
                }
            } else {
                grow_streak = 0;
            }
        }
        history.push(res);
        if res <= opts.tol * data_norm {
            converged = true;
            break;
        }
        let mut update = op.apply_transpose(&s)?;
        update.mask_to(&setup.support);
        f.axpy(step, &update);
    }
    let rel = history.last().copied().unwrap_or(S::zero()) / data_norm;
    Ok(ReconstructionResult {
        f_hat: SourceImage::new(f, &setup.support),
        residual_history: history,
        iterations,
        converged,
        rel_data_residual: rel,
    })
}

/// Largest eigenvalue of the masked normal operator `P A^T A P` by power
/// iteration (estimates `||A||^2`).
pub fn power_iteration_norm<S: Scalar>(
    op: &dyn ForwardOperator<S>,
    support: &Domain<S>,
    iters: usize,
    seed: u64,
) -> Result<S> {
    let grid = *op.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = GridImage::new(grid, (0..grid.len()).map(|_| S::of(rng.gen::<f64>() - 0.5)).collect())?;
    v.mask_to(support);
    let mut lambda = S::zero();
    for _ in 0..iters {
        let n = v.l2_norm();
        if n == S::zero() {
            return Ok(S::zero());
        }
        v.scale(S::one() / n);
        let av = op.apply(&v)?;
        let mut nv = op.apply_transpose(&av)?;
        nv.mask_to(support);
        lambda = v.dot(&nv); // Rayleigh quotient, ||v|| = 1
        v = nv;
    }
    Ok(lambda)
}

/// One stability sample: the two norms of the estimate
/// `||f|| <= C ||A^T A f||_(H1)`.
#[derive(Clone, Copy, Debug)]
pub struct StabilityPair<S: Scalar> {
    pub f_l2: S,
    pub normal_h1: S,
}

#[derive(Clone, Debug)]
pub struct StabilityReport<S: Scalar> {
    pub pairs: Vec<StabilityPair<S>>,
    /// Empirical constant: max over the ensemble of `f_l2 / normal_h1`.
    pub c_empirical: S,
    /// Spread `max ratio / min ratio` across the ensemble.
    pub ratio_spread: S,
}

/// Evaluate `||f||_(L2(support))` against `||A^T A f||_(H1(omega1 grid))`
/// over a phantom ensemble and report the empirical stability constant.
pub fn stability_probe<S: Scalar>(
    op: &dyn ForwardOperator<S>,
    omega1: &Domain<S>,
    phantoms: &[SourceImage<S>],
) -> Result<StabilityReport<S>> {
    let grid = *op.grid();
    let mask = grid.inside_mask(omega1);
    let mut pairs = Vec::with_capacity(phantoms.len());
    let mut ratios = Vec::new();
    for f in phantoms {
        let sino = op.apply(f.image())?;
        let normal = op.apply_transpose(&sino)?;
        let h1 = normal.h1_norm(&mask);
        let l2 = f.l2_norm();
        pairs.push(StabilityPair {
            f_l2: l2,
            normal_h1: h1,
        });
        if l2 > S::zero() && h1 > S::zero() {
            ratios.push(l2 / h1);
        }
    }
    let c_empirical = ratios.iter().fold(S::zero(), |m, &r| m.max(r));
    let min_ratio = ratios.iter().fold(S::infinity(), |m, &r| m.min(r));
    Ok(StabilityReport {
        pairs,
        c_empirical,
        ratio_spread: if ratios.is_empty() {
            S::zero()
        } else {
            c_empirical / min_ratio
        },
    })
}

#[derive(Clone, Debug)]
pub struct InjectivityReport<S: Scalar> {
    pub n_probes: usize,
    pub min_eigenvalue: S,
    pub max_eigenvalue: S,
    pub condition: S,
}

/// Gram-matrix injectivity probe: sinograms of one-hot phantoms on a
/// subsampled interior lattice must be linearly independent.
pub fn injectivity_probe<S: Scalar>(
    op: &dyn ForwardOperator<S>,
    support: &Domain<S>,
    stride: usize,
) -> Result<InjectivityReport<S>> {
    let grid = *op.grid();
    let mut probes = Vec::new();
    for iy in (0..grid.ny).step_by(stride.max(1)) {
        for ix in (0..grid.nx).step_by(stride.max(1)) {
            if support.inside(grid.node(ix, iy)) {
                probes.push(grid.index(ix, iy));
            }
        }
    }
    let sinos: Vec<BoundarySinogram<S>> = probes
        .iter()
        .map(|&idx| {
            let mut f = GridImage::zeros(grid);
            f.values[idx] = S::one();
            op.apply(&f)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = sinos.len();
    let mut gram = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = sinos[i].dot(&sinos[j]);
            *gram.at_mut(i, j) = v;
            *gram.at_mut(j, i) = v;
        }
    }
    let eigs = symmetric_eigenvalues(&gram, 60);
    let min_eig = eigs.first().copied().unwrap_or(S::zero());
    let max_eig = eigs.last().copied().unwrap_or(S::zero());
    Ok(InjectivityReport {
        n_probes: n,
        min_eigenvalue: min_eig,
        max_eigenvalue: max_eig,
        condition: if min_eig > S::zero() {
            max_eig / min_eig
        } else {
            S::infinity()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::boundary_measure_nodes;
    use crate::geometry::{ForceField, Scene};
    use crate::phantom;
    use crate::ray::{build_ray_operator, RayOptions};
    use crate::transport::AttenuationField;

    fn small_ray_op(n: usize, nb: usize, nd: usize) -> RayOperator<f64> {
        let scene = Scene::new(Domain::disc([0.0, 0.0], 1.3), ForceField::zero(), 0.5).unwrap();
        let grid = SpatialGrid::covering(&scene.domain, n, n);
        let layout = Arc::new(
            boundary_measure_nodes(&scene.domain, &scene.force, &scene.shell, nb, nd).unwrap(),
        );
        build_ray_operator(
            &scene,
            &AttenuationField::zero(),
            grid,
            layout,
            &RayOptions {
                quad_samples: 128,
                ..RayOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_data_reconstructs_zero_in_zero_iterations() {
        let op = small_ray_op(21, 24, 12);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let setup = InverseProblemSetup::new(&op, omega);
        let data = BoundarySinogram::zeros(op.layout().clone(), crate::boundary::DomainTag::Enclosing);
        let res = reconstruct_cgne(&setup, &data, &SolveOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
        assert!(res.f_hat.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_planted_bump() {
        // Rays must oversample the unknowns by a healthy factor, otherwise
        // invisible modes stall the error while the data residual vanishes.
        let op = small_ray_op(33, 96, 48);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let f_star = phantom::gaussian_bump(*op.grid(), &omega);
        let data = op.forward(f_star.image()).unwrap();
        let setup = InverseProblemSetup::new(&op, omega);
        let res = reconstruct_cgne(
            &setup,
            &data,
            &SolveOptions {
                max_iter: 150,
                tol: 1e-10,
            },
        )
        .unwrap();
        let mut diff = res.f_hat.image().clone();
        diff.axpy(-1.0, f_star.image());
        let rel = diff.l2_norm() / f_star.l2_norm();
        assert!(rel < 0.05, "reconstruction error {rel}");
        // Data residual history is nonincreasing for plain CGLS.
        for w in res.residual_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "history not monotone: {w:?}");
        }
    }

    #[test]
    fn reconstruction_linearity_in_data() {
        let op = small_ray_op(25, 32, 16);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let f_star = phantom::gaussian_bump(*op.grid(), &omega);
        let data = op.forward(f_star.image()).unwrap();
        let mut data2 = data.clone();
        data2.values.iter_mut().for_each(|v| *v *= 2.0);
        let setup = InverseProblemSetup::new(&op, omega);
        let opts = SolveOptions {
            max_iter: 80,
            tol: 1e-12,
        };
        let r1 = reconstruct_cgne(&setup, &data, &opts).unwrap();
        let r2 = reconstruct_cgne(&setup, &data2, &opts).unwrap();
        let mut diff = r2.f_hat.image().clone();
        diff.axpy(-2.0, r1.f_hat.image());
        let rel = diff.l2_norm() / (2.0 * r1.f_hat.l2_norm());
        assert!(rel < 1e-8, "linearity violated: {rel}");
    }

    #[test]
    fn landweber_matches_cgne() {
        let op = small_ray_op(13, 64, 32);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let f_star = phantom::gaussian_bump(*op.grid(), &omega);
        let data = op.forward(f_star.image()).unwrap();
        let setup = InverseProblemSetup::new(&op, omega);
        let cg = reconstruct_cgne(
            &setup,
            &data,
            &SolveOptions {
                max_iter: 300,
                tol: 1e-13,
            },
        )
        .unwrap();
        let lw = reconstruct_landweber(
            &setup,
            &data,
            &LandweberOptions {
                max_iter: 3000,
                tol: 1e-10,
                ..LandweberOptions::default()
            },
        )
        .unwrap();
        let mut diff = lw.f_hat.image().clone();
        diff.axpy(-1.0, cg.f_hat.image());
        let rel = diff.l2_norm() / cg.f_hat.l2_norm();
        assert!(rel < 1e-4, "landweber vs cgne {rel}");
    }

    #[test]
    fn landweber_zero_step_keeps_initial() {
        let op = small_ray_op(17, 16, 8);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let f_star = phantom::gaussian_bump(*op.grid(), &omega);
        let data = op.forward(f_star.image()).unwrap();
        let setup = InverseProblemSetup::new(&op, omega);
        let res = reconstruct_landweber(
            &setup,
            &data,
            &LandweberOptions {
                step: Some(0.0),
                max_iter: 5,
                tol: 1e-12,
                ..LandweberOptions::default()
            },
        )
        .unwrap();
        assert!(res.f_hat.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn landweber_detects_divergence() {
        let op = small_ray_op(17, 16, 8);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let f_star = phantom::gaussian_bump(*op.grid(), &omega);
        let data = op.forward(f_star.image()).unwrap();
        let setup = InverseProblemSetup::new(&op, omega);
        let lmax = power_iteration_norm(&op, &setup.support, 30, 1).unwrap();
        let res = reconstruct_landweber(
            &setup,
            &data,
            &LandweberOptions {
                step: Some(3.0 / lmax), // beyond 2 / lambda_max
                max_iter: 200,
                tol: 1e-12,
                ..LandweberOptions::default()
            },
        );
        assert!(matches!(res, Err(Error::LandweberDiverged { .. })));
    }

    #[test]
    fn power_iteration_matches_dense_eigenvalue() {
        let op = small_ray_op(13, 16, 8);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let grid = *op.grid();
        let est = power_iteration_norm(&op, &omega, 60, 3).unwrap();
        // Dense assembly of the masked normal operator.
        let inside: Vec<usize> = grid
            .node_iter()
            .enumerate()
            .filter(|(_, (_, _, x))| omega.inside(*x))
            .map(|(i, _)| i)
            .collect();
        let n = inside.len();
        let mut m = DenseMatrix::zeros(n, n);
        for (c, &idx) in inside.iter().enumerate() {
            let mut f = GridImage::zeros(grid);
            f.values[idx] = 1.0;
            let mut nf = op.normal(&f).unwrap();
            nf.mask_to(&omega);
            for (r, &ridx) in inside.iter().enumerate() {
                *m.at_mut(r, c) = nf.values[ridx];
            }
        }
        let eigs = symmetric_eigenvalues(&m, 60);
        let dense_max = *eigs.last().unwrap();
        assert!(
            (est - dense_max).abs() / dense_max < 0.05,
            "power {est} vs dense {dense_max}"
        );
    }

    #[test]
    fn stability_ratios_bounded_and_scale_invariant() {
        let op = small_ray_op(25, 32, 16);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let omega1 = Domain::disc([0.0, 0.0], 1.3);
        let phantoms = phantom::band_limited_ensemble(*op.grid(), &omega, 6, 3, 11);
        let report = stability_probe(&op, &omega1, &phantoms).unwrap();
        assert!(report.ratio_spread < 50.0, "spread {}", report.ratio_spread);
        // Doubling a phantom leaves the ratio unchanged to round-off.
        let mut doubled_img = phantoms[0].image().clone();
        doubled_img.scale(2.0);
        let doubled = SourceImage::new(doubled_img, &omega);
        let single = stability_probe(&op, &omega1, &[phantoms[0].clone(), doubled]).unwrap();
        let r0 = single.pairs[0].f_l2 / single.pairs[0].normal_h1;
        let r1 = single.pairs[1].f_l2 / single.pairs[1].normal_h1;
        assert!((r0 - r1).abs() / r0 < 1e-10, "{r0} vs {r1}");
    }

    #[test]
    fn gram_matrix_numerically_nonsingular() {
        let op = small_ray_op(17, 24, 12);
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let report = injectivity_probe(&op, &omega, 3).unwrap();
        assert!(report.n_probes > 10);
        assert!(report.min_eigenvalue > 0.0);
        assert!(report.condition.is_finite(), "condition {}", report.condition);
    }
}
