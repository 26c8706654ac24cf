use curvtomo::boundary::*;
use curvtomo::geometry::{Domain, ForceField, Scene};
use curvtomo::grid::{GridImage, SpatialGrid};
use curvtomo::ray::*;
use curvtomo::transport::AttenuationField;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    for (force, name) in [(ForceField::zero(), "F=0"), (ForceField::constant_magnetic(0.1), "weak-b")] {
        let scene = Scene::new(Domain::disc([0.0, 0.0], 1.3), force, 0.5).unwrap();
        let grid = SpatialGrid::covering(&scene.domain, 64, 64);
        let sigma = AttenuationField::zero();
        let omega = Domain::disc([0.0, 0.0], 1.0);
        let f = GridImage::from_fn(grid, |x: [f64; 2]| (-(x[0] * x[0] + x[1] * x[1]) / 0.2).exp());
        for (nb, nd, fiber, quad) in [(360usize, 180usize, 64usize, 256usize), (720, 360, 128, 512)] {
            let t = Instant::now();
            let layout = Arc::new(boundary_measure_nodes(&scene.domain, &scene.force, &scene.shell, nb, nd).unwrap());
            let op = build_ray_operator(&scene, &sigma, grid, layout, &RayOptions { quad_samples: quad, ..Default::default() }).unwrap();
            let g = op.forward(&f).unwrap();
            let mut tr = op.adjoint(&g).unwrap();
            tr.mask_to(&omega);
            let mut cont = continuous_adjoint(&g, &scene, &sigma, grid, &omega,
                &ContinuousAdjointOptions { n_fiber: fiber, integrator: None }).unwrap();
            cont.mask_to(&omega);
            let mut diff = tr.clone();
            diff.axpy(-1.0, &cont);
            println!("{name} nodes {nb}x{nd} fiber {fiber}: rel L2 {:.6} ({:?})",
                diff.l2_norm() / cont.l2_norm(), t.elapsed());
        }
    }
}
