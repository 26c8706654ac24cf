use curvtomo::boundary::*;
use curvtomo::geometry::{Domain, ForceField, Magnetic, Scene};
use curvtomo::grid::{GridImage, SpatialGrid};
use curvtomo::phantom;
use curvtomo::ray::*;
use curvtomo::reconstruct::*;
use curvtomo::transport::AttenuationField;
use std::sync::Arc;
use std::time::Instant;

fn accept_force() -> ForceField<f64> {
    ForceField::gaussian_bump(0.3, 1.0, [0.0, 0.0]).with_magnetic(Magnetic::Constant { b: 0.2 })
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();

    if which == "santalo" || which.is_empty() {
        // Criterion 2: santalo at (200,128,256) and doubled, accept force field.
        let dom = Domain::<f64>::unit_disc();
        let force = accept_force();
        let scene = Scene::new(dom.clone(), force.clone(), 1.0).unwrap();
        let fns: [&(dyn Fn([f64; 2], [f64; 2]) -> f64 + Sync); 3] = [
            &|_, _| 1.0,
            &|x, _| (-(x[0] * x[0] + x[1] * x[1])).exp(),
            &|x, th| (-(x[0] * x[0] + x[1] * x[1])).exp() * th[1].atan2(th[0]).cos(),
        ];
        let base = SantaloOptions { n_boundary: 200, n_dir: 128, n_ray: 256, n_interior: 128, n_interior_angular: 256, n_fiber: 128, integrator: None };
        let t = Instant::now();
        let r1 = santalo_check_many(&fns, &dom, &scene.force, &scene.shell, &base).unwrap();
        println!("base ({:?}):", t.elapsed());
        for r in &r1 { println!("  lhs {:.8e} rhs {:.8e} rel {:.3e}", r.lhs, r.rhs, r.rel_err); }
        let t = Instant::now();
        let r2 = santalo_check_many(&fns, &dom, &scene.force, &scene.shell, &base.doubled()).unwrap();
        println!("doubled ({:?}):", t.elapsed());
        for (a, b) in r1.iter().zip(&r2) {
            println!("  rel {:.3e} -> {:.3e} ratio {:.6}", a.rel_err, b.rel_err, a.rel_err / b.rel_err);
        }
    }

    if which == "adjoint4" || which.is_empty() {
        // Criterion 4: continuous vs transpose at 64^2 x 64 angles.
        for (force, name) in [(ForceField::zero(), "F=0"), (ForceField::constant_magnetic(0.1), "weak-b")] {
            let scene = Scene::new(Domain::disc([0.0, 0.0], 1.3), force, 0.5).unwrap();
            let grid = SpatialGrid::covering(&scene.domain, 64, 64);
            let sigma = AttenuationField::zero();
            for (nb, nd) in [(360usize, 180usize), (512, 256)] {
                let t = Instant::now();
                let layout = Arc::new(boundary_measure_nodes(&scene.domain, &scene.force, &scene.shell, nb, nd).unwrap());
                let op = build_ray_operator(&scene, &sigma, grid, layout, &RayOptions { quad_samples: 256, ..Default::default() }).unwrap();
                let f = GridImage::from_fn(grid, |x: [f64; 2]| (-(x[0] * x[0] + x[1] * x[1]) / 0.2).exp());
                let g = op.forward(&f).unwrap();
                let omega = Domain::disc([0.0, 0.0], 1.0);
                let mut tr = op.adjoint(&g).unwrap();
                tr.mask_to(&omega);
                let mut cont = continuous_adjoint(&g, &scene, &sigma, grid, &omega,
                    &ContinuousAdjointOptions { n_fiber: 64, integrator: None }).unwrap();
                cont.mask_to(&omega);
                let mut diff = tr.clone();
                diff.axpy(-1.0, &cont);
                println!("{name} nodes {nb}x{nd}: rel L2 {:.4} ({:?})", diff.l2_norm() / cont.l2_norm(), t.elapsed());
            }
        }
    }

    if which == "recon7" || which.is_empty() {
        // Criterion 7: 64^2, 180x90, <=5% within 200 iterations.
        for (force, name) in [(ForceField::zero(), "F=0"), (ForceField::constant_magnetic(0.1), "weak-b")] {
            let t = Instant::now();
            let scene = Scene::new(Domain::disc([0.0, 0.0], 1.3), force, 0.5).unwrap();
            let grid = SpatialGrid::covering(&scene.domain, 64, 64);
            let layout = Arc::new(boundary_measure_nodes(&scene.domain, &scene.force, &scene.shell, 180, 90).unwrap());
            let op = build_ray_operator(&scene, &AttenuationField::zero(), grid, layout, &RayOptions { quad_samples: 256, ..Default::default() }).unwrap();
            let omega = Domain::disc([0.0, 0.0], 1.0);
            let f_star = phantom::gaussian_bump(grid, &omega);
            let data = op.forward(f_star.image()).unwrap();
            let setup = InverseProblemSetup::new(&op, omega.clone());
            let res = reconstruct_cgne(&setup, &data, &SolveOptions { max_iter: 200, tol: 1e-10 }).unwrap();
            let mut diff = res.f_hat.image().clone();
            diff.axpy(-1.0, f_star.image());
            println!("{name}: err {:.4} iters {} ({:?})", diff.l2_norm() / f_star.l2_norm(), res.iterations, t.elapsed());
        }
    }
}
