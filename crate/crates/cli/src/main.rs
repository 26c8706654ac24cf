//! Command-line harness: deterministic simulate / transform / reconstruct /
//! verify workflows over the experiment configuration format.

use std::path::{Path, PathBuf};
use std::process::ExitCode;


use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use curvtomo::boundary::{santalo_check_many, BoundarySinogram, DomainTag};
use curvtomo::config::ExperimentConfig;
use curvtomo::grid::GridImage;
use curvtomo::io;
use curvtomo::phantom;
use curvtomo::ray::build_ray_operator;
use curvtomo::reconstruct::{
    reconstruct_cgne, reconstruct_landweber, stability_probe, ForwardOperator,
    InverseProblemSetup, LandweberOptions, SolveOptions,
};
use curvtomo::scatter::build_scatter_measurement;
use curvtomo::transport::measure;
use curvtomo::verify::{run_verify, ADJOINT_TOL, SANTALO_TOL};

#[derive(Parser)]
#[command(
    name = "curvtomo",
    about = "Transport simulation, curved attenuated ray transforms, and source reconstruction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output path; the .csv extension selects the CSV mirror format.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Random seed override (defaults to the configuration seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (falls back to CURVTOMO_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suite; exit 0 iff every check passes.
    Verify,
    /// Solve the forward transport problem and write the boundary sinogram.
    Simulate {
        /// Phantom name: gaussian-bump | two-discs | smooth-ring | one-hot(i,j).
        #[arg(long, default_value = "gaussian-bump")]
        phantom: String,
    },
    /// Apply the attenuated ray transform (no scattering) to a phantom or image.
    Transform {
        #[arg(long, conflicts_with = "input", default_value = "gaussian-bump")]
        phantom: String,
        /// Grid image to transform instead of a phantom.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Check the forward/adjoint dot-product identity on random pairs.
    AdjointTest,
    /// Check the phase-volume/boundary integral identity.
    SantaloCheck,
    /// Reconstruct a source image from a sinogram file.
    Reconstruct {
        /// Input sinogram (binary CTS1).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Solver: cgne | landweber.
        #[arg(long, default_value = "cgne")]
        method: String,
    },
    /// Write a catalog phantom as a grid image.
    Phantom {
        #[arg(long)]
        name: String,
    },
    /// Empirical stability-constant probe over a band-limited ensemble.
    StabilityProbe {
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("CURVTOMO_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("thread pool")?;
        }
    }

    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    let seed = cli.seed.unwrap_or(cfg.seed);

    match &cli.command {
        Command::Verify => cmd_verify(&cfg, seed, cli.out.as_deref()),
        Command::Simulate { phantom } => cmd_simulate(&cfg, phantom, required_out(&cli)?),
        Command::Transform { phantom, input } => {
            cmd_transform(&cfg, phantom, input.as_deref(), required_out(&cli)?)
        }
        Command::AdjointTest => cmd_adjoint_test(&cfg, seed, cli.out.as_deref()),
        Command::SantaloCheck => cmd_santalo(&cfg, cli.out.as_deref()),
        Command::Reconstruct { input, method } => {
            cmd_reconstruct(&cfg, input, method, required_out(&cli)?)
        }
        Command::Phantom { name } => cmd_phantom(&cfg, name, required_out(&cli)?),
        Command::StabilityProbe { count } => {
            cmd_stability(&cfg, *count, seed, cli.out.as_deref())
        }
    }
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| anyhow!("this command requires --out PATH"))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn write_image(path: &Path, img: &GridImage<f64>) -> Result<()> {
    if is_csv(path) {
        io::write_grid_image_csv(path, img)?;
    } else {
        io::write_grid_image(path, img)?;
    }
    Ok(())
}

fn write_sino(path: &Path, sino: &BoundarySinogram<f64>) -> Result<()> {
    if is_csv(path) {
        io::write_sinogram_csv(path, sino)?;
    } else {
        io::write_sinogram(path, sino)?;
    }
    Ok(())
}

fn cmd_verify(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let report = run_verify(cfg, seed)?;
    for c in &report.checks {
        println!(
            "{} {:<22} value {:.3e}  threshold {:.3e}  ({})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.detail
        );
    }
    if let Some(path) = out {
        std::fs::write(path, report.to_csv())?;
        println!("report written to {}", path.display());
    }
    Ok(if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_simulate(cfg: &ExperimentConfig, phantom_name: &str, out: &Path) -> Result<ExitCode> {
    let scene = cfg.scene()?;
    let grid = cfg.spatial_grid();
    let f = phantom::by_name(phantom_name, grid, &cfg.omega())?;
    let layout = cfg.boundary_layout(&scene)?;
    let (sino, solution) = measure(
        &f,
        &cfg.sigma_field(),
        &cfg.scattering_kernel(),
        &scene,
        cfg.phase_grid()?,
        &layout,
        &cfg.transport_options(&scene),
    )?;
    if !solution.converged {
        bail!(
            "transport iteration did not converge in {} iterations (diverging: {})",
            solution.iterations,
            solution.diverging()
        );
    }
    write_sino(out, &sino)?;
    println!(
        "simulated {} nodes in {} transport iterations -> {}",
        sino.values.len(),
        solution.iterations,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_transform(
    cfg: &ExperimentConfig,
    phantom_name: &str,
    input: Option<&Path>,
    out: &Path,
) -> Result<ExitCode> {
    let scene = cfg.scene()?;
    let grid = cfg.spatial_grid();
    let f: GridImage<f64> = match input {
        Some(path) => {
            let img = io::read_grid_image(path)?;
            if !img.grid.same_shape(&grid) {
                bail!(
                    "input grid {} does not match configured grid {}",
                    img.grid.shape_string(),
                    grid.shape_string()
                );
            }
            img
        }
        None => phantom::by_name(phantom_name, grid, &cfg.omega())?.into_image(),
    };
    let op = build_ray_operator(
        &scene,
        &cfg.sigma_field(),
        grid,
        cfg.boundary_layout(&scene)?,
        &cfg.ray_options(&scene),
    )?;
    let sino = op.forward(&f)?;
    write_sino(out, &sino)?;
    println!("transformed {} nodes -> {}", sino.values.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_adjoint_test(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    use rand::{Rng, SeedableRng};
    let scene = cfg.scene()?;
    let op = build_ray_operator(
        &scene,
        &cfg.sigma_field(),
        cfg.spatial_grid(),
        cfg.boundary_layout(&scene)?,
        &cfg.ray_options(&scene),
    )?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xad01);
    let mut rows = String::from("pair,lhs,rhs,rel_discrepancy\n");
    let mut worst = 0.0f64;
    for k in 0..cfg.verify_adjoint_pairs {
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
        let rel = (lhs - rhs).abs() / (f.l2_norm() * g.norm()).max(lhs.abs());
        worst = worst.max(rel);
        rows.push_str(&format!("{k},{lhs:.16e},{rhs:.16e},{rel:.16e}\n"));
    }
    println!(
        "adjoint identity: worst relative discrepancy {worst:.3e} over {} pairs (tolerance {ADJOINT_TOL:.1e})",
        cfg.verify_adjoint_pairs
    );
    if let Some(path) = out {
        std::fs::write(path, rows)?;
    }
    Ok(if worst <= ADJOINT_TOL {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_santalo(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExitCode> {
    let inner = cfg.scene_inner()?;
    let fns: [&(dyn Fn([f64; 2], [f64; 2]) -> f64 + Sync); 3] = [
        &|_, _| 1.0,
        &|x, _| (-(x[0] * x[0] + x[1] * x[1])).exp(),
        &|x, th| (-(x[0] * x[0] + x[1] * x[1])).exp() * th[1].atan2(th[0]).cos(),
    ];
    let names = ["constant", "gaussian", "gaussian-cos"];
    let reports = santalo_check_many(
        &fns,
        &inner.domain,
        &inner.force,
        &inner.shell,
        &cfg.santalo_options(&inner),
    )?;
    let mut rows = String::from("function,lhs,rhs,rel_err\n");
    let mut all_ok = true;
    for (name, r) in names.iter().zip(&reports) {
        let ok = r.rel_err <= SANTALO_TOL;
        all_ok &= ok;
        println!(
            "{} {name:<14} lhs {:.8e}  rhs {:.8e}  rel_err {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.lhs,
            r.rhs,
            r.rel_err
        );
        rows.push_str(&format!("{name},{:.16e},{:.16e},{:.16e}\n", r.lhs, r.rhs, r.rel_err));
    }
    if let Some(path) = out {
        std::fs::write(path, rows)?;
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_reconstruct(
    cfg: &ExperimentConfig,
    input: &Path,
    method: &str,
    out: &Path,
) -> Result<ExitCode> {
    let scene = cfg.scene()?;
    let grid = cfg.spatial_grid();
    let layout = cfg.boundary_layout(&scene)?;
    let records = io::read_sinogram(input)?;
    let data = io::attach_records(records, layout.clone())?;

    let ray_op;
    let scatter_op;
    let operator: &dyn ForwardOperator<f64> = if cfg.has_scattering() {
        scatter_op = build_scatter_measurement(
            &scene,
            &cfg.sigma_field(),
            cfg.kappa1.as_phase_fn(),
            cfg.kappa2.as_phase_fn(),
            cfg.scatter_lambda,
            grid,
            layout,
            &cfg.scatter_options(&scene),
        )?;
        &scatter_op
    } else {
        ray_op = build_ray_operator(
            &scene,
            &cfg.sigma_field(),
            grid,
            layout,
            &cfg.ray_options(&scene),
        )?;
        &ray_op
    };

    let setup =
        InverseProblemSetup::new(operator, cfg.omega()).with_epsilon(cfg.recon_epsilon);
    let result = match method {
        "cgne" => reconstruct_cgne(
            &setup,
            &data,
            &SolveOptions {
                max_iter: cfg.recon_max_iter,
                tol: cfg.recon_tol,
            },
        )?,
        "landweber" => reconstruct_landweber(
            &setup,
            &data,
            &LandweberOptions {
                step: None,
                max_iter: cfg.recon_max_iter,
                tol: cfg.recon_tol,
                seed: cfg.seed,
            },
        )?,
        other => bail!("unknown method '{other}' (expected cgne or landweber)"),
    };

    write_image(out, result.f_hat.image())?;
    let residual_path = sibling_with_suffix(out, "_residuals.csv");
    io::write_residuals_csv(&residual_path, &result.residual_history)?;
    println!(
        "{} finished: {} iterations, converged = {}, relative data residual {:.3e}",
        method, result.iterations, result.converged, result.rel_data_residual
    );
    println!(
        "image -> {}; residual history -> {}",
        out.display(),
        residual_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_phantom(cfg: &ExperimentConfig, name: &str, out: &Path) -> Result<ExitCode> {
    let grid = cfg.spatial_grid();
    let p = phantom::by_name(name, grid, &cfg.omega())?;
    write_image(out, p.image())?;
    println!("phantom '{name}' -> {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_stability(
    cfg: &ExperimentConfig,
    count: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let scene = cfg.scene()?;
    let grid = cfg.spatial_grid();
    let layout = cfg.boundary_layout(&scene)?;

    let ray_op;
    let scatter_op;
    let operator: &dyn ForwardOperator<f64> = if cfg.has_scattering() {
        scatter_op = build_scatter_measurement(
            &scene,
            &cfg.sigma_field(),
            cfg.kappa1.as_phase_fn(),
            cfg.kappa2.as_phase_fn(),
            cfg.scatter_lambda,
            grid,
            layout,
            &cfg.scatter_options(&scene),
        )?;
        &scatter_op
    } else {
        ray_op = build_ray_operator(
            &scene,
            &cfg.sigma_field(),
            grid,
            layout,
            &cfg.ray_options(&scene),
        )?;
        &ray_op
    };

    let phantoms = phantom::band_limited_ensemble(grid, &cfg.omega(), count, 3, seed ^ 0x57ab);
    let report = stability_probe(operator, &cfg.omega1(), &phantoms)?;
    println!(
        "stability probe over {count} phantoms: empirical C = {:.6e}, ratio spread = {:.3}",
        report.c_empirical, report.ratio_spread
    );
    if let Some(path) = out {
        let mut rows = String::from("phantom,f_l2,normal_h1,ratio\n");
        for (i, p) in report.pairs.iter().enumerate() {
            rows.push_str(&format!(
                "{i},{:.16e},{:.16e},{:.16e}\n",
                p.f_l2,
                p.normal_h1,
                p.f_l2 / p.normal_h1
            ));
        }
        std::fs::write(path, rows)?;
    }
    Ok(ExitCode::SUCCESS)
}
