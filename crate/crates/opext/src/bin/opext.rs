//! Experiment CLI: geometry export, RKHS fits, Laplace-Beltrami solves,
//! operator-network training, extension bound reports, and the study-grid
//! benchmark tables.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use opext::bench::{
    run_convergence, run_table_cond, run_table_h1, run_table_l1, run_table_l2, run_train,
    ExperimentConfig, TrainRunConfig,
};
use opext::extension::{bound_report, fit_input, ResponseCache};
use opext::geometry::{farthest_point_sample, sample_radial_manifold, RadialShape};
use opext::kernel::{KernelSpec, MaternOrder};
use opext::lb::{make_test_functions, MeshfreeLb, SolutionOracle, SphereSpectral};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "opext", about = "Kernel-based operator extension experiments", version)]
struct Cli {
    /// Seed override applied on top of any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker cap for grid cells (accepted for compatibility; the current
    /// runner is serial so results never depend on scheduling).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a radial-manifold point cloud and export it as CSV + sidecar.
    Geom {
        /// sphere | a | b | c
        #[arg(long, default_value = "sphere")]
        shape: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Fit a random band-limited field at FPS centers and report the error.
    Fit {
        #[arg(long, default_value = "sphere")]
        shape: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// gaussian | matern12 | matern32 | matern52 | wendland0 | wendland1 | wendland2
        #[arg(long, default_value = "matern32")]
        kernel: String,
        #[arg(long, default_value_t = 5.0)]
        sigma: f64,
        #[arg(long, default_value_t = 625)]
        centers: usize,
        #[arg(long, default_value_t = 1e-10)]
        lambda: f64,
        /// Band limit of the random test field.
        #[arg(long, default_value_t = 6)]
        degree: usize,
    },
    /// Solve -Delta_LB u = f for a random band-limited f and export u.
    Solve {
        #[arg(long, default_value = "sphere")]
        shape: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// spectral | meshfree
        #[arg(long, default_value = "spectral")]
        solver: String,
        #[arg(long, default_value_t = 6)]
        degree: usize,
    },
    /// Train the desk-scale operator network; writes checkpoint + loss CSV.
    Train {
        /// JSON training config; defaults to the desk recipe when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one extension bound report per test function and append the rows.
    Extend {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Study-grid tables.
    Bench {
        /// h1 | l2 | l1 | cond | convergence
        table: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_kernel(name: &str, sigma: f64) -> Result<KernelSpec> {
    Ok(match name {
        "gaussian" => KernelSpec::gaussian(sigma),
        "matern12" => KernelSpec::matern(MaternOrder::Half, sigma),
        "matern32" => KernelSpec::matern(MaternOrder::ThreeHalves, sigma),
        "matern52" => KernelSpec::matern(MaternOrder::FiveHalves, sigma),
        "wendland0" => KernelSpec::wendland(0, 3, sigma),
        "wendland1" => KernelSpec::wendland(1, 3, sigma),
        "wendland2" => KernelSpec::wendland(2, 3, sigma),
        other => bail!("unknown kernel '{other}'"),
    })
}

fn shape_by_name(name: &str) -> Result<RadialShape> {
    RadialShape::by_name(name).with_context(|| format!("unknown shape preset '{name}'"))
}

fn load_experiment(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.out.clone();
    std::fs::create_dir_all(&out)?;
    let seed = cli.seed.unwrap_or(0);
    if cli.jobs != 1 {
        eprintln!("note: --jobs {} accepted; cells run serially for determinism", cli.jobs);
    }

    match cli.command {
        Command::Geom { shape, n } => {
            let cloud = sample_radial_manifold(&shape_by_name(&shape)?, n, seed)?;
            cloud.export_csv(&out.join("cloud.csv"), &out.join("cloud.json"))?;
            println!("wrote {} points to {}", cloud.len(), out.join("cloud.csv").display());
        }
        Command::Fit { shape, n, kernel, sigma, centers, lambda, degree } => {
            let kernel = parse_kernel(&kernel, sigma)?;
            let cloud = sample_radial_manifold(&shape_by_name(&shape)?, n, seed)?;
            let idx = farthest_point_sample(&cloud, centers, seed)?;
            let field = &make_test_functions(&[degree], 1, seed)[0];
            let (f, fg) = cloud.sample_field(field);
            let fit = fit_input(&kernel, &cloud, &idx, &f, Some(&fg), lambda)?;
            write_json(&out.join("interpolant.json"), &fit.interpolant)?;
            let metrics = serde_json::json!({
                "kernel": kernel.label(),
                "n_centers": centers,
                "eps": fit.eps,
                "eps_abs": fit.eps_abs,
                "alpha_l1": fit.alpha_l1,
            });
            write_json(&out.join("fit.json"), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Solve { shape, n, solver, degree } => {
            let cloud = sample_radial_manifold(&shape_by_name(&shape)?, n, seed)?;
            let oracle: Box<dyn SolutionOracle> = match solver.as_str() {
                "spectral" => Box::new(SphereSpectral::new(&cloud, 2 * degree.max(8))?),
                "meshfree" => Box::new(MeshfreeLb::new(&cloud, 4)?),
                other => bail!("unknown solver '{other}'"),
            };
            let field = &make_test_functions(&[degree], 1, seed)[0];
            let (f, _) = cloud.sample_field(field);
            let (u, g) = oracle.apply(&f)?;
            use std::io::Write;
            let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("solution.csv"))?);
            writeln!(w, "x,y,z,f,u,gx,gy,gz")?;
            for i in 0..cloud.len() {
                let p = cloud.points[i];
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    p[0], p[1], p[2], f[i], u[i], g[i][0], g[i][1], g[i][2]
                )?;
            }
            println!("wrote {}", out.join("solution.csv").display());
        }
        Command::Train { config } => {
            let mut cfg: TrainRunConfig = match &config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("loading {}", p.display()))?,
                None => TrainRunConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let (_, _) = run_train(&cfg, &out)?;
            println!("wrote {} and {}", out.join("model.json").display(), out.join("loss.csv").display());
        }
        Command::Extend { config } => {
            let cfg = load_experiment(&config, cli.seed)?;
            let cloud = sample_radial_manifold(&cfg.shape_preset()?, cfg.n_cloud, cfg.seed)?;
            let kernel = cfg.kernel_grid()[0].clone();
            let m = *cfg.center_counts.iter().max().context("empty center_counts")?;
            let centers = farthest_point_sample(&cloud, m, cfg.seed)?;
            let max_degree = cfg.test_degrees.iter().copied().max().unwrap_or(8);
            let oracle = opext::bench::build_oracle(&cfg.oracle, &cloud, max_degree)?;
            let mut cache = ResponseCache::new();
            let csv = out.join("extension.csv");
            let mut failures = 0usize;
            for field in make_test_functions(&cfg.test_degrees, cfg.per_degree, cfg.seed) {
                let (f, fg) = cloud.sample_field(&field);
                let rep = bound_report(
                    oracle.as_ref(),
                    oracle.as_ref(),
                    &kernel,
                    &cloud,
                    &centers,
                    &f,
                    Some(&fg),
                    cfg.lambda,
                    5,
                    cfg.seed,
                    &mut cache,
                )?;
                if !rep.satisfied {
                    failures += 1;
                }
                rep.append_csv(&csv)?;
            }
            println!("wrote {} ({failures} unsatisfied rows)", csv.display());
            if failures > 0 {
                std::process::exit(1);
            }
        }
        Command::Bench { table, config } => {
            let cfg = load_experiment(&config, cli.seed)?;
            let failed = match table.as_str() {
                "h1" => run_table_h1(&cfg, &out)?.failed_cells,
                "l2" => run_table_l2(&cfg, &out)?.failed_cells,
                "l1" => run_table_l1(&cfg, &out)?.failed_cells,
                "cond" => {
                    run_table_cond(&cfg, &out)?;
                    0
                }
                "convergence" => {
                    let kernel = KernelSpec::matern(MaternOrder::ThreeHalves, 5.0);
                    let counts = [156, 312, 625, 1250];
                    let rep = run_convergence(&cfg, &kernel, &counts, &out)?;
                    println!("slope rel_L2 = {:.3}, slope rel_H1 = {:.3}", rep.slope_l2, rep.slope_h1);
                    0
                }
                other => bail!("unknown table '{other}' (h1, l2, l1, cond, convergence)"),
            };
            println!("wrote tables to {} ({failed} failed cells)", out.display());
            if failed > 0 {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
