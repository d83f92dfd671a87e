use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cgmsfem::config::{preset_names, ExperimentConfig, SweepAxis};
use cgmsfem::experiment::{basis_report, run_experiment, run_sweep, write_eigen_table, write_experiment, write_sweep, OutputContext};
use cgmsfem::timeloop::StoragePolicy;
use cgmsfem::verify::{run_suite, Suite};
use cgmsfem::{vtk, Error, Result};

#[derive(Parser)]
#[command(name = "cgmsfem", version, about = "Coupled multiscale finite elements for 2D thermoelasticity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: fine reference plus the requested multiscale methods.
    Run(Common),
    /// Repeat an experiment over the values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// L, beta-contrast or sigma; defaults to the config's [sweep] table.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Run a built-in verification suite; exits nonzero on failure.
    Verify {
        #[arg(value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Export local coupled eigenvalues and eigenfunctions.
    BasisReport {
        #[command(flatten)]
        common: Common,
        /// Modes per patch; defaults to spectral.basis_count.
        #[arg(long)]
        modes: Option<usize>,
        /// Patch (coarse vertex) whose eigenfunctions are written as VTK;
        /// defaults to the central vertex.
        #[arg(long)]
        patch: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (default: out/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for samples and patches.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    store: Option<StoreArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StoreArg {
    Final,
    Strided,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Manufactured,
    Invariants,
    Lemma,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => {
                return Err(Error::Config {
                    path: "--config/--preset".into(),
                    message: format!(
                        "one is required; presets: {}",
                        preset_names().collect::<Vec<_>>().join(", ")
                    ),
                })
            }
        };
        if let Some(seed) = self.seed {
            config.run.seed = seed;
        }
        if let Some(store) = self.store {
            config.run.store = match store {
                StoreArg::Final => StoragePolicy::Final,
                StoreArg::Strided => StoragePolicy::Strided,
                StoreArg::Full => StoragePolicy::Full,
            };
        }
        config.validate()?;
        Ok(config)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("out").join(&config.name))
    }
}

fn set_workers(workers: Option<usize>) -> usize {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("worker pool already initialized: {e}");
    }
    rayon::current_num_threads()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let started = Instant::now();
    let line: Vec<String> = std::env::args().collect();
    let line = line.join(" ");
    match cli.command {
        Command::Run(common) => {
            let config = common.load()?;
            let workers = set_workers(common.workers);
            let outcome = run_experiment(&config, &config.name)?;
            let dir = common.out_dir(&config);
            let ctx = OutputContext {
                dir: &dir,
                command: &line,
                workers,
                started,
            };
            write_experiment(&ctx, &config, &config.mesh_pair()?, &outcome)?;
            for r in outcome.summary() {
                println!(
                    "{:<8} L={:<3} E_u={:.4e} E_theta={:.4e} E_w={:.4e}",
                    r.method, r.l, r.err_u, r.err_theta, r.err_w
                );
            }
            for f in &outcome.failures {
                eprintln!("failed: {} {} L={}: {}", f.experiment_id, f.method, f.l, f.message);
            }
            println!("wrote {}", dir.display());
        }
        Command::Sweep { common, axis, values } => {
            let config = common.load()?;
            let workers = set_workers(common.workers);
            let (axis, values) = match (axis, values, &config.sweep) {
                (Some(a), Some(v), _) => (a, v),
                (a, v, Some(s)) => (a.unwrap_or(s.axis), v.unwrap_or_else(|| s.values.clone())),
                (Some(SweepAxis::L), None, None) => (SweepAxis::L, config.run.basis_counts.iter().map(|&l| l as f64).collect()),
                _ => {
                    return Err(Error::Config {
                        path: "sweep".into(),
                        message: "no [sweep] table in the config; pass --axis and --values".into(),
                    })
                }
            };
            config.check_sweep(&cgmsfem::config::SweepConfig {
                axis,
                values: values.clone(),
            })?;
            let outcome = run_sweep(&config, axis, &values)?;
            let dir = common.out_dir(&config);
            let ctx = OutputContext {
                dir: &dir,
                command: &line,
                workers,
                started,
            };
            write_sweep(&ctx, &config, &outcome)?;
            for r in &outcome.rows {
                let ratio = r.cgm_gm_ratio.map_or(String::new(), |x| format!(" cgm/gm={x:.3}"));
                println!(
                    "{}={:<8} {:<8} L={:<3} E_w={:.4e}{ratio}",
                    r.axis, r.value, r.method, r.l, r.err_w
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Verify { suite, workers } => {
            set_workers(workers);
            let suites = match suite {
                SuiteArg::All => vec![Suite::Manufactured, Suite::Invariants, Suite::Lemma],
                SuiteArg::Manufactured => vec![Suite::Manufactured],
                SuiteArg::Invariants => vec![Suite::Invariants],
                SuiteArg::Lemma => vec![Suite::Lemma],
            };
            let mut ok = true;
            for s in suites {
                println!("[{s:?}]");
                match run_suite(s) {
                    Ok(checks) => {
                        for c in checks {
                            ok &= c.passed;
                            if c.passed {
                                println!("{c}");
                            } else {
                                eprintln!("{c}");
                            }
                        }
                    }
                    Err(e) => {
                        ok = false;
                        eprintln!("FAIL {s:?}: {e}");
                    }
                }
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::BasisReport { common, modes, patch } => {
            let config = common.load()?;
            let workers = set_workers(common.workers);
            let modes = modes.unwrap_or(config.spectral.basis_count);
            let (pair, spectra, rows) = basis_report::<f64>(&config, modes)?;
            let dir = common.out_dir(&config);
            std::fs::create_dir_all(dir.join("vtk"))?;
            let mut files = vec![dir.join("eigen.csv")];
            write_eigen_table(&files[0], &rows)?;
            let patch = patch.unwrap_or(pair.coarse.vertex_count() / 2);
            let spectrum = spectra.get(patch).ok_or_else(|| Error::Config {
                path: "--patch".into(),
                message: format!("there are {} patches", spectra.len()),
            })?;
            for k in 0..modes.min(spectrum.vectors.ncols()) {
                let p = dir.join("vtk").join(format!("patch{patch}_mode{:02}.vtk", k + 1));
                vtk::write_eigenfunction(&p, &pair, spectrum, k)?;
                files.push(p);
            }
            let ctx = OutputContext {
                dir: &dir,
                command: &line,
                workers,
                started,
            };
            ctx.finish(&config, files, Default::default(), Vec::new())?;
            let h = 1.0 / config.mesh.coarse_nx as f64;
            for (k, z) in spectrum.eigenvalues.iter().take(modes).enumerate() {
                println!("patch {patch} mode {:>2}: H^2 mu = {:.6e} {:+.2e}i", k + 1, h * h * z.re, h * h * z.im);
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
