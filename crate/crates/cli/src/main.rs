//! `coopcache` command line: experiment runs, sweeps, the exhaustive oracle,
//! forecaster training and the learning-automaton bench.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coopcache::demand::load_gps_csv;
use coopcache::harness::{
    emit_outputs, la_bench, median_by_method, parse_methods, run_oracle, run_pipeline, run_predict,
    sweep, synthetic_trace, write_la_bench, ExperimentConfig, SweepAxis,
};
use coopcache::Error;

#[derive(Parser)]
#[command(name = "coopcache", version, about = "Cooperative edge-cache placement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (overrides run.output_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated methods: optimal,laql,eps_greedy_q,non_cooperative,random.
    #[arg(long, value_name = "LIST")]
    methods: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Prediction-then-placement pipeline at one operating point.
    Run(Common),
    /// Repeat the pipeline over a sweep axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tx_power, num_bs or num_users.
        #[arg(long, default_value = "tx_power")]
        axis: String,
    },
    /// Exhaustive optimal placement for the first slot of a seed.
    Oracle(Common),
    /// Train both forecasters and report their RMSE curves.
    Predict {
        #[command(flatten)]
        common: Common,
        /// GPS trace (`timestamp,latitude,longitude[,user]`); synthetic walk otherwise.
        #[arg(long, value_name = "PATH")]
        gps: Option<PathBuf>,
        /// Length of the synthetic walk.
        #[arg(long, default_value_t = 500)]
        steps: usize,
    },
    /// Pursuit automaton in a stationary Bernoulli environment.
    LaBench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated reward probabilities.
        #[arg(long, default_value = "0.8,0.2")]
        probs: String,
        /// Comma-separated resolution parameters.
        #[arg(long, default_value = "1,2,5,10")]
        kappas: String,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
    },
}

/// Failure category; the discriminant is the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Config = 3,
    Input = 4,
    Io = 5,
    Compute = 6,
}

fn categorize(e: &Error) -> Category {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Colocated { .. } => Category::Config,
        Error::Parse { .. } | Error::EmptyDataset | Error::SeriesTooShort { .. } => Category::Input,
        Error::Io(_) | Error::Csv(_) => Category::Io,
        _ => Category::Compute,
    }
}

fn load_config(c: &Common) -> coopcache::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(out) = &c.out {
        cfg.run.output_dir = out.clone();
    }
    if let Some(list) = &c.methods {
        cfg.run.methods = parse_methods(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> coopcache::Result<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad {what} value {t:?}"))))
        .collect()
}

fn print_medians(out: &coopcache::harness::RunOutput) {
    for (m, v) in median_by_method(&out.records) {
        println!("{:<16} median sum MOS {v:.4}", m.name());
    }
}

fn execute(cmd: Command) -> coopcache::Result<()> {
    match cmd {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let out = run_pipeline(&cfg)?;
            let files = emit_outputs(&out, &cfg.run.output_dir)?;
            print_medians(&out);
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep { common, axis } => {
            let cfg = load_config(&common)?;
            let axis: SweepAxis = axis.parse()?;
            let out = sweep(&cfg, axis)?;
            for f in emit_outputs(&out, &cfg.run.output_dir)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Oracle(c) => {
            let cfg = load_config(&c)?;
            let seed = cfg.run.seeds[0];
            let (r, hit) = run_oracle(&cfg, seed, &cfg.run.output_dir)?;
            println!(
                "optimal sum MOS {:.6} placement {} feasible {} evaluations {}{}",
                r.sum_mos,
                r.placement,
                r.feasible,
                r.evaluations,
                if hit { " (cached)" } else { "" }
            );
        }
        Command::Predict { common, gps, steps } => {
            let cfg = load_config(&common)?;
            let seed = cfg.run.seeds[0];
            let trajectories = match &gps {
                Some(p) => {
                    let trace = load_gps_csv(p)?;
                    if trace.dropped_rows > 0 {
                        log::warn!("{} rows dropped for non-increasing timestamps", trace.dropped_rows);
                    }
                    trace.trajectories
                }
                None => vec![synthetic_trace(&cfg, steps, seed)],
            };
            let p = run_predict(&cfg, &trajectories, seed)?;
            let dir = &cfg.run.output_dir;
            fs::create_dir_all(dir)?;
            p.mobility_report.write_curve_csv(BufWriter::new(File::create(dir.join("mobility_rmse.csv"))?))?;
            p.popularity_report
                .write_curve_csv(BufWriter::new(File::create(dir.join("popularity_rmse.csv"))?))?;
            fs::write(dir.join("mobility_net.txt"), p.mobility.to_text())?;
            fs::write(dir.join("popularity_net.txt"), p.popularity.to_text())?;
            let show = |name: &str, r: &coopcache::predictor::TrainReport, test: Option<f64>| {
                let first = r.epoch_rmse.first().copied().unwrap_or(f64::NAN);
                let test = test.map_or("n/a".to_string(), |t| format!("{t:.6}"));
                println!(
                    "{name}: epoch-1 rmse {first:.6}, final {:.6}, test {test}, snapshot {}",
                    r.final_rmse().unwrap_or(f64::NAN),
                    r.snapshot_id
                );
            };
            show("mobility", &p.mobility_report, p.mobility_test_rmse);
            show("popularity", &p.popularity_report, p.popularity_test_rmse);
        }
        Command::LaBench { common, probs, kappas, runs, steps } => {
            let cfg = load_config(&common)?;
            let probs: Vec<f64> = parse_list(&probs, "probability")?;
            let kappas: Vec<u32> = parse_list(&kappas, "kappa")?;
            let rows = la_bench(&probs, &kappas, runs, steps, cfg.run.seeds[0])?;
            let dir: &Path = &cfg.run.output_dir;
            fs::create_dir_all(dir)?;
            write_la_bench(&rows, &dir.join("la_bench.csv"))?;
            for &k in &kappas {
                let n = rows.iter().filter(|r| r.kappa == k && r.converged).count();
                println!("kappa {k:>3}: {n}/{runs} runs with p_best > 0.95");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = categorize(&e);
            eprintln!("error [{}]: {e}", format!("{cat:?}").to_lowercase());
            ExitCode::from(cat as u8)
        }
    }
}
