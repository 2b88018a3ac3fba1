use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dyninfer::config::{parse_checkpoints, Config};
use dyninfer::formats;
use dyninfer::harness;
use dyninfer_core::data::Split;
use dyninfer_core::grid::RouteKind;

#[derive(Parser)]
#[command(name = "dyninfer", version, about = "Budgeted early-exit video classification")]
struct Cli {
    /// Run configuration with [data], [grid], [train] and [policy] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for dataset generation (gen-data) or initialisation and shuffling (train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    route: Option<Route>,
    #[arg(long, global = true, value_enum)]
    permute: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    shift: Option<Switch>,
    /// Parallel evaluation (and training) over videos.
    #[arg(long, global = true)]
    parallel: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Route {
    Depth,
    Input,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Also write the manifest as text to this path.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model and write the checkpoint file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Explicit checkpoints as `i:j,i:j,...`.
        #[arg(long)]
        checkpoints: Option<String>,
    },
    /// Calibrate exit thresholds for one budget and write the policy file.
    Calibrate {
        #[command(flatten)]
        io: ModelData,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Average FLOPs budget per video.
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy and write a one-row CSV report.
    Eval {
        #[command(flatten)]
        io: ModelData,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate and evaluate a list of budgets; write the full CSV report.
    Sweep {
        #[command(flatten)]
        io: ModelData,
        /// Comma-separated budgets; evenly spaced over [G_1, G_K] when absent.
        #[arg(long)]
        budgets: Option<String>,
        #[arg(long, value_enum)]
        calibrate_split: Option<SplitArg>,
        #[arg(long, value_enum)]
        eval_split: Option<SplitArg>,
        /// Largest accuracy drop in points for the Q* selection.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelData {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(r) = cli.route {
        cfg.grid.route = match r {
            Route::Depth => RouteKind::DepthWise,
            Route::Input => RouteKind::InputWise,
            Route::Joint => RouteKind::Joint,
        };
    }
    if let Some(p) = cli.permute {
        cfg.grid.permute = matches!(p, Switch::On);
    }
    if let Some(s) = cli.shift {
        cfg.grid.shift = matches!(s, Switch::On);
    }
    cfg.train.parallel |= cli.parallel;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let parallel = cfg.train.parallel;
    match cli.command {
        Command::GenData { out, manifest } => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            cfg.data.validate()?;
            harness::cmd_gen_data(&cfg.data, &out)?;
            if let Some(m) = manifest {
                std::fs::write(&m, formats::manifest_text(&cfg.data)).with_context(|| format!("writing {}", m.display()))?;
            }
        }
        Command::Train { data, out, epochs, checkpoints } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(c) = checkpoints {
                cfg.grid.checkpoints = parse_checkpoints(&c).context("checkpoints must look like 0:1,1:2")?;
            }
            let outcome = harness::cmd_train(&cfg, &data, &out)?;
            println!("model {} written to {}", outcome.network.hash(), out.display());
        }
        Command::Calibrate { io, split, budget, out } => {
            let p = harness::cmd_calibrate(&io.model, &io.data, split.into(), budget, &out, parallel)?;
            println!("q = {:?}, thresholds {:?}", p.policy.q, p.policy.thresholds);
        }
        Command::Eval { io, policy, split, out } => {
            let r = harness::cmd_eval(&io.model, &policy, &io.data, split.into(), &out, parallel)?;
            let row = &r.rows[0];
            println!("avg_flops {:.1} top1 {:.4} exits {:?}", row.avg_flops(), row.top1(), row.histogram);
        }
        Command::Sweep { io, budgets, calibrate_split, eval_split, epsilon, out } => {
            if let Some(b) = budgets {
                cfg.policy.budgets = b
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .context("budgets must be comma-separated numbers")?;
            }
            if let Some(s) = calibrate_split {
                cfg.policy.calibrate_split = s.into();
            }
            if let Some(s) = eval_split {
                cfg.policy.eval_split = s.into();
            }
            if let Some(e) = epsilon {
                cfg.policy.epsilon = e;
            }
            let r = harness::cmd_sweep(&cfg, &io.model, &io.data, &out)?;
            println!("{} budgets evaluated, full inference top1 {:.4}", r.rows.len(), r.full_top1);
            if let Some(i) = r.selected {
                println!("Q* = {} (avg_flops {:.1}, top1 {:.4})", r.rows[i].budget, r.rows[i].avg_flops(), r.rows[i].top1());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
