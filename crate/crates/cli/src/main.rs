use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tied_lora::adapter::{ModelDims, TiedLoraMode};
use tied_lora::lab::{self, checkpoint, RunConfig};
use tied_lora::nanoformer::{build_model, Model};
use tied_lora::{LabError, Result};

#[derive(Parser)]
#[command(name = "tiedlab", version, about = "Tied low-rank adapter laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the relevant seed (adapter/training, pretraining init, or sweep seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the adapter mode.
    #[arg(long)]
    mode: Option<TiedLoraMode>,
    /// Overrides the adapter rank.
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Trainable-parameter counts for every mode and rank.
    Audit {
        #[arg(long, default_value_t = 4096)]
        d: usize,
        #[arg(long, default_value_t = 32)]
        layers: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 8, 32, 128])]
        ranks: Vec<usize>,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrains a base model on the configured task mixture.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains an adapter on a frozen base.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a base (optionally with an adapter) on the task's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Folds an adapter into its base after verifying forward equivalence.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compares backward gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check against this base instead of the small default geometry.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Runs the mode × rank × seed grid and writes CSV results.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        /// Output directory (defaults to the configured out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = common.mode {
        cfg.adapter.mode = mode;
    }
    if let Some(rank) = common.rank {
        cfg.adapter.rank = rank;
    }
    if let Some(seed) = common.seed {
        cfg.adapter.init_seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    out.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    checkpoint::write_atomic(path, text.as_bytes())
}

fn load_adapted(base: &Path, adapter: &Path) -> Result<Model> {
    let model = checkpoint::load_base(base)?;
    let (params, config) = checkpoint::load_adapter(adapter)?;
    model.attach_adapter(params, config)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Audit { d, layers, ranks, out } => {
            let rows = lab::audit(ModelDims::new(d, layers)?, &ranks)?;
            print!("{}", lab::audit_table(&rows));
            if let Some(out) = out {
                write_text(&out, &lab::to_csv(&rows)?)?;
            }
        }
        Command::Pretrain { common, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.pretrain.init_seed = seed;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.join("base.ckpt"));
            let (model, report) = lab::pretrain(&cfg)?;
            checkpoint::save_base(&out, &model)?;
            write_text(&report_path(&out), &lab::report_json(&report)?)?;
            println!(
                "pretrained {} steps, best val loss {:.4} at step {}; wrote {}",
                report.steps,
                report.best_val_loss,
                report.best_step,
                out.display()
            );
        }
        Command::Train { common, base, out } => {
            let cfg = load_config(&common)?;
            let base = checkpoint::load_base(&base)?;
            let adapter = cfg.adapter_config()?;
            let data = lab::task_dataset(&cfg.task)?;
            let (model, report) = lab::train_adapter(&cfg, &base, &adapter, &cfg.train, &data)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("adapter.ckpt"));
            let (params, config) = model.adapter().expect("trained model carries its adapter");
            checkpoint::save_adapter(&out, params, config)?;
            write_text(&report_path(&out), &lab::report_json(&report)?)?;
            println!(
                "{} r={}: val loss {:.4} -> {:.4} (step {}); wrote {}",
                config.mode,
                config.rank,
                report.initial_val_loss(),
                report.best_val_loss,
                report.best_step,
                out.display()
            );
        }
        Command::Eval { common, base, adapter } => {
            let cfg = load_config(&common)?;
            let model = match adapter {
                Some(a) => load_adapted(&base, &a)?,
                None => checkpoint::load_base(&base)?,
            };
            let data = lab::task_dataset(&cfg.task)?;
            let score = lab::evaluate_split(&cfg, &model, &data.test)?;
            println!("{score}");
        }
        Command::Merge { common, base, adapter, out } => {
            let cfg = load_config(&common)?;
            let model = load_adapted(&base, &adapter)?;
            let probe = lab::merge_probe(&model.config, common.seed.unwrap_or(cfg.adapter.init_seed))?;
            let (merged, err) = lab::merge_verified(&model, &probe)?;
            checkpoint::save_base(&out, &merged)?;
            println!("merge verified (relative error {err:e}); wrote {}", out.display());
        }
        Command::Gradcheck { common, base } => {
            let cfg = load_config(&common)?;
            let base = match base {
                Some(path) => checkpoint::load_base(&path)?,
                None => build_model(&lab::gradcheck_geometry(), cfg.pretrain.init_seed)?,
            };
            let adapter = cfg.adapter_config_for(cfg.adapter.mode, cfg.adapter.rank, cfg.adapter.init_seed)?;
            let adapter = tied_lora::adapter::TiedLoraConfig {
                dims: base.config.dims(),
                init_std: cfg.adapter.init_std.unwrap_or(1.0 / (base.config.d as f64).sqrt()),
                ..adapter
            };
            let err = lab::gradcheck(&base, &adapter, cfg.train.seed)?;
            println!("max relative error {err:e}");
            if !(err <= lab::GRADCHECK_TOLERANCE) {
                return Err(LabError::Verification(format!(
                    "gradient check error {err:e} exceeds {:e}",
                    lab::GRADCHECK_TOLERANCE
                )));
            }
        }
        Command::Sweep { common, base, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.sweep.seeds = vec![seed];
            }
            let base = checkpoint::load_base(&base)?;
            let result = lab::sweep(&cfg, &base)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let paths = result.write(&dir)?;
            let failed = result.rows.iter().filter(|r| r.status != "ok").count();
            println!("{} cells ({failed} failed); wrote {}", result.rows.len(), paths[0].display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
