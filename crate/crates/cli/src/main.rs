//! `sgf` — generate synthetic scenes, train, predict, evaluate, compare.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use sgf_core::config::RunConfig;
use sgf_core::experiment::{self, SplitChoice};
use sgf_core::Error;

#[derive(Parser, Debug)]
#[command(name = "sgf", version, about = "Scene graph prediction with oracle-assisted training")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the world, initialization and shuffling seeds.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Reject unknown fields in scene files.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads for scene-parallel sections.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Metric cut-offs, e.g. `recall=20,50,100`. Kinds: object, predicate, triplet, recall.
    #[arg(long = "k-list", global = true, value_name = "KIND=K,..")]
    k_list: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (scene files + manifest).
    Generate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json and train_log.jsonl.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Joint training with the oracle branch (default from config).
        #[arg(long, overrides_with = "no_vlsat", action = ArgAction::SetTrue)]
        vlsat: bool,
        /// Train the 3D-only baseline.
        #[arg(long = "no-vlsat", action = ArgAction::SetTrue)]
        no_vlsat: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint; its config is reused except for the epoch budget.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Run the 3D branch on a split and write a prediction dump.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Evaluate a prediction dump; writes eval.json and eval.csv.
    Eval {
        #[arg(long, value_name = "FILE")]
        dump: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Baseline vs joint training over several seeds.
    Experiment {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Validation { .. } | Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
        Error::NonFinite { .. } | Error::NumericAbort { .. } => 4,
        Error::Dimension { .. } | Error::Contract(_) => 1,
    }
}

fn parse_k_list(cfg: &mut RunConfig, spec: &str) -> sgf_core::Result<()> {
    let (kind, list) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--k-list expects KIND=K,.. but got '{spec}'")))?;
    let ks = list
        .split(',')
        .map(|k| k.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("--k-list '{spec}': {e}")))?;
    let slot = match kind {
        "object" => &mut cfg.eval.object_k,
        "predicate" => &mut cfg.eval.predicate_k,
        "triplet" => &mut cfg.eval.triplet_k,
        "recall" => &mut cfg.eval.recall_k,
        other => return Err(Error::Config(format!("unknown --k-list kind '{other}'"))),
    };
    *slot = ks;
    Ok(())
}

fn load_config(g: &GlobalOpts) -> sgf_core::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.world.seed = s;
        cfg.model.init_seed = s;
        cfg.train.seed = s;
    }
    cfg.strict |= g.strict;
    if g.workers.is_some() {
        cfg.workers = g.workers;
    }
    for spec in &g.k_list {
        parse_k_list(&mut cfg, spec)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> sgf_core::Result<()> {
    let mut cfg = load_config(&cli.global)?;
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Generate { out } => {
            let m = experiment::generate(&cfg, &out)?;
            println!(
                "wrote {} ({} predicates, separability geometry-only {:.3} vs with latent {:.3})",
                out.display(),
                m.vocabulary.n_rel(),
                m.separability.geometry_only,
                m.separability.geometry_and_latent
            );
        }
        Command::Train {
            data,
            out,
            vlsat,
            no_vlsat,
            epochs,
            resume,
        } => {
            if no_vlsat {
                cfg.train.vlsat = false;
            } else if vlsat {
                cfg.train.vlsat = true;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let summary = experiment::train(&cfg, &data, &out, resume.as_deref())?;
            if let Some(last) = summary.log.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.loss_total);
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Predict {
            checkpoint,
            data,
            out,
            split,
            label,
        } => {
            let split = match split {
                SplitArg::Train => SplitChoice::Train,
                SplitArg::Validation => SplitChoice::Validation,
            };
            let dump = experiment::predict_from_checkpoint(&checkpoint, &data, split, cfg.strict, &label)?;
            dump.write(&out)?;
            println!("wrote {} scenes to {}", dump.scenes.len(), out.display());
        }
        Command::Eval { dump, data, out } => {
            let report = experiment::eval_files(&dump, &data, &cfg)?;
            report.write(&out, "eval")?;
            print!("{}", report.to_csv());
        }
        Command::Experiment { out, seeds } => {
            if let Some(s) = seeds {
                cfg.experiment_seeds = s;
            }
            let report = experiment::run_experiment(&cfg, &out)?;
            print!("{}", report.to_csv());
            let fmt = |v: Option<f64>| v.map_or("n/a".to_owned(), |v| format!("{v:+.2}"));
            println!("tail mA@1 delta (vlsat - baseline): {}", fmt(report.tail_ma1_delta));
            println!("unseen A@50 delta (vlsat - baseline): {}", fmt(report.unseen_a50_delta));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SGF_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
