use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};

use fusecap::ablation::{self, Suite};
use fusecap::config::RunConfig;
use fusecap::data::{generate_synthetic_dataset, Manifest, SynthConfig};
use fusecap::decoder::Vocabulary;
use fusecap::metrics::{EvalPair, MetricOptions, MetricReport, REPORT_HEADER};
use fusecap::trainer;
use fusecap::Error;

#[derive(Parser)]
#[command(name = "fusecap", version, about = "RGB-D fusion image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the loss log and checkpoint to train.out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decode a manifest with a checkpoint and score it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for report.csv, samples.csv and hypotheses.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search over lr, heads, encoder and decoder dropout.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
    },
    /// Caption one image.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Score a hypothesis file against a reference file (tab-separated references).
    Metrics {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        refs: PathBuf,
    },
    /// Trainable and total parameter counts per group.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Vocabulary size; defaults to the one built from data.train.
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Generate the synthetic depth-discriminative dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "n-train")]
        n_train: usize,
        #[arg(long = "n-test")]
        n_test: usize,
        /// Defaults to n-test.
        #[arg(long = "n-val")]
        n_val: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "image-size", default_value_t = 32)]
        image_size: usize,
    },
    /// Run an ablation suite.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = ablation::DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        /// Unfrozen-layer counts for the freeze suite.
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 3])]
        k: Vec<usize>,
    },
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn metrics_cmd(hyp: &Path, refs: &Path) -> anyhow::Result<()> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(refs)?;
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} reference lines",
            hyps.len(),
            refs.len()
        ))
        .into());
    }
    let pairs = hyps
        .iter()
        .zip(&refs)
        .map(|(h, r)| EvalPair::from_text(h, &r.split('\t').collect::<Vec<_>>()))
        .collect::<fusecap::Result<Vec<_>>>()?;
    let report = MetricReport::compute(&pairs, &MetricOptions::standard())?;
    println!("{REPORT_HEADER}\n{}", report.csv_row());
    Ok(())
}

fn params_cmd(config: &Path, vocab_size: Option<usize>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let v = match (vocab_size, &cfg.data.train) {
        (Some(v), _) => v,
        (None, Some(t)) => {
            let m = Manifest::load(t)?;
            Vocabulary::build(&m.captions().collect::<Vec<_>>(), cfg.data.min_count)?.len()
        }
        (None, None) => bail!(Error::Config("set data.train or pass --vocab-size".into())),
    };
    let counts = trainer::param_count(&cfg, v)?;
    print!("{}", counts.to_csv());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if out.is_some() {
                cfg.train.out = out;
            }
            let o = trainer::train(&cfg)?;
            println!(
                "final loss {:.4}; checkpoint {}; log {}",
                o.losses.last().copied().unwrap_or(f32::NAN),
                o.checkpoint.display(),
                o.log.display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let e = trainer::evaluate(&checkpoint, &manifest, out.as_deref())?;
            println!("{REPORT_HEADER}\n{}", e.report.csv_row());
            if let Some(a) = e.discriminating_accuracy {
                info!("near/far accuracy {:.2}%", a * 100.0);
            }
        }
        Command::Gridsearch { config } => {
            let cfg = RunConfig::load(&config)?;
            let r = trainer::gridsearch(&cfg)?;
            let best = &r.rows[r.best];
            println!("best cell {:?}\n{REPORT_HEADER}\n{}", best.cell, best.report.csv_row());
        }
        Command::Caption {
            checkpoint,
            rgb,
            depth,
            features,
        } => {
            let c = trainer::caption_image(&checkpoint, &rgb, depth.as_deref(), features.as_deref())?;
            println!("{c}");
        }
        Command::Metrics { hyp, refs } => metrics_cmd(&hyp, &refs)?,
        Command::Params { config, vocab_size } => params_cmd(&config, vocab_size)?,
        Command::Synth {
            out,
            n_train,
            n_test,
            n_val,
            seed,
            image_size,
        } => {
            let o = generate_synthetic_dataset(
                &out,
                &SynthConfig {
                    n_train,
                    n_val: n_val.unwrap_or(n_test),
                    n_test,
                    image_size,
                    seed,
                },
            )?;
            println!("{}\n{}\n{}", o.train.display(), o.val.display(), o.test.display());
        }
        Command::Ablate {
            suite,
            config,
            out,
            seeds,
            k,
        } => {
            let suite: Suite = suite.parse()?;
            let cfg = RunConfig::load(&config)?;
            let report = match suite {
                Suite::Position => ablation::run_position_ablation(&cfg, &seeds)?,
                Suite::Modality => ablation::run_modality_ablation(&cfg, &seeds)?,
                Suite::Freeze => ablation::run_freeze_ablation(&cfg, &k, &seeds)?,
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(format!("{suite}_ablation.csv"));
            report.write(&path)?;
            print!("{}", report.to_csv());
            if report.runs.is_empty() {
                warn!("no arms were run");
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(Error::Autodiff(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
