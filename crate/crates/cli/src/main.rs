//! `anchorspot` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchorspot::harness::{
    evaluate, render_overlay, train, DataSource, Stage, TrainConfig, FINAL_CHECKPOINT,
};
use anchorspot::inference::{read_results, spot, spot_traced, write_results, InferenceConfig, Lexicon, LexiconMode};
use anchorspot::network::load_checkpoint;
use anchorspot::synthdata::{convert_to_weak, read_dataset, render_sample, write_dataset, SynthConfig};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser)]
#[command(name = "anchorspot", version, about = "Single-shot scene text spotting")]
struct Cli {
    /// TOML configuration for the subcommand (synthesis, training or
    /// inference settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model checkpoint to read (eval, spot, overlay) or start from (train).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// Index of the first sample; disjoint ranges give disjoint sets.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Train a model; `--checkpoint` initializes the weights.
    Train {
        /// Dataset directory, optionally `DIR:RATIO`; repeatable.
        #[arg(long = "data")]
        data: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Continue the run saved in `--checkpoint` (weights, momentum and
        /// step) instead of starting a new one from its weights.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Write the score table here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write per-image results (JSON).
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Spot text in images.
    Spot {
        images: Vec<PathBuf>,
        #[command(flatten)]
        lexicon: LexiconArgs,
        /// Results file (JSON); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw results, anchors and sampled points over an image.
    Overlay {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Draw these results instead of running the model; anchors and
        /// sampled points are then unavailable.
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        lexicon: LexiconArgs,
    },
    /// Replace every polygon of a dataset with its anchor hint.
    ConvertWeak {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Args)]
struct LexiconArgs {
    /// One word per line; enables lexicon correction.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl LexiconArgs {
    fn load(&self) -> Result<Lexicon> {
        Ok(match &self.lexicon {
            Some(p) => Lexicon::from_file(LexiconMode::Custom, p)?,
            None => Lexicon::none(),
        })
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn require_checkpoint(cli: &Cli) -> Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| anyhow!("--checkpoint is required for this command"))
}

fn parse_source(s: &str) -> Result<DataSource> {
    match s.rsplit_once(':') {
        Some((path, ratio)) if ratio.parse::<f64>().is_ok() => Ok(DataSource {
            path: path.into(),
            ratio: ratio.parse()?,
        }),
        _ => Ok(DataSource {
            path: s.into(),
            ratio: 1.0,
        }),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthGen { out, count, start } => {
            let mut cfg: SynthConfig = read_toml(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let samples: Vec<_> = (*start..start + count).map(|i| render_sample(&cfg, i)).collect();
            let ds = write_dataset(out, &samples)?;
            let words: usize = ds.records.iter().map(|r| r.instances.len()).sum();
            println!("wrote {} images, {words} words to {}", ds.len(), out.display());
        }
        Command::Train {
            data,
            out,
            steps,
            stage,
            resume,
        } => {
            let mut cfg = match &cli.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.steps = *n;
            }
            if let Some(s) = stage {
                cfg.stage = match s {
                    StageArg::Pretrain => Stage::Pretrain,
                    StageArg::Finetune => Stage::Finetune,
                };
            }
            if !data.is_empty() {
                cfg.datasets = data.iter().map(|d| parse_source(d)).collect::<Result<_>>()?;
            }
            if cfg.datasets.is_empty() {
                bail!("no training data: pass --data or set `datasets` in the config");
            }
            if let Some(o) = out {
                cfg.checkpoint_dir = Some(o.clone());
            }
            if let Some(c) = &cli.checkpoint {
                if *resume {
                    cfg.resume = Some(c.clone());
                } else {
                    cfg.init_from = Some(c.clone());
                }
            } else if *resume {
                bail!("--resume needs --checkpoint");
            }
            cfg.validate()?;
            let dir = cfg.checkpoint_dir.clone();
            let trainer = train(cfg)?;
            if let Some(last) = trainer.history.last() {
                println!("{} steps, last loss {:.6}", trainer.step, last.total);
            }
            match dir {
                Some(d) => println!("saved {}", d.join(FINAL_CHECKPOINT).display()),
                None => println!("no --out or checkpoint_dir given; the model was not saved"),
            }
        }
        Command::Eval { data, report, results } => {
            let ck = load_checkpoint::<f32>(require_checkpoint(&cli)?)?;
            let icfg: InferenceConfig = read_toml(cli.config.as_deref())?;
            let ds = read_dataset(data)?;
            let (scores, spotted) = evaluate(&ck.model, &ds, &icfg, 1)?;
            let table = scores.render();
            print!("{table}");
            if let Some(r) = report {
                std::fs::write(r, &table).with_context(|| format!("writing {}", r.display()))?;
            }
            if let Some(r) = results {
                write_results(r, &spotted)?;
            }
        }
        Command::Spot { images, lexicon, out } => {
            if images.is_empty() {
                bail!("no images given");
            }
            let ck = load_checkpoint::<f32>(require_checkpoint(&cli)?)?;
            let icfg: InferenceConfig = read_toml(cli.config.as_deref())?;
            let lex = lexicon.load()?;
            let mut all = Vec::with_capacity(images.len());
            for p in images {
                let img = open_image(p)?;
                all.push(spot(&ck.model, &img, &file_name(p), &icfg, &lex));
            }
            match out {
                Some(o) => write_results(o, &all)?,
                None => println!("{}", serde_json::to_string_pretty(&all)?),
            }
        }
        Command::Overlay {
            image,
            out,
            results,
            lexicon,
        } => {
            let img = open_image(image)?;
            let name = file_name(image);
            let drawn = match results {
                Some(r) => {
                    let all = read_results(r)?;
                    let res = all
                        .iter()
                        .find(|s| Path::new(&s.image).file_name().is_some_and(|n| n.to_string_lossy() == name))
                        .ok_or_else(|| anyhow!("{} has no entry for {name}", r.display()))?;
                    render_overlay(&img, res, None)
                }
                None => {
                    let ck = load_checkpoint::<f32>(require_checkpoint(&cli)?)?;
                    let icfg: InferenceConfig = read_toml(cli.config.as_deref())?;
                    let (res, traces) = spot_traced(&ck.model, &img, &name, &icfg, &lexicon.load()?);
                    render_overlay(&img, &res, Some(&traces))
                }
            };
            drawn.save(out).with_context(|| format!("writing {}", out.display()))?;
            info!("wrote {}", out.display());
        }
        Command::ConvertWeak { data, out } => {
            let ds = read_dataset(data)?;
            let weak = convert_to_weak(&ds, out)?;
            println!("converted {} images to anchor hints in {}", weak.len(), out.display());
        }
    }
    Ok(())
}

fn open_image(p: &Path) -> Result<image::RgbImage> {
    Ok(image::open(p).with_context(|| format!("reading {}", p.display()))?.to_rgb8())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// The error chain joined with `: `, skipping causes that the message
/// before them already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
