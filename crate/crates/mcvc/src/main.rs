use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcvc::commands::{self, DataKind, SampleSource};
use mcvc::config::{load_config, RunConfig};
use mcvc::{Error, Result};

#[derive(Parser)]
#[command(name = "mcvc", version, about = "Multi-concept video customization toolkit")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a generated data directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a video from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference image as `path=label`; repeatable.
        #[arg(long = "ref", value_name = "PATH=LABEL")]
        refs: Vec<String>,
        #[arg(long, default_value = "")]
        caption: String,
        /// Sample every case of a benchmark manifest instead.
        #[arg(long, conflicts_with_all = ["refs", "caption"])]
        bench: Option<PathBuf>,
    },
    /// Run the curation pipeline over a corpus manifest.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score generated videos against a benchmark manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write synthetic training data, a curation corpus or a benchmark.
    GenData {
        #[arg(long, value_parser = ["train", "corpus", "bench"])]
        kind: String,
    },
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.set.clone();
    if let Some(s) = cli.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(p) = &cli.out {
        o.push(format!("out={}", serde_json::Value::String(p.display().to_string())));
    }
    match &cli.command {
        Command::Train { data, steps } => {
            if let Some(d) = data {
                o.push(format!(
                    "train.data_dir={}",
                    serde_json::Value::String(d.display().to_string())
                ));
            }
            if let Some(s) = steps {
                o.push(format!("train.steps={s}"));
            }
        }
        Command::Curate { workers: Some(w), .. } => o.push(format!("curate.workers={w}")),
        Command::Eval { workers: Some(w), .. } => o.push(format!("eval.workers={w}")),
        _ => {}
    }
    o
}

fn parse_ref(s: &str) -> Result<(PathBuf, String)> {
    match s.rsplit_once('=') {
        Some((p, l)) if !p.is_empty() && !l.is_empty() => Ok((PathBuf::from(p), l.to_string())),
        _ => Err(Error::Usage(format!("--ref expects PATH=LABEL, got {s:?}"))),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg: RunConfig = load_config(cli.config.as_deref(), &overrides(cli))?;
    let manifest = match &cli.command {
        Command::Train { .. } => commands::cmd_train(&cfg)?,
        Command::Sample {
            checkpoint,
            refs,
            caption,
            bench,
        } => {
            let source = match bench {
                Some(m) => SampleSource::Bench { manifest: m.clone() },
                None => SampleSource::Single {
                    refs: refs.iter().map(|r| parse_ref(r)).collect::<Result<_>>()?,
                    caption: caption.clone(),
                },
            };
            commands::cmd_sample(&cfg, checkpoint, &source)?
        }
        Command::Curate { manifest, .. } => commands::cmd_curate(&cfg, manifest)?,
        Command::Eval {
            manifest, generated, ..
        } => commands::cmd_eval(&cfg, manifest, generated)?,
        Command::GenData { kind } => {
            let kind = DataKind::parse(kind).ok_or_else(|| Error::Usage(format!("unknown kind {kind}")))?;
            commands::cmd_gen_data(&cfg, kind)?
        }
    };
    println!(
        "{}: {} artifacts in {} ({:.1}s)",
        manifest.command,
        manifest.artifacts.len(),
        cfg.out.display(),
        manifest.wall_time_s
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
