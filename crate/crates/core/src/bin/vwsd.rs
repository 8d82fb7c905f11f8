use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vwsd_core::evaluation::polysemy_stats;
use vwsd_core::fusion::FuserKind;
use vwsd_core::pipeline::{
    load_model, run_pipeline, run_training, write_traces, PipelineConfig, PipelineError, Resources,
    EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "vwsd", version, about = "Visual word sense disambiguation engine")]
struct Cli {
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fuser: average, mlp, transformer or clip-aug.
    #[arg(long, global = true)]
    fuser: Option<FuserKind>,
    /// Number of retrieved images per prompt.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Softmax scale applied to cosine similarities.
    #[arg(long, global = true)]
    scale: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write per-sample stage traces; `--trace=PATH` picks the file
    /// (default traces.jsonl).
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "traces.jsonl")]
    trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline and report HIT@1 and MRR.
    Eval {
        /// Report file; standard output when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the configured fuser and write a checkpoint.
    Train {
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Fill the retrieval cache.
    Retrieve,
    /// Sense-count distribution of the dataset's target words.
    Stats {
        /// Machine-readable output with full precision.
        #[arg(long)]
        json: bool,
    },
    /// Print the stage trace of one sample.
    Trace {
        /// Sample id (zero-padded data row number).
        sample: String,
    },
    /// Print each sample's augmented prompt.
    Prompts,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let path = cli
        .config
        .as_deref()
        .ok_or(vwsd_core::pipeline::ConfigError::Missing("--config"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(f) = cli.fuser {
        cfg.fuser = f;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(s) = cli.scale {
        cfg.scale = s;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn stdout_write(bytes: &[u8]) -> Result<(), PipelineError> {
    let mut out = io::stdout().lock();
    out.write_all(bytes)
        .and_then(|_| out.flush())
        .map_err(|source| PipelineError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Eval { report } => {
            let model = load_model(&cfg)?;
            let run = run_pipeline(&cfg, &model)?;
            let text = run.report.to_jsonl();
            match report {
                Some(p) => write_file(p, text.as_bytes())?,
                None => stdout_write(text.as_bytes())?,
            }
            if let Some(p) = &cli.trace {
                let mut buf = Vec::new();
                write_traces(&run.traces, &mut buf).expect("writing to memory");
                write_file(p, &buf)?;
            }
            eprintln!(
                "{}: n={} HIT@1={:.4} MRR={:.4} (skipped rows: {})",
                cfg.fuser,
                run.report.records.len(),
                run.report.hit_at_1,
                run.report.mrr,
                run.skipped
            );
        }
        Command::Train { resume } => {
            let report = run_training(&cfg, *resume)?;
            for r in &report.history {
                let val = match (r.val_hit_at_1, r.val_mrr) {
                    (Some(h), Some(m)) => format!(" val HIT@1={h:.4} MRR={m:.4}"),
                    _ => String::new(),
                };
                eprintln!(
                    "epoch {}: loss={:.6} train HIT@1={:.4} MRR={:.4}{val}",
                    r.epoch, r.mean_loss, r.train_hit_at_1, r.train_mrr
                );
            }
        }
        Command::Retrieve => {
            if cfg.cache_dir.is_none() {
                return Err(vwsd_core::pipeline::ConfigError::Missing("cache_dir").into());
            }
            let mut res = Resources::load(&cfg)?;
            let stages = res.prompt_stages()?;
            let results = res.retrieve(&stages)?;
            eprintln!("retrieved top-{} images for {} prompts", cfg.k, results.len());
        }
        Command::Stats { json } => {
            let data = cfg.require("data", &cfg.data)?;
            let dataset = vwsd_core::pipeline::load_dataset(data, None)?;
            let inv_path = cfg.require("inventory", &cfg.inventory)?;
            let inventory = vwsd_core::disambiguation::SenseInventory::load(inv_path)?;
            let stats = polysemy_stats(dataset.samples.iter().map(|s| s.target.as_str()), &inventory);
            let pct = stats.percentages();
            if *json {
                let v = serde_json::json!({
                    "samples": stats.total(),
                    "counts": stats,
                    "percent": {
                        "one": pct[0],
                        "two": pct[1],
                        "three_or_more": pct[2],
                        "not_in_inventory": pct[3],
                    },
                });
                stdout_write(format!("{v}\n").as_bytes())?;
            } else {
                let counts = [stats.one, stats.two, stats.three_or_more, stats.not_in_inventory];
                let labels = ["1 sense", "2 senses", ">=3 senses", "not in inventory"];
                let mut out = format!("{:<18}{:>8}{:>9}\n", "bucket", "samples", "percent");
                for ((l, c), p) in labels.iter().zip(counts).zip(pct) {
                    out.push_str(&format!("{l:<18}{c:>8}{p:>9.1}\n"));
                }
                stdout_write(out.as_bytes())?;
            }
        }
        Command::Trace { sample } => {
            let model = load_model(&cfg)?;
            let run = run_pipeline(&cfg, &model)?;
            let t = run
                .traces
                .iter()
                .find(|t| &t.sample_id == sample)
                .ok_or_else(|| PipelineError::UnknownSample(sample.clone()))?;
            stdout_write(format!("{}\n", t.to_json()).as_bytes())?;
        }
        Command::Prompts => {
            let mut res = Resources::load(&cfg)?;
            let stages = res.prompt_stages()?;
            let mut out = String::new();
            for s in &stages {
                out.push_str(&format!("{}\t{}\n", s.sample.id, s.prompt));
            }
            stdout_write(out.as_bytes())?;
        }
    }
    Ok(())
}

