use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use deco_core::data::ContactDataset;
use deco_core::mesh::{load_template, BrushCache, TemplateMesh};
use deco_core::pipeline::{self, GenerateOptions, Profile, TrainConfig, DEFAULT_MIN_PART_VERTICES};
use deco_core::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "deco", version, about = "Dense human-scene contact estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        /// Generator settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `name=count`, repeatable. Defaults to `train=<count>`.
        #[arg(long = "split", value_parser = parse_split)]
        splits: Vec<(String, usize)>,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a JSONL log and checkpoints.
    Train {
        /// Training settings (JSON); the profile supplies anything missing.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict contact for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset histograms and the aggregate contact probability mesh.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_PART_VERTICES)]
        min_vertices: usize,
    },
    /// Run the annotation HTTP server.
    AnnotateServe {
        /// Template mesh (OBJ/PLY); the desk body when omitted.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 24)]
        parts: usize,
        /// Published brush radii in meters.
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.05,0.1")]
        radii: Vec<f64>,
        /// Service settings (JSON): tasks, qualification set, reviewers, token.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Append-only event log, replayed on startup.
        #[arg(long, default_value = "annotation_log.jsonl")]
        log: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn parse_split(s: &str) -> Result<(String, usize), String> {
    let (name, count) = s.split_once('=').ok_or("expected name=count")?;
    let count = count.parse().map_err(|e| format!("bad count: {e}"))?;
    Ok((name.to_string(), count))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_config(
    config: Option<&Path>,
    profile: ProfileArg,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => {
            // a partial file is completed from the profile, not from desk defaults
            let base = serde_json::to_value(TrainConfig::profile(profile.into()))?;
            let given: serde_json::Value = read_json(path)?;
            serde_json::from_value(merge(base, given))?
        }
        None => TrainConfig::profile(profile.into()),
    };
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(e) = epochs {
        cfg.optimizer.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds =
        ContactDataset::load(&cfg.dataset).with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    let template = pipeline::load_dataset_template(&cfg.dataset, &ds)?;
    cfg.fit_to_dataset(&ds, &template);
    Ok(cfg)
}

fn merge(base: serde_json::Value, over: serde_json::Value) -> serde_json::Value {
    match (base, over) {
        (serde_json::Value::Object(mut b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            serde_json::Value::Object(b)
        }
        (_, o) => o,
    }
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            splits,
            count,
            seed,
            out,
        } => {
            let cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            let splits = if splits.is_empty() {
                vec![("train".to_string(), count)]
            } else {
                splits
            };
            let ds = pipeline::cmd_generate(&cfg, &GenerateOptions { seed, splits }, &out)?;
            eprintln!("wrote {} records to {}", ds.records.len(), out.display());
        }
        Command::Train {
            config,
            profile,
            dataset,
            out,
            epochs,
            seed,
            resume,
        } => {
            let cfg = train_config(config.as_deref(), profile, dataset, out, epochs, seed)?;
            let outcome = pipeline::cmd_train(&cfg, resume.as_deref())?;
            eprintln!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let report = pipeline::cmd_eval(&checkpoint, &dataset, &split)?;
            if let Some(p) = out {
                fs::write(&p, report.to_json()?).with_context(|| format!("writing {}", p.display()))?;
            }
            print_json(&report)?;
        }
        Command::Infer { checkpoint, image, out } => {
            let result = pipeline::cmd_infer(&checkpoint, &image, &out)?;
            eprintln!(
                "{} vertices in {:.3} s; wrote {}",
                result.probabilities.len(),
                result.seconds,
                out.display()
            );
        }
        Command::Stats {
            dataset,
            out,
            min_vertices,
        } => {
            let stats = pipeline::cmd_stats(&dataset, &out, min_vertices)?;
            print_json(&serde_json::json!({
                "record_count": stats.record_count,
                "object_histogram": stats.object_histogram,
                "part_histogram": stats.part_histogram,
            }))?;
        }
        Command::AnnotateServe {
            template,
            parts,
            radii,
            config,
            log,
            addr,
        } => {
            let mesh = match template {
                Some(p) => load_template(&p, parts)?,
                None => TemplateMesh::desk_body(3, parts)?,
            };
            let cache = BrushCache::precompute(&mesh.edge_graph(), &radii)?;
            let service = match config {
                Some(p) => read_json(&p)?,
                None => deco_annotate::ServiceConfig::default(),
            };
            let app = deco_annotate::build(mesh, cache, service, Some(&log)).map_err(|e| anyhow::anyhow!("{e}"))?;
            eprintln!("annotation server on http://{addr}");
            tokio::runtime::Runtime::new()?.block_on(deco_annotate::serve(addr, app))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
