//! `cmbseg`: train, apply and evaluate the two-stage microbleed pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmbseg_core::catalog::ModelGroup;
use cmbseg_core::config::RunConfig;
use cmbseg_core::pipeline::{self, OverlaySlices};
use cmbseg_core::{exec, Result};

#[derive(Parser, Debug)]
#[command(name = "cmbseg", version, about = "Two-stage cerebral microbleed detection and segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file; every key not set there keeps its default.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Model group to train or to read models from.
    #[arg(long, global = true)]
    group: Option<ModelGroup>,
    /// Group that synthetic subject ids (starting with 9) belong to.
    #[arg(long, global = true)]
    phantom_group: Option<ModelGroup>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Extra `key=value` config assignments, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train detector and segmenter for one group.
    Train {
        /// Re-run with the config recorded in a training manifest.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
    },
    /// Predict binary masks for subjects under the data root.
    Predict {
        /// Subject ids; all subjects of the data root when empty.
        ids: Vec<String>,
    },
    /// Score predictions against annotations.
    Evaluate {
        /// Subject ids; all subjects of the data root when empty.
        ids: Vec<String>,
        /// Slices to render as overlays; slices with lesions when absent.
        #[arg(long, value_delimiter = ',')]
        slices: Option<Vec<usize>>,
        #[arg(long, conflicts_with = "slices")]
        no_overlays: bool,
    },
    /// Write synthetic phantom subjects.
    Phantom {
        #[arg(short, long)]
        n: usize,
        /// Destination; the data root when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render confusion images from the stored cohort table.
    Plot,
    /// List subjects with their group, shape and spacing.
    Catalog,
    /// Print the effective config.
    Config,
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(g) = c.group {
        cfg.group = g;
    }
    if let Some(g) = c.phantom_group {
        cfg.phantom_group = Some(g);
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(d) = &c.data {
        cfg.data_root = d.clone();
    }
    if let Some(o) = &c.output {
        cfg.output_dir = o.clone();
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| cmbseg_core::Error::InvalidArgument(format!("expected KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn all_ids(cfg: &RunConfig, ids: &[String]) -> Result<Vec<String>> {
    if ids.is_empty() {
        cmbseg_core::catalog::discover_subjects(&cfg.data_root)
    } else {
        Ok(ids.to_vec())
    }
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::Train { from_manifest } => {
            let s = match from_manifest {
                Some(p) => pipeline::cmd_train_from_manifest(p)?,
                None => pipeline::cmd_train(cfg)?,
            };
            println!("threshold {}", s.threshold.value);
            println!("train {}", s.train_ids.join(","));
            println!("val {}", s.val_ids.join(","));
            println!("models {}", s.model_dir.display());
        }
        Command::Predict { ids } => {
            for o in pipeline::cmd_predict_many(cfg, &all_ids(cfg, ids)?)? {
                println!("{}\t{}\t{}", o.id, o.lesion_voxels, o.mask_path.display());
            }
        }
        Command::Evaluate {
            ids,
            slices,
            no_overlays,
        } => {
            let overlays = match (slices, no_overlays) {
                (_, true) => OverlaySlices::None,
                (Some(v), _) => OverlaySlices::List(v.clone()),
                (None, false) => OverlaySlices::Lesions,
            };
            let out = pipeline::cmd_evaluate(cfg, &all_ids(cfg, ids)?, &overlays)?;
            print!("{}", cmbseg_core::evaluation::cohorts_table(&out.summary));
        }
        Command::Phantom { n, out } => {
            let root = out.clone().unwrap_or_else(|| cfg.data_root.clone());
            for id in pipeline::cmd_phantom(cfg, *n, &root)? {
                println!("{}", root.join(id).display());
            }
        }
        Command::Plot => {
            for p in pipeline::cmd_plot(cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Catalog => {
            for line in pipeline::cmd_catalog(cfg)? {
                println!("{line}");
            }
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(&cli.common).and_then(|cfg| exec::with_workers(cfg.workers, || run(&cli, &cfg)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
