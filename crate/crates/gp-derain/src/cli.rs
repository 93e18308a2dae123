//! Command-line front end: `gen-data`, `train`, `eval`, `gp-inspect`.
//!
//! Every command is reproducible from its flags, config, and seeds, and
//! writes a record of its resolved settings next to its outputs. Logs go
//! to standard error; machine-readable results go to files (or, for
//! `gp-inspect`, a JSON document on standard output). Exit codes: 0 ok,
//! 2 usage, 3 I/O, 4 format/compatibility, 5 numeric failure.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::data::{
    generate_dataset, load_dataset, load_image, write_dataset, GenSpec, RegimeKind,
};
use crate::error::{Error, Result};
use crate::gp::{pseudo_gt, select_neighbors, GpConfig, LatentStore, LatentVector, NeighborKind};
use crate::metrics::{evaluate, write_eval_artifacts};
use crate::nn::{encode_latent, ParamSet};
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "gp-derain",
    version,
    about = "Semi-supervised single-image deraining with GP latent pseudo-labels"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeArg {
    /// Sparse, near-vertical streaks (the synthetic-labeled look).
    Labeled,
    /// Dense, wide-angle, stronger streaks (the unlabeled-like look).
    Shifted,
}

impl From<RegimeArg> for RegimeKind {
    fn from(value: RegimeArg) -> RegimeKind {
        match value {
            RegimeArg::Labeled => RegimeKind::Labeled,
            RegimeArg::Shifted => RegimeKind::Shifted,
        }
    }
}

fn parse_size(text: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {text:?}"))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad dimension {s:?} in {text:?}"))
    };
    Ok((parse(h)?, parse(w)?))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic rainy/clean dataset directory.
    GenData {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of base images.
        #[arg(long)]
        count: usize,
        /// Image size as HxW, e.g. 32x32.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        /// Fraction of images kept as labeled pairs, in (0, 1].
        #[arg(long)]
        fraction_labeled: f64,
        #[arg(long)]
        seed: u64,
        /// Streak regime for the labeled pairs; unlabeled inputs always
        /// use the shifted regime.
        #[arg(long, value_enum, default_value_t = RegimeArg::Labeled)]
        regime: RegimeArg,
    },
    /// Train on a dataset directory (resumes from its checkpoint if the
    /// output directory has one).
    Train {
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Training configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics, checkpoints, and the model.
        #[arg(long)]
        out: PathBuf,
        /// Skip the unlabeled phase (the labeled-only baseline).
        #[arg(long)]
        supervised_only: bool,
        /// Stop at this epoch boundary (with a checkpoint) instead of
        /// training to completion; a rerun resumes from there.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a trained model on a dataset's labeled pairs.
    Eval {
        /// Model checkpoint (model.ckpt).
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory whose labeled pairs form the test set.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the report and derained images.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect the GP view of one query image against a latent store.
    GpInspect {
        /// Latent store file (store.gpls).
        #[arg(long)]
        store: PathBuf,
        /// Query image (PGM); must match the model patch size.
        #[arg(long)]
        query_image: PathBuf,
        /// Model checkpoint supplying the encoder.
        #[arg(long)]
        model: PathBuf,
        /// Neighbor listing length (defaults to the whole store).
        #[arg(long)]
        top: Option<usize>,
    },
}

/// Parses the process arguments, dispatches, and returns the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            count,
            size,
            fraction_labeled,
            seed,
            regime,
        } => {
            let spec = GenSpec {
                count,
                height: size.0,
                width: size.1,
                fraction_labeled,
                seed,
                labeled_regime: regime.into(),
            };
            let (data, manifest) = generate_dataset(&spec)?;
            write_dataset(&out, &data, &manifest)?;
            eprintln!(
                "wrote {} labeled pairs and {} unlabeled inputs to {}",
                manifest.labeled_count,
                manifest.unlabeled_count,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            supervised_only,
            stop_after,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(e, &config))?;
            let cfg: TrainConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("bad config {}: {e}", config.display())))?;
            let (split, _) = load_dataset(&data)?;
            let outcome = train(&split, &cfg, &out, supervised_only, stop_after)?;
            match outcome.final_val_psnr {
                Some(v) => eprintln!(
                    "trained {} epochs; validation psnr {v:.3} dB",
                    outcome.epochs_completed
                ),
                None => eprintln!("trained {} epochs", outcome.epochs_completed),
            }
            Ok(())
        }
        Command::Eval { model, data, out } => {
            let params = ParamSet::load(&model)?;
            let (split, _) = load_dataset(&data)?;
            let (report, outputs) = evaluate(&params, &split.labeled)?;
            write_eval_artifacts(&report, &outputs, &out)?;
            let echo = json!({
                "model": model.display().to_string(),
                "data": data.display().to_string(),
                "model_config": params.config(),
            });
            let echo_path = out.join("eval_config.json");
            fs::write(&echo_path, serde_json::to_string_pretty(&echo)?)
                .map_err(|e| Error::io(e, &echo_path))?;
            eprintln!(
                "evaluated {} pairs: mean psnr {:.3} dB, mean ssim {:.4}",
                report.rows.len(),
                report.mean_psnr_db,
                report.mean_ssim
            );
            Ok(())
        }
        Command::GpInspect {
            store,
            query_image,
            model,
            top,
        } => {
            let store = LatentStore::load(&store)?;
            let params = ParamSet::load(&model)?;
            let image = load_image(&query_image)?;
            let z = encode_latent(&image.to_tensor(), &params)?;
            let query = LatentVector::new(z, query_image.display().to_string())?;

            let gp = GpConfig::default();
            let (posterior, far_variance) = pseudo_gt(&query, &store, &gp)?;
            let listing = |kind: NeighborKind| -> Result<Vec<serde_json::Value>> {
                let budget = top.unwrap_or(store.len());
                let set = select_neighbors(&query, &store, budget, kind)?;
                Ok(set
                    .indices
                    .iter()
                    .zip(&set.similarities)
                    .map(|(&i, &s)| {
                        json!({
                            "source_id": store.rows()[i].source_id(),
                            "similarity": s,
                        })
                    })
                    .collect())
            };
            let near_clamped = posterior.variance < gp.log_clamp;
            let far_clamped = far_variance.map(|v| 1.0 - v < gp.log_clamp);
            let doc = json!({
                "store_rows": store.len(),
                "latent_dim": store.dim(),
                "nearest": listing(NeighborKind::Nearest)?,
                "farthest": listing(NeighborKind::Farthest)?,
                "variance_near": posterior.variance,
                "variance_far": far_variance,
                "log_clamp": gp.log_clamp,
                "near_log_clamped": near_clamped,
                "far_log_clamped": far_clamped,
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
    }
}
