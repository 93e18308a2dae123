//! Trains a down-scaled model for a few epochs on a generated dataset
//! and prints the per-epoch log plus the artifacts a run leaves behind.
//!
//!     cargo run --example train_tiny [out-dir]

use std::path::PathBuf;

use gp_derain::data::{generate_dataset, GenSpec, RegimeKind};
use gp_derain::nn::{Activation, ModelConfig};
use gp_derain::train::{train, TrainConfig};
use gp_derain::Result;

fn main() -> Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gp-derain-train-tiny"));
    if out.exists() {
        // A leftover checkpoint would turn this run into a resume.
        std::fs::remove_dir_all(&out)?;
    }

    let spec = GenSpec {
        count: 12,
        height: 16,
        width: 16,
        fraction_labeled: 0.5,
        seed: 21,
        labeled_regime: RegimeKind::Labeled,
    };
    let (split, manifest) = generate_dataset(&spec)?;
    println!(
        "dataset: {} labeled pairs, {} unlabeled inputs ({}x{})",
        manifest.labeled_count, manifest.unlabeled_count, manifest.height, manifest.width
    );

    let mut cfg = TrainConfig::desk_default();
    cfg.model = ModelConfig {
        patch: 16,
        in_channels: 1,
        widths: [4, 6, 8],
        latent_dim: 16,
        activation: Activation::Relu,
        seed: 0,
    };
    cfg.crop = 16;
    cfg.epochs = 4;
    cfg.batch_size = 2;
    cfg.val_count = 2;
    cfg.checkpoint_every = 2;

    let outcome = train(&split, &cfg, &out, false, None)?;
    println!();
    for line in std::fs::read_to_string(out.join("epochs.jsonl"))?.lines() {
        println!("  {line}");
    }
    println!(
        "\ncompleted {} epochs; final validation psnr {:.3} dB; {} latents in the store",
        outcome.epochs_completed,
        outcome.final_val_psnr.unwrap(),
        outcome.store_rows,
    );

    println!("\nartifacts in {}:", out.display());
    let mut names: Vec<String> = std::fs::read_dir(&out)?
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for n in names {
        println!("  {n}");
    }
    println!("\ndelete the directory (or pass a fresh one) to start over;");
    println!("rerunning against an interrupted directory resumes from its checkpoint");
    Ok(())
}
