//! The alternating-phase training loop.
//!
//! Each epoch runs a supervised pass over the labeled pairs (collecting a
//! fresh latent store from that epoch's crops), then — when unlabeled data
//! is present — a latent-space pass that conditions each unlabeled latent
//! on the store and updates encoder parameters only. Adam uses the
//! standard bias-corrected update with a single shared step counter. All
//! randomness flows through one counter-based RNG whose exact state is
//! checkpointed, so an interrupted run resumes bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::{self, fnv1a64, Reader};
use crate::data::{random_crop, DatasetSplit, ImagePatch, LabeledPair};
use crate::error::{Error, Result};
use crate::gp::{pseudo_gt, GpConfig, LatentStore, LatentVector};
use crate::loss::{sup_loss, total_loss, unsup_loss, FeatureExtractor, LossReport};
use crate::metrics::{derain_full, psnr};
use crate::nn::{BoundModel, ModelConfig, NodeId, ParamSet, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Seed pair: `train` drives shuffles and crops, `features` fixes the
/// perceptual filter bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub features: u64,
}

/// When the latent store is rebuilt. Only one policy exists — the store
/// is refreshed by every labeled epoch so pseudo-GT always reflects the
/// current encoder — but the config names it so runs are self-describing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreRefresh {
    PerLabeledEpoch,
}

/// Every knob of a training run; serializes losslessly to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda_p: f64,
    pub lambda_unsup: f64,
    pub gp: GpConfig,
    pub model: ModelConfig,
    /// Square crop edge; must equal the model patch.
    pub crop: usize,
    pub seeds: Seeds,
    pub store_refresh: StoreRefresh,
    /// Labeled pairs held out (from the tail) for per-epoch validation
    /// PSNR; zero disables validation.
    pub val_count: usize,
    /// Rolling-checkpoint cadence in epochs.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk_default() -> TrainConfig {
        TrainConfig {
            lr: 2e-4,
            batch_size: 4,
            epochs: 60,
            lr_decay_factor: 0.5,
            lr_decay_every: 25,
            lambda_p: 0.04,
            lambda_unsup: 1.5e-4,
            gp: GpConfig::default(),
            model: ModelConfig::desk_default(),
            crop: 32,
            seeds: Seeds {
                train: 0,
                features: 0,
            },
            store_refresh: StoreRefresh::PerLabeledEpoch,
            val_count: 2,
            checkpoint_every: 10,
        }
    }

    /// `lr` and the lambdas may be zero for diagnostics; everything
    /// structural must be positive and self-consistent.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if !(self.lambda_p.is_finite() && self.lambda_p >= 0.0) {
            return Err(Error::Config("lambda_p must be >= 0".into()));
        }
        if !(self.lambda_unsup.is_finite() && self.lambda_unsup >= 0.0) {
            return Err(Error::Config("lambda_unsup must be >= 0".into()));
        }
        self.gp.validate()?;
        self.model.validate()?;
        if self.crop != self.model.patch {
            return Err(Error::Config(format!(
                "crop ({}) must equal the model patch ({})",
                self.crop, self.model.patch
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Stamp identifying the exact configuration, for resume safety.
pub fn config_hash(cfg: &TrainConfig) -> Result<u64> {
    Ok(fnv1a64(&serde_json::to_vec(cfg)?))
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam moment accumulators. One shared step counter covers all
/// parameters; parameters absent from a step's gradients keep their
/// moments untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn t(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
/// Gradients are validated before anything mutates, so a bad step leaves
/// parameters and state untouched.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Config(format!("adam lr must be >= 0, got {lr}")));
    }
    for (name, grad) in grads {
        let param = params.get(name).ok_or_else(|| {
            Error::Config(format!("gradient for unknown parameter {name}"))
        })?;
        if grad.len() != param.len() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient for {name}"),
                expected: format!("{} values", param.len()),
                got: format!("{} values", grad.len()),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient for {name}")));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, grad) in grads {
        let param = params.get_mut(name).expect("validated above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::flat(vec![0.0; grad.len()]));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::flat(vec![0.0; grad.len()]));
        let pv = param.values_mut();
        let mv = m.values_mut();
        let vv = v.values_mut();
        for i in 0..grad.len() {
            let g = grad.values()[i];
            mv[i] = ADAM_BETA1 * mv[i] + (1.0 - ADAM_BETA1) * g;
            vv[i] = ADAM_BETA2 * vv[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = mv[i] / bc1;
            let v_hat = vv[i] / bc2;
            pv[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Step-decayed learning rate: `lr * factor^(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

// ---------------------------------------------------------------------------
// Phases

fn scaled(tensor: Tensor, factor: f64) -> Tensor {
    let mut t = tensor;
    t.values_mut().iter_mut().for_each(|v| *v *= factor);
    t
}

/// One pass over the labeled pairs in shuffled batches: crop, forward,
/// supervised loss, Adam. Every image contributes its crop's latent to a
/// fresh store tagged with `epoch_tag`, whether or not the step moves the
/// parameters (lr may be zero).
#[allow(clippy::too_many_arguments)]
pub fn labeled_epoch(
    pairs: &[LabeledPair],
    params: &mut ParamSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
    fx: &FeatureExtractor,
    rng: &mut ChaCha8Rng,
    lr: f64,
    mut on_step: impl FnMut(LossReport),
) -> Result<LatentStore> {
    if pairs.is_empty() {
        return Err(Error::Config("labeled epoch needs at least one pair".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut store = LatentStore::new(0);

    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let tag = |e: Error| e.context(format!("labeled batch {batch_idx}"));
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, params);
        let scale = 1.0 / chunk.len() as f64;
        let mut seeds: Vec<(NodeId, Tensor)> = Vec::new();
        let mut reports = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let pair = &pairs[idx];
            let (rainy, clean) =
                random_crop(&pair.rainy, &pair.clean, (cfg.crop, cfg.crop), rng).map_err(tag)?;
            let pass = bound.derain_pass(&mut tape, &rainy.to_tensor()).map_err(tag)?;
            let sup = sup_loss(
                &mut tape,
                pass.prediction,
                &clean.to_tensor(),
                fx,
                cfg.lambda_p,
            )
            .map_err(tag)?;
            let z = tape.value(pass.enc.latent).values().to_vec();
            store
                .push(LatentVector::new(z, format!("labeled/{idx:04}"))?)
                .map_err(tag)?;
            reports.push(total_loss(Some(&sup), None, cfg.lambda_unsup));
            seeds.extend(sup.seeds.into_iter().map(|(n, t)| (n, scaled(t, scale))));
        }
        let grads = tape.backward(&seeds).map_err(tag)?;
        adam_step(params, &grads, state, lr).map_err(tag)?;
        on_step(LossReport::mean_of(&reports));
    }
    Ok(store)
}

/// One pass over the unlabeled inputs: crop, encode, GP pseudo-GT from
/// `store`, latent-space loss, Adam on whatever the latent seed reaches —
/// the encoder only, which freezes the decoder bit-exactly. With
/// `lambda_unsup == 0` the loss is still reported but no step runs.
#[allow(clippy::too_many_arguments)]
pub fn unlabeled_epoch(
    inputs: &[ImagePatch],
    store: &LatentStore,
    params: &mut ParamSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    lr: f64,
    mut on_step: impl FnMut(LossReport),
) -> Result<()> {
    if store.is_empty() {
        return Err(Error::PhaseOrder(
            "unlabeled phase before any labeled epoch".into(),
        ));
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(rng);

    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let tag = |e: Error| e.context(format!("unlabeled batch {batch_idx}"));
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, params);
        let scale = cfg.lambda_unsup / chunk.len() as f64;
        let mut seeds: Vec<(NodeId, Tensor)> = Vec::new();
        let mut reports = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let img = &inputs[idx];
            let (crop, _) =
                random_crop(img, img, (cfg.crop, cfg.crop), rng).map_err(tag)?;
            let enc = bound.encode(&mut tape, &crop.to_tensor()).map_err(tag)?;
            let z = tape.value(enc.latent).values().to_vec();
            let query = LatentVector::new(z.clone(), format!("unlabeled/{idx:04}"))?;
            let (posterior, far_variance) = pseudo_gt(&query, store, &cfg.gp).map_err(tag)?;
            let unsup =
                unsup_loss(&z, &posterior, far_variance, cfg.gp.log_clamp).map_err(tag)?;
            reports.push(total_loss(None, Some(&unsup), cfg.lambda_unsup));
            let seed = Tensor::flat(unsup.z_seed.iter().map(|v| v * scale).collect());
            seeds.push((enc.latent, seed));
        }
        if cfg.lambda_unsup > 0.0 {
            let grads = tape.backward(&seeds).map_err(tag)?;
            adam_step(params, &grads, state, lr).map_err(tag)?;
        }
        on_step(LossReport::mean_of(&reports));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Full training state at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub params: ParamSet,
    pub adam: AdamState,
    /// Epochs completed — the next epoch index to run.
    pub epoch_next: u64,
    /// Metrics rows written so far.
    pub global_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub config_hash: u64,
}

impl CheckpointRecord {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn snapshot_rng(rng: &ChaCha8Rng) -> ([u8; 32], u64, u128) {
        (rng.get_seed(), rng.get_stream(), rng.get_word_pos())
    }
}

pub fn save_checkpoint(rec: &CheckpointRecord, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(e, path))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(e, path);
    w.write_all(b"S2RK").map_err(io)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io)?;
    w.write_all(&rec.config_hash.to_le_bytes()).map_err(io)?;
    w.write_all(&rec.epoch_next.to_le_bytes()).map_err(io)?;
    w.write_all(&rec.global_step.to_le_bytes()).map_err(io)?;
    w.write_all(&rec.rng_seed).map_err(io)?;
    w.write_all(&rec.rng_stream.to_le_bytes()).map_err(io)?;
    w.write_all(&rec.rng_word_pos.to_le_bytes()).map_err(io)?;
    w.write_all(&rec.adam.t.to_le_bytes()).map_err(io)?;
    debug_assert_eq!(rec.adam.m.len(), rec.adam.v.len());
    w.write_all(&(rec.adam.m.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, m) in &rec.adam.m {
        let v = rec.adam.v.get(name).ok_or_else(|| {
            Error::Format(format!("adam moments out of sync for {name}"))
        })?;
        bytes::write_string(&mut w, name).map_err(io)?;
        w.write_all(&(m.len() as u64).to_le_bytes()).map_err(io)?;
        bytes::write_f64s(&mut w, m.values()).map_err(io)?;
        bytes::write_f64s(&mut w, v.values()).map_err(io)?;
    }
    rec.params.write_block(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let file = fs::File::open(path).map_err(|e| Error::io(e, path))?;
    let mut r = Reader::new(BufReader::new(file));
    let rec = read_checkpoint(&mut r)
        .and_then(|rec| r.expect_eof("training checkpoint").map(|()| rec));
    rec.map_err(|e| e.context(format!("while reading {}", path.display())))
}

fn read_checkpoint(r: &mut Reader<impl Read>) -> Result<CheckpointRecord> {
    r.expect_magic(b"S2RK", "training checkpoint")?;
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_hash = r.u64()?;
    let epoch_next = r.u64()?;
    let global_step = r.u64()?;
    let rng_seed = r.bytes_array::<32>()?;
    let rng_stream = r.u64()?;
    let rng_word_pos = r.u128()?;
    let t = r.u64()?;
    let count = r.u64()? as usize;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let n = r.u64()? as usize;
        m.insert(name.clone(), Tensor::flat(r.f64_vec(n)?));
        v.insert(name, Tensor::flat(r.f64_vec(n)?));
    }
    let params = ParamSet::read_block(r)?;
    Ok(CheckpointRecord {
        params,
        adam: AdamState { m, v, t },
        epoch_next,
        global_step,
        rng_seed,
        rng_stream,
        rng_word_pos,
        config_hash,
    })
}

// ---------------------------------------------------------------------------
// The full loop

/// What `train` hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub epochs_completed: usize,
    /// Validation PSNR of the last epoch run, if validation is enabled.
    pub final_val_psnr: Option<f64>,
    pub store_rows: usize,
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    lr: f64,
    store_rows: usize,
    val_psnr: Option<f64>,
}

const METRICS_HEADER: &str =
    "step,phase,l1,perceptual,unsup_fidelity,logvar_near,logvar_far,total,clamped_count\n";

/// Truncates `path` to its first `keep` lines (resume rewinds the streams
/// to exactly the checkpointed position). Errors if the file is shorter.
fn rewind_lines(path: &Path, keep: usize) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(e, path))?;
    let mut kept = String::new();
    let mut count = 0;
    for line in text.lines() {
        if count == keep {
            break;
        }
        kept.push_str(line);
        kept.push('\n');
        count += 1;
    }
    if count < keep {
        return Err(Error::Incompatible(format!(
            "{} has {count} lines but the checkpoint expects {keep}",
            path.display()
        )));
    }
    Ok(kept)
}

/// Runs (or resumes) the alternating loop and writes every artifact under
/// `out_dir`: `config.json`, `metrics.csv`, `epochs.jsonl`,
/// `checkpoint.ckpt` (rolling), `model.ckpt`, and `store.gpls`.
///
/// `supervised_only` skips the unlabeled phase (the labeled-only
/// baseline); `stop_after` ends the run early at an epoch boundary, with
/// a checkpoint, so a later call can resume.
pub fn train(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    out_dir: &Path,
    supervised_only: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::Config("training needs labeled pairs".into()));
    }
    if cfg.val_count >= split.labeled.len() {
        return Err(Error::Config(format!(
            "val_count {} leaves no training pairs out of {}",
            cfg.val_count,
            split.labeled.len()
        )));
    }
    let train_pairs = &split.labeled[..split.labeled.len() - cfg.val_count];
    let val_pairs = &split.labeled[split.labeled.len() - cfg.val_count..];
    let hash = config_hash(cfg)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(e, out_dir))?;
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(e, &config_path))?;

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let epochs_path = out_dir.join("epochs.jsonl");

    // Fresh state, or the checkpointed state with both streams rewound to
    // the exact line counts the checkpoint recorded.
    let (mut params, mut adam, mut rng, start_epoch, mut step) = if ckpt_path.is_file() {
        let rec = load_checkpoint(&ckpt_path)?;
        if rec.config_hash != hash {
            return Err(Error::Incompatible(
                "checkpoint was written by a different configuration; refusing to resume".into(),
            ));
        }
        let metrics = rewind_lines(&metrics_path, 1 + rec.global_step as usize)?;
        fs::write(&metrics_path, metrics).map_err(|e| Error::io(e, &metrics_path))?;
        let epochs = rewind_lines(&epochs_path, rec.epoch_next as usize)?;
        fs::write(&epochs_path, epochs).map_err(|e| Error::io(e, &epochs_path))?;
        let rng = rec.rng();
        (
            rec.params,
            rec.adam,
            rng,
            rec.epoch_next as usize,
            rec.global_step,
        )
    } else {
        fs::write(&metrics_path, METRICS_HEADER).map_err(|e| Error::io(e, &metrics_path))?;
        fs::write(&epochs_path, "").map_err(|e| Error::io(e, &epochs_path))?;
        (
            ParamSet::init(&cfg.model)?,
            AdamState::new(),
            ChaCha8Rng::seed_from_u64(cfg.seeds.train),
            0usize,
            0u64,
        )
    };

    let fx = FeatureExtractor::new(cfg.model.in_channels, cfg.seeds.features);
    let mut metrics_file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(e, &metrics_path))?;
    let mut epochs_file = fs::OpenOptions::new()
        .append(true)
        .open(&epochs_path)
        .map_err(|e| Error::io(e, &epochs_path))?;

    let end_epoch = stop_after
        .map(|s| s.min(cfg.epochs))
        .unwrap_or(cfg.epochs);
    let mut last_store_rows = 0usize;
    let mut final_val = None;

    for epoch in start_epoch..end_epoch {
        let lr = lr_at(epoch, cfg);
        let mut rows = String::new();
        let log = |phase: &str, r: LossReport, step: &mut u64, rows: &mut String| {
            *step += 1;
            rows.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                step,
                phase,
                r.l1,
                r.perceptual,
                r.unsup_fidelity,
                r.unsup_logvar_near,
                r.unsup_logvar_far,
                r.total,
                r.clamped_count
            ));
        };

        let etag = |e: Error| e.context(format!("epoch {epoch}"));
        let store = labeled_epoch(
            train_pairs,
            &mut params,
            &mut adam,
            cfg,
            &fx,
            &mut rng,
            lr,
            |r| log("labeled", r, &mut step, &mut rows),
        )
        .map_err(etag)?;
        if !supervised_only && !split.unlabeled.is_empty() {
            unlabeled_epoch(
                &split.unlabeled,
                &store,
                &mut params,
                &mut adam,
                cfg,
                &mut rng,
                lr,
                |r| log("unlabeled", r, &mut step, &mut rows),
            )
            .map_err(etag)?;
        }
        metrics_file
            .write_all(rows.as_bytes())
            .map_err(|e| Error::io(e, &metrics_path))?;
        metrics_file.flush().map_err(|e| Error::io(e, &metrics_path))?;

        let val_psnr = if cfg.val_count > 0 {
            let mut sum = 0.0;
            for pair in val_pairs {
                let out = derain_full(&pair.rainy, &params).map_err(etag)?;
                sum += psnr(&out, &pair.clean, 1.0).map_err(etag)?;
            }
            Some(sum / val_pairs.len() as f64)
        } else {
            None
        };
        final_val = val_psnr;
        last_store_rows = store.len();
        let line = serde_json::to_string(&EpochLine {
            epoch,
            lr,
            store_rows: store.len(),
            val_psnr,
        })?;
        epochs_file
            .write_all(format!("{line}\n").as_bytes())
            .map_err(|e| Error::io(e, &epochs_path))?;
        epochs_file.flush().map_err(|e| Error::io(e, &epochs_path))?;

        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == end_epoch {
            let (rng_seed, rng_stream, rng_word_pos) = CheckpointRecord::snapshot_rng(&rng);
            save_checkpoint(
                &CheckpointRecord {
                    params: params.clone(),
                    adam: adam.clone(),
                    epoch_next: done as u64,
                    global_step: step,
                    rng_seed,
                    rng_stream,
                    rng_word_pos,
                    config_hash: hash,
                },
                &ckpt_path,
            )?;
        }

        if done == cfg.epochs {
            params.save(&out_dir.join("model.ckpt"))?;
            store.save(&out_dir.join("store.gpls"))?;
        }
    }

    // Resuming a finished run rewrites the final model from the
    // checkpointed parameters without touching the streams.
    if start_epoch >= end_epoch && end_epoch == cfg.epochs {
        params.save(&out_dir.join("model.ckpt"))?;
    }

    Ok(TrainOutcome {
        params,
        epochs_completed: end_epoch.saturating_sub(start_epoch),
        final_val_psnr: final_val,
        store_rows: last_store_rows,
    })
}
