//! Training losses and their gradient seeds.
//!
//! Losses here produce two things: scalar values for reporting, and seed
//! tensors that are fed to [`Tape::backward`](crate::nn::Tape::backward) at
//! the nodes they score. The supervised loss is `L1 + lambda_p * Lp`, with
//! `Lp` an L2 distance in the feature space of a fixed random conv bank.
//! The unsupervised loss scores a latent against its GP pseudo ground
//! truth: an unsquared L2 fidelity term plus log-variance terms whose
//! arguments are floored (clamp events are counted, floored logs still
//! contribute). Only the fidelity term carries gradient; the pseudo mean
//! and the variances are constants of the step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::nn::{NodeId, Shape, Tape, Tensor};

/// Fixed (non-trainable) two-layer convolutional feature bank with 2x
/// downsampling after each layer. Stands in for a pretrained perceptual
/// network at desk scale; the filters are seeded, not learned.
pub struct FeatureExtractor {
    in_channels: usize,
    channels: usize,
    w1: Tensor,
    w2: Tensor,
    seed: u64,
}

impl FeatureExtractor {
    pub const DEFAULT_CHANNELS: usize = 8;

    pub fn new(in_channels: usize, seed: u64) -> Self {
        let channels = Self::DEFAULT_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound1 = 1.0 / ((in_channels * 9) as f64).sqrt();
        let w1: Vec<f64> = (0..channels * in_channels * 9)
            .map(|_| rng.gen_range(-bound1..bound1))
            .collect();
        let bound2 = 1.0 / ((channels * 9) as f64).sqrt();
        let w2: Vec<f64> = (0..channels * channels * 9)
            .map(|_| rng.gen_range(-bound2..bound2))
            .collect();
        FeatureExtractor {
            in_channels,
            channels,
            w1: Tensor::flat(w1),
            w2: Tensor::flat(w2),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Zero-filter variant: features vanish identically. Diagnostic only.
    pub fn zeroed(in_channels: usize) -> Self {
        let channels = Self::DEFAULT_CHANNELS;
        FeatureExtractor {
            in_channels,
            channels,
            w1: Tensor::flat(vec![0.0; channels * in_channels * 9]),
            w2: Tensor::flat(vec![0.0; channels * channels * 9]),
            seed: 0,
        }
    }

    /// Records the bank on the tape so gradients can flow back into `x`.
    /// Input spatial dims must be divisible by 4.
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = match tape.value(x).shape() {
            Shape::Chw(c, h, w) => (c, h, w),
            s => {
                return Err(Error::ShapeMismatch {
                    context: "feature extractor input".into(),
                    expected: "channels-first image".into(),
                    got: s.to_string(),
                })
            }
        };
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "feature extractor input".into(),
                expected: format!("{} channels", self.in_channels),
                got: format!("{c} channels"),
            });
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch {
                context: "feature extractor input".into(),
                expected: "spatial dims divisible by 4".into(),
                got: format!("{h}x{w}"),
            });
        }
        let w1 = tape.input(self.w1.clone());
        let b1 = tape.input(Tensor::flat(vec![0.0; self.channels]));
        let c1 = tape.conv3x3(x, w1, b1)?;
        let r1 = tape.relu(c1);
        let d1 = tape.downsample2(r1)?;
        let w2 = tape.input(self.w2.clone());
        let b2 = tape.input(Tensor::flat(vec![0.0; self.channels]));
        let c2 = tape.conv3x3(d1, w2, b2)?;
        let r2 = tape.relu(c2);
        tape.downsample2(r2)
    }

    /// Feature tensor without tracking gradients (for targets).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let out = self.apply(&mut tape, xi)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-step loss readings; what the metrics CSV rows are made of.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub unsup_fidelity: f64,
    pub unsup_logvar_near: f64,
    pub unsup_logvar_far: f64,
    /// Weighted objective: `(l1 + lambda_p * perceptual) + lambda_unsup *
    /// (fidelity + logvar_near + logvar_far)`, with absent sides at zero.
    pub total: f64,
    /// Number of floored logarithm arguments that fed this report.
    pub clamped_count: u32,
}

impl LossReport {
    /// Element-wise mean over sample reports; clamp events add up.
    pub fn mean_of(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.l1 += r.l1;
            out.perceptual += r.perceptual;
            out.unsup_fidelity += r.unsup_fidelity;
            out.unsup_logvar_near += r.unsup_logvar_near;
            out.unsup_logvar_far += r.unsup_logvar_far;
            out.total += r.total;
            out.clamped_count += r.clamped_count;
        }
        out.l1 /= n;
        out.perceptual /= n;
        out.unsup_fidelity /= n;
        out.unsup_logvar_near /= n;
        out.unsup_logvar_far /= n;
        out.total /= n;
        out
    }
}

/// Supervised loss of one prediction, with backward seeds.
pub struct SupLoss {
    pub l1: f64,
    pub perceptual: f64,
    /// `l1 + lambda_p * perceptual`.
    pub total: f64,
    /// Seeds at the prediction node and at the prediction's feature node,
    /// already weighted by `lambda_p`.
    pub seeds: Vec<(NodeId, Tensor)>,
}

/// Mean absolute error plus `lambda_p` times the squared feature distance.
///
/// Both reductions are means over their element counts. The L1 seed is
/// `sign(pred - target) / count` (zero at exact ties); the perceptual seed
/// is `2 (f_pred - f_target) / count`, scaled by `lambda_p`. Gradients flow
/// through the feature bank into the prediction only — the target side is
/// evaluated off-tape.
pub fn sup_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: &Tensor,
    fx: &FeatureExtractor,
    lambda_p: f64,
) -> Result<SupLoss> {
    let pred_shape = tape.value(pred).shape();
    if pred_shape != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "supervised loss".into(),
            expected: pred_shape.to_string(),
            got: target.shape().to_string(),
        });
    }
    if !(lambda_p.is_finite() && lambda_p >= 0.0) {
        return Err(Error::Config(format!("lambda_p must be >= 0, got {lambda_p}")));
    }

    let count = target.len() as f64;
    let mut l1 = 0.0;
    let mut l1_seed = vec![0.0; target.len()];
    for (i, (p, t)) in tape
        .value(pred)
        .values()
        .iter()
        .zip(target.values())
        .enumerate()
    {
        let d = p - t;
        l1 += d.abs();
        l1_seed[i] = if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        };
    }
    l1 /= count;

    let feat_pred = fx.apply(tape, pred)?;
    let feat_target = fx.features(target)?;
    let fcount = feat_target.len() as f64;
    let mut lp = 0.0;
    let mut lp_seed = vec![0.0; feat_target.len()];
    for (i, (fp, ft)) in tape
        .value(feat_pred)
        .values()
        .iter()
        .zip(feat_target.values())
        .enumerate()
    {
        let d = fp - ft;
        lp += d * d;
        lp_seed[i] = lambda_p * 2.0 * d / fcount;
    }
    lp /= fcount;

    let total = l1 + lambda_p * lp;
    if !total.is_finite() {
        return Err(Error::NonFinite("supervised loss".into()));
    }
    Ok(SupLoss {
        l1,
        perceptual: lp,
        total,
        seeds: vec![
            (pred, Tensor::new(pred_shape, l1_seed)?),
            (feat_pred, Tensor::new(feat_target.shape(), lp_seed)?),
        ],
    })
}

/// Unsupervised (latent-space) loss of one latent against its pseudo GT.
#[derive(Clone, Debug)]
pub struct UnsupLoss {
    /// `||z - mean||_2`, unsquared.
    pub fidelity: f64,
    /// `ln(max(var_near, clamp))`.
    pub logvar_near: f64,
    /// `ln(max(1 - var_far, clamp))`, or 0 when the far side is disabled.
    pub logvar_far: f64,
    pub clamped_count: u32,
    /// `fidelity + logvar_near + logvar_far`.
    pub total: f64,
    /// d(fidelity)/dz: the unit direction `(z - mean)/||z - mean||`, or
    /// zeros when z sits on the mean. The log terms are constants of the
    /// step and carry no gradient.
    pub z_seed: Vec<f64>,
}

pub fn unsup_loss(
    z_pred: &[f64],
    near: &GpPosterior,
    far_variance: Option<f64>,
    log_clamp: f64,
) -> Result<UnsupLoss> {
    if z_pred.len() != near.mean.len() {
        return Err(Error::ShapeMismatch {
            context: "unsupervised loss".into(),
            expected: format!("latent dimension {}", near.mean.len()),
            got: format!("latent dimension {}", z_pred.len()),
        });
    }
    if !(log_clamp > 0.0 && log_clamp < 1.0) {
        return Err(Error::Config(format!(
            "log_clamp must lie in (0, 1), got {log_clamp}"
        )));
    }
    let diff: Vec<f64> = z_pred.iter().zip(&near.mean).map(|(z, m)| z - m).collect();
    let fidelity = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let z_seed = if fidelity < 1e-12 {
        vec![0.0; diff.len()]
    } else {
        diff.iter().map(|d| d / fidelity).collect()
    };

    let mut clamped_count = 0;
    let near_arg = near.variance;
    if near_arg < log_clamp {
        clamped_count += 1;
    }
    let logvar_near = near_arg.max(log_clamp).ln();

    let logvar_far = match far_variance {
        None => 0.0,
        Some(var_far) => {
            let arg = 1.0 - var_far;
            if arg < log_clamp {
                clamped_count += 1;
            }
            arg.max(log_clamp).ln()
        }
    };

    let total = fidelity + logvar_near + logvar_far;
    if !total.is_finite() {
        return Err(Error::NonFinite("unsupervised loss".into()));
    }
    Ok(UnsupLoss {
        fidelity,
        logvar_near,
        logvar_far,
        clamped_count,
        total,
        z_seed,
    })
}

/// Composes one report out of the per-phase parts; absent sides read as 0.
pub fn total_loss(
    sup: Option<&SupLoss>,
    unsup: Option<&UnsupLoss>,
    lambda_unsup: f64,
) -> LossReport {
    let mut report = LossReport::default();
    if let Some(s) = sup {
        report.l1 = s.l1;
        report.perceptual = s.perceptual;
        report.total += s.total;
    }
    if let Some(u) = unsup {
        report.unsup_fidelity = u.fidelity;
        report.unsup_logvar_near = u.logvar_near;
        report.unsup_logvar_far = u.logvar_far;
        report.clamped_count = u.clamped_count;
        report.total += lambda_unsup * u.total;
    }
    report
}
