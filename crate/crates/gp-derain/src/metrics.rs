//! Full-reference quality metrics, full-image inference, and evaluation
//! reports.
//!
//! PSNR saturates at a 99 dB sentinel so perfect restorations stay finite
//! in CSV output. SSIM uses uniform 8x8 windows at stride 1, biased
//! moments, and the canonical stabilizers k1=0.01, k2=0.03; window sums
//! come from integral images. Images larger than the model patch are
//! derained tile-by-tile at 50% overlap and averaged.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::bytes::fnv1a64;
use crate::data::{save_image, ImagePatch, LabeledPair};
use crate::error::{Error, Result};
use crate::nn::{derain, ParamSet};

/// Sentinel for a zero-MSE comparison; also the saturation value.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn require_same_shape(a: &ImagePatch, b: &ImagePatch, context: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", b.height(), b.width()),
        });
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` in dB, saturated at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImagePatch, b: &ImagePatch, peak: f64) -> Result<f64> {
    require_same_shape(a, b, "psnr")?;
    let n = a.values().len() as f64;
    let mse = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean structural similarity with the canonical parameters.
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2, 1.0)
}

pub fn ssim_with(
    a: &ImagePatch,
    b: &ImagePatch,
    window: usize,
    k1: f64,
    k2: f64,
    peak: f64,
) -> Result<f64> {
    require_same_shape(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if window == 0 || h < window || w < window {
        return Err(Error::ShapeMismatch {
            context: "ssim window".into(),
            expected: format!("image at least {window}x{window}"),
            got: format!("{h}x{w}"),
        });
    }

    let ia = Integral::new(a.values(), h, w, |v| v);
    let ib = Integral::new(b.values(), h, w, |v| v);
    let iaa = Integral::new(a.values(), h, w, |v| v * v);
    let ibb = Integral::new(b.values(), h, w, |v| v * v);
    let iab = Integral::new_pair(a.values(), b.values(), h, w);

    let c1 = (k1 * peak) * (k1 * peak);
    let c2 = (k2 * peak) * (k2 * peak);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y in 0..=h - window {
        for x in 0..=w - window {
            let mu_a = ia.window(y, x, window) / n;
            let mu_b = ib.window(y, x, window) / n;
            let var_a = iaa.window(y, x, window) / n - mu_a * mu_a;
            let var_b = ibb.window(y, x, window) / n - mu_b * mu_b;
            let cov = iab.window(y, x, window) / n - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Summed-area table with a one-cell zero border.
struct Integral {
    width: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], h: usize, w: usize, f: impl Fn(f64) -> f64) -> Integral {
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(values[y * w + x]);
                sums[(y + 1) * (w + 1) + (x + 1)] = sums[y * (w + 1) + (x + 1)] + row;
            }
        }
        Integral { width: w + 1, sums }
    }

    fn new_pair(a: &[f64], b: &[f64], h: usize, w: usize) -> Integral {
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += a[y * w + x] * b[y * w + x];
                sums[(y + 1) * (w + 1) + (x + 1)] = sums[y * (w + 1) + (x + 1)] + row;
            }
        }
        Integral { width: w + 1, sums }
    }

    fn window(&self, y: usize, x: usize, size: usize) -> f64 {
        let s = |yy: usize, xx: usize| self.sums[yy * self.width + xx];
        s(y + size, x + size) - s(y, x + size) - s(y + size, x) + s(y, x)
    }
}

/// Derains a full image, tiling with 50% overlap when it exceeds the
/// model patch. A patch-sized image takes the direct single-pass path
/// (bit-identical to a one-tile tiling).
pub fn derain_full(image: &ImagePatch, params: &ParamSet) -> Result<ImagePatch> {
    let patch = params.config().patch;
    let (h, w) = (image.height(), image.width());
    if h < patch || w < patch {
        return Err(Error::ShapeMismatch {
            context: "full-image inference".into(),
            expected: format!("image at least {patch}x{patch}"),
            got: format!("{h}x{w}"),
        });
    }
    if h == patch && w == patch {
        let out = derain(&image.to_tensor(), params)?;
        return ImagePatch::from_tensor(&out);
    }

    let origins = |extent: usize| -> Vec<usize> {
        let stride = patch / 2;
        let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|o| o + patch < extent).collect();
        out.push(extent - patch);
        out
    };
    let mut sum = vec![0.0; h * w];
    let mut hits = vec![0.0; h * w];
    for &oy in &origins(h) {
        for &ox in &origins(w) {
            let mut tile = Vec::with_capacity(patch * patch);
            for y in 0..patch {
                let row = (oy + y) * w + ox;
                tile.extend_from_slice(&image.values()[row..row + patch]);
            }
            let tile = ImagePatch::new(patch, patch, tile)?;
            let out = derain(&tile.to_tensor(), params)?;
            for y in 0..patch {
                for x in 0..patch {
                    sum[(oy + y) * w + ox + x] += out.values()[y * patch + x];
                    hits[(oy + y) * w + ox + x] += 1.0;
                }
            }
        }
    }
    let values = sum
        .iter()
        .zip(&hits)
        .map(|(s, c)| (s / c).clamp(0.0, 1.0))
        .collect();
    ImagePatch::new(h, w, values)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    /// Fingerprint of the model configuration that produced the outputs.
    pub config_hash: String,
    pub timestamp_unix: u64,
}

/// Derains every pair and scores the result against its target.
/// Pure apart from the timestamp; writing is a separate step.
pub fn evaluate(params: &ParamSet, pairs: &[LabeledPair]) -> Result<(EvalReport, Vec<ImagePatch>)> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty test set".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let id = format!("{i:04}");
        let tag = |e: Error| e.context(format!("evaluating image {id}"));
        let out = derain_full(&pair.rainy, params).map_err(tag)?;
        let p = psnr(&out, &pair.clean, 1.0).map_err(tag)?;
        let s = ssim(&out, &pair.clean).map_err(tag)?;
        sum_psnr += p;
        sum_ssim += s;
        rows.push(EvalRow {
            image_id: id,
            psnr_db: p,
            ssim: s,
        });
        outputs.push(out);
    }
    let n = rows.len() as f64;
    let config_json = serde_json::to_vec(params.config())?;
    let report = EvalReport {
        mean_psnr_db: sum_psnr / n,
        mean_ssim: sum_ssim / n,
        rows,
        config_hash: format!("{:016x}", fnv1a64(&config_json)),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    Ok((report, outputs))
}

/// Writes `eval_report.csv`, `eval_summary.json`, and the derained images
/// under `derained/NNNN.pgm`.
pub fn write_eval_artifacts(
    report: &EvalReport,
    outputs: &[ImagePatch],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(e, dir))?;
    let mut csv = String::from("image_id,psnr_db,ssim\n");
    for row in &report.rows {
        csv.push_str(&format!("{},{},{}\n", row.image_id, row.psnr_db, row.ssim));
    }
    let csv_path = dir.join("eval_report.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(e, &csv_path))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        mean_psnr_db: f64,
        mean_ssim: f64,
        count: usize,
        config_hash: &'a str,
        timestamp_unix: u64,
    }
    let summary = serde_json::to_string_pretty(&Summary {
        mean_psnr_db: report.mean_psnr_db,
        mean_ssim: report.mean_ssim,
        count: report.rows.len(),
        config_hash: &report.config_hash,
        timestamp_unix: report.timestamp_unix,
    })?;
    let summary_path = dir.join("eval_summary.json");
    fs::write(&summary_path, summary).map_err(|e| Error::io(e, &summary_path))?;

    let out_dir = dir.join("derained");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(e, &out_dir))?;
    for (row, img) in report.rows.iter().zip(outputs) {
        save_image(img, &out_dir.join(format!("{}.pgm", row.image_id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn flat_image(h: usize, w: usize, v: f64) -> ImagePatch {
        ImagePatch::new(h, w, vec![v; h * w]).unwrap()
    }

    fn zero_model() -> ParamSet {
        let mut params = ParamSet::init(&ModelConfig::desk_default()).unwrap();
        for (_, t) in params.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        params
    }

    #[test]
    fn psnr_analytic_cases() {
        let a = flat_image(8, 8, 0.75);
        let b = flat_image(8, 8, 0.25);
        // MSE 0.25 -> 10 log10(4).
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.020599913279624).abs() < 1e-9);
        let c = flat_image(8, 8, 0.0);
        let d = flat_image(8, 8, 0.1);
        // MSE 0.01 -> 20 dB.
        assert!((psnr(&c, &d, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_caps_at_sentinel() {
        let a = rand_image(1, 8, 8);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        // Minuscule but nonzero error saturates rather than exceeding it.
        let mut b = a.clone();
        b.values_mut()[0] += 1e-9;
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_is_monotone_in_mse() {
        let base = flat_image(8, 8, 0.0);
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let other = flat_image(8, 8, 0.1 * k as f64);
            let p = psnr(&base, &other, 1.0).unwrap();
            assert!(p < last, "larger error must strictly lower psnr");
            last = p;
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = flat_image(8, 8, 0.0);
        let b = flat_image(8, 9, 0.0);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let a = rand_image(2, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = rand_image(3, 16, 16);
        let b = rand_image(4, 16, 16);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_punishes_inversion() {
        // Checkerboard vs its negative: structure anti-correlated.
        let (h, w) = (16, 16);
        let a = ImagePatch::new(
            h,
            w,
            (0..h * w)
                .map(|i| ((i / w + i % w) % 2) as f64)
                .collect(),
        )
        .unwrap();
        let inv = ImagePatch::new(h, w, a.values().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.5);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = flat_image(4, 16, 0.5);
        assert!(ssim(&a, &a).is_err());
    }

    /// Direct per-window reimplementation: no integral images.
    fn ssim_naive(a: &ImagePatch, b: &ImagePatch) -> f64 {
        let (h, w) = (a.height(), a.width());
        let win = SSIM_WINDOW;
        let n = (win * win) as f64;
        let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
        let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - win {
            for x in 0..=w - win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let va = a.get(y + dy, x + dx);
                        let vb = b.get(y + dy, x + dx);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_naive_sliding_windows() {
        for seed in 0..10 {
            let a = rand_image(100 + seed, 20, 24);
            let b = rand_image(200 + seed, 20, 24);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_naive(&a, &b);
            assert!(
                (fast - slow).abs() < 1e-10,
                "seed {seed}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn single_tile_inference_matches_direct_path() {
        let params = ParamSet::init(&ModelConfig::desk_default()).unwrap();
        let img = rand_image(5, 32, 32);
        let full = derain_full(&img, &params).unwrap();
        let direct = derain(&img.to_tensor(), &params).unwrap();
        assert_eq!(full.values(), direct.values());
    }

    #[test]
    fn zero_model_passes_input_through_tiling() {
        let params = zero_model();
        let img = rand_image(6, 48, 40);
        let out = derain_full(&img, &params).unwrap();
        let worst = img
            .values()
            .iter()
            .zip(out.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "zero residual must pass input through");
    }

    #[test]
    fn undersized_image_is_rejected() {
        let params = zero_model();
        let img = rand_image(7, 16, 32);
        assert!(derain_full(&img, &params).is_err());
    }

    #[test]
    fn evaluation_reports_passthrough_and_recomputes_means() {
        let params = zero_model();
        let pairs: Vec<LabeledPair> = (0..4)
            .map(|i| LabeledPair {
                rainy: rand_image(10 + i, 32, 32),
                clean: rand_image(20 + i, 32, 32),
            })
            .collect();
        let (report, outputs) = evaluate(&params, &pairs).unwrap();
        assert_eq!(report.rows.len(), 4);
        for (row, pair) in report.rows.iter().zip(&pairs) {
            let direct = psnr(&pair.rainy, &pair.clean, 1.0).unwrap();
            assert!((row.psnr_db - direct).abs() < 1e-12);
        }
        let mean: f64 = report.rows.iter().map(|r| r.psnr_db).sum::<f64>() / 4.0;
        assert!((report.mean_psnr_db - mean).abs() < 1e-12);
        let mean_s: f64 = report.rows.iter().map(|r| r.ssim).sum::<f64>() / 4.0;
        assert!((report.mean_ssim - mean_s).abs() < 1e-12);

        // A no-rain pair restored by the zero model hits the cap.
        let clean = rand_image(30, 32, 32);
        let perfect = vec![LabeledPair {
            rainy: clean.clone(),
            clean,
        }];
        let (r2, _) = evaluate(&params, &perfect).unwrap();
        assert_eq!(r2.rows[0].psnr_db, PSNR_CAP_DB);
        assert!((r2.rows[0].ssim - 1.0).abs() < 1e-15);

        let dir = tempfile::tempdir().unwrap();
        write_eval_artifacts(&report, &outputs, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("eval_report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5, "header plus four rows");
        assert!(csv.starts_with("image_id,psnr_db,ssim\n"));
        assert!(dir.path().join("eval_summary.json").is_file());
        assert!(dir.path().join("derained").join("0003.pgm").is_file());
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let params = zero_model();
        assert!(evaluate(&params, &[]).is_err());
    }
}
