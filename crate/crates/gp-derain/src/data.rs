//! Synthetic rain data: procedural clean images, streak overlays, PGM/PPM
//! file I/O, cropping, and the labeled/unlabeled dataset layout.
//!
//! The additive model is `rainy = clip(clean + residual)` with a
//! nonnegative residual drawn as anti-aliased line segments blurred along
//! their own direction. Two named parameter regimes exist: `labeled`
//! (sparser, near-vertical) and `shifted` (denser, wider angles, stronger)
//! — the shifted regime stands in for a differently-distributed unlabeled
//! corpus. Everything here is a pure function of (seed, parameters);
//! per-image streams come from a splitmix64-derived seed chain.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Shape, Tensor};

/// Single-channel raster, row-major, values nominally in [0, 1].
///
/// Construction checks finiteness only; intermediate products (pre-clip
/// residuals) may exceed the unit range. File emission clips.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<ImagePatch> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "image construction".into(),
                expected: format!("{} values", height * width),
                got: format!("{} values", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image values".into()));
        }
        Ok(ImagePatch {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> ImagePatch {
        ImagePatch {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Copy with every value clipped to [0, 1].
    pub fn clipped(&self) -> ImagePatch {
        ImagePatch {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            Shape::Chw(1, self.height, self.width),
            self.values.clone(),
        )
        .expect("image counts its own values")
    }

    pub fn from_tensor(t: &Tensor) -> Result<ImagePatch> {
        match t.shape() {
            Shape::Chw(1, h, w) => ImagePatch::new(h, w, t.values().to_vec()),
            s => Err(Error::ShapeMismatch {
                context: "tensor to image".into(),
                expected: "single-channel image".into(),
                got: s.to_string(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// PGM / PPM files

/// Reads a binary PGM (P5) or PPM (P6, reduced to grayscale by integer luma
/// weights 299/587/114 per mille) with maxval at most 255.
pub fn load_image(path: &Path) -> Result<ImagePatch> {
    let bytes = fs::read(path).map_err(|e| Error::io(e, path))?;
    parse_pnm(&bytes).map_err(|e| e.context(format!("while reading {}", path.display())))
}

pub fn parse_pnm(bytes: &[u8]) -> Result<ImagePatch> {
    let mut pos = 0usize;
    let parse_err = |offset: usize, message: String| Error::Parse {
        offset: offset as u64,
        message,
    };
    let magic = bytes
        .get(..2)
        .ok_or_else(|| parse_err(0, "file shorter than a magic number".into()))?;
    let channels = match magic {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(parse_err(0, "expected P5 or P6 magic".into())),
    };
    pos += 2;

    let width = read_header_uint(bytes, &mut pos, "width")?;
    let height = read_header_uint(bytes, &mut pos, "height")?;
    let maxval = read_header_uint(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(
            pos,
            format!("zero image dimension {width}x{height}"),
        ));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "unsupported sample depth: maxval {maxval} (only 8-bit handled)"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(parse_err(
                pos,
                "expected single whitespace before raster".into(),
            ))
        }
    }

    let need = width * height * channels;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        parse_err(
            bytes.len(),
            format!(
                "truncated raster: expected {need} bytes, found {}",
                bytes.len().saturating_sub(pos)
            ),
        )
    })?;

    let scale = maxval as f64;
    let values = if channels == 1 {
        raster.iter().map(|&b| b as f64 / scale).collect()
    } else {
        raster
            .chunks_exact(3)
            .map(|px| {
                let num = 299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32;
                num as f64 / (1000.0 * scale)
            })
            .collect()
    };
    ImagePatch::new(height, width, values)
}

fn read_header_uint(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    // Whitespace and '#' comments (to end of line) may precede the number.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    let mut value = 0usize;
    while let Some(b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value * 10 + (b - b'0') as usize;
        if value > 1 << 24 {
            return Err(Error::Parse {
                offset: start as u64,
                message: format!("{what} out of range"),
            });
        }
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Parse {
            offset: start as u64,
            message: format!("expected {what} digits"),
        });
    }
    Ok(value)
}

/// Writes an 8-bit binary PGM; values are clipped to [0, 1] and rounded,
/// so a round-trip moves any value by at most 1/255.
pub fn save_image(patch: &ImagePatch, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", patch.width, patch.height).into_bytes();
    out.extend(
        patch
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(e, path))
}

// ---------------------------------------------------------------------------
// Rain synthesis

/// Streak overlay parameters. All ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub streak_count: (u32, u32),
    /// Segment length in pixels.
    pub length_px: (f64, f64),
    /// Degrees from vertical; negative tilts left.
    pub angle_deg: (f64, f64),
    /// Per-streak brightness added to the clean image.
    pub intensity: (f64, f64),
    /// Streak width in pixels.
    pub thickness: f64,
    /// Odd tap count of the along-streak blur; 1 disables it.
    pub blur_taps: u32,
    pub seed: u64,
}

impl RainParams {
    /// Sparse, near-vertical, moderate rain — the synthetic labeled look.
    pub fn labeled_regime(seed: u64) -> RainParams {
        RainParams {
            streak_count: (2, 5),
            length_px: (6.0, 14.0),
            angle_deg: (-12.0, 12.0),
            intensity: (0.25, 0.6),
            thickness: 1.0,
            blur_taps: 3,
            seed,
        }
    }

    /// Denser, wider-angled, stronger rain standing in for the unlabeled
    /// distribution gap.
    pub fn shifted_regime(seed: u64) -> RainParams {
        RainParams {
            streak_count: (6, 12),
            length_px: (8.0, 18.0),
            angle_deg: (-35.0, 35.0),
            intensity: (0.35, 0.85),
            thickness: 1.3,
            blur_taps: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn ordered(name: &str, lo: f64, hi: f64) -> Result<()> {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} range must be ordered and finite, got ({lo}, {hi})"
                )))
            }
        }
        if self.streak_count.0 > self.streak_count.1 {
            return Err(Error::Config(format!(
                "streak_count range must be ordered, got {:?}",
                self.streak_count
            )));
        }
        ordered("length_px", self.length_px.0, self.length_px.1)?;
        if self.length_px.0 <= 0.0 {
            return Err(Error::Config("length_px must be positive".into()));
        }
        ordered("angle_deg", self.angle_deg.0, self.angle_deg.1)?;
        ordered("intensity", self.intensity.0, self.intensity.1)?;
        if self.intensity.0 < 0.0 || self.intensity.1 > 1.0 {
            return Err(Error::Config(format!(
                "intensity must lie within [0, 1], got {:?}",
                self.intensity
            )));
        }
        if !(self.thickness.is_finite() && self.thickness > 0.0) {
            return Err(Error::Config(format!(
                "thickness must be positive, got {}",
                self.thickness
            )));
        }
        if self.blur_taps == 0 || self.blur_taps % 2 == 0 {
            return Err(Error::Config(format!(
                "blur_taps must be odd and positive, got {}",
                self.blur_taps
            )));
        }
        Ok(())
    }

    /// Same regime, reseeded for the image at `index`.
    pub fn for_image(&self, index: u64) -> RainParams {
        RainParams {
            seed: mix_seed(self.seed, index),
            ..self.clone()
        }
    }
}

/// splitmix64 finalizer; the per-image / per-stage seed derivation.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Overlays sampled rain streaks on `clean`.
///
/// Returns `(rainy, residual)` with `rainy = clip(clean + residual)` and
/// the residual pre-clip (always nonnegative). Each streak is an
/// anti-aliased segment — coverage `clamp(thickness/2 + 0.5 - dist, 0, 1)`
/// against the pixel center — re-drawn `blur_taps` times at unit shifts
/// along its own direction with weight `intensity / blur_taps`.
pub fn generate_streaks(clean: &ImagePatch, p: &RainParams) -> Result<(ImagePatch, ImagePatch)> {
    p.validate()?;
    let (h, w) = (clean.height, clean.width);
    let mut residual = ImagePatch::zeros(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let count = if p.streak_count.0 == p.streak_count.1 {
        p.streak_count.0
    } else {
        rng.gen_range(p.streak_count.0..=p.streak_count.1)
    };
    for _ in 0..count {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let len = sample_range(&mut rng, p.length_px);
        let angle = sample_range(&mut rng, p.angle_deg).to_radians();
        let intensity = sample_range(&mut rng, p.intensity);
        let (dx, dy) = (angle.sin(), angle.cos());

        let taps = p.blur_taps as i64;
        let weight = intensity / taps as f64;
        for k in -(taps / 2)..=(taps / 2) {
            let (sx, sy) = (cx + k as f64 * dx, cy + k as f64 * dy);
            let ax = sx - 0.5 * len * dx;
            let ay = sy - 0.5 * len * dy;
            let bx = sx + 0.5 * len * dx;
            let by = sy + 0.5 * len * dy;
            draw_segment(&mut residual, ax, ay, bx, by, p.thickness, weight);
        }
    }

    let rainy = ImagePatch {
        height: h,
        width: w,
        values: clean
            .values
            .iter()
            .zip(&residual.values)
            .map(|(c, r)| (c + r).clamp(0.0, 1.0))
            .collect(),
    };
    Ok((rainy, residual))
}

fn draw_segment(
    canvas: &mut ImagePatch,
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    thickness: f64,
    weight: f64,
) {
    let reach = thickness / 2.0 + 1.0;
    let x0 = (ax.min(bx) - reach).floor().max(0.0) as usize;
    let x1 = ((ax.max(bx) + reach).ceil() as usize).min(canvas.width.saturating_sub(1));
    let y0 = (ay.min(by) - reach).floor().max(0.0) as usize;
    let y1 = ((ay.max(by) + reach).ceil() as usize).min(canvas.height.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let dist = segment_distance(px, py, ax, ay, bx, by);
            let coverage = (thickness / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
            if coverage > 0.0 {
                canvas.values[y * canvas.width + x] += coverage * weight;
            }
        }
    }
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (vx, vy) = (bx - ax, by - ay);
    let (wx, wy) = (px - ax, py - ay);
    let along = vx * wx + vy * wy;
    if along <= 0.0 {
        return (wx * wx + wy * wy).sqrt();
    }
    let sq_len = vx * vx + vy * vy;
    if sq_len <= along {
        let (ux, uy) = (px - bx, py - by);
        return (ux * ux + uy * uy).sqrt();
    }
    let t = along / sq_len;
    let (ex, ey) = (px - (ax + t * vx), py - (ay + t * vy));
    (ex * ex + ey * ey).sqrt()
}

// ---------------------------------------------------------------------------
// Procedural clean images

/// Deterministic stand-in corpus: smoothed random fields with a few
/// geometric shapes blended in at varied contrast. Image `i` draws from
/// stream `i` of the seed, so the set is order-independent.
pub fn make_base_images(count: usize, size: (usize, usize), seed: u64) -> Vec<ImagePatch> {
    let (h, w) = size;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            base_image(h, w, &mut rng)
        })
        .collect()
}

fn base_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePatch {
    // Bilinearly upsampled coarse noise keeps large-scale structure.
    let step = 4usize;
    let gh = h / step + 2;
    let gw = w / step + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut img = ImagePatch::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / step as f64;
            let fx = x as f64 / step as f64;
            let (gy, gx) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - gy as f64, fx - gx as f64);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(gy, gx) * (1.0 - tx) + g(gy, gx + 1) * tx;
            let bot = g(gy + 1, gx) * (1.0 - tx) + g(gy + 1, gx + 1) * tx;
            img.values[y * w + x] = 0.15 + 0.7 * (top * (1.0 - ty) + bot * ty);
        }
    }

    let shapes = rng.gen_range(2..=4);
    for _ in 0..shapes {
        let gray: f64 = rng.gen_range(0.05..0.95);
        let alpha: f64 = rng.gen_range(0.5..1.0);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let extent = rng.gen_range(0.1..0.35) * h.min(w) as f64;
        let circular = rng.gen_range(0..2u32) == 0;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = if circular {
                    let (dx, dy) = (px - cx, py - cy);
                    dx * dx + dy * dy <= extent * extent
                } else {
                    (px - cx).abs() <= extent && (py - cy).abs() <= extent * 0.7
                };
                if inside {
                    let v = &mut img.values[y * w + x];
                    *v = (1.0 - alpha) * *v + alpha * gray;
                }
            }
        }
    }

    // One box blur pass softens shape edges; clamp guards the range.
    let blurred = box_blur3(&img);
    ImagePatch {
        height: h,
        width: w,
        values: blurred.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

fn box_blur3(img: &ImagePatch) -> ImagePatch {
    let (h, w) = (img.height, img.width);
    let mut out = ImagePatch::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        sum += img.values[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out.values[y * w + x] = sum / n;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Cropping and splitting

/// Crops the same uniformly-drawn window out of both images.
pub fn random_crop<R: Rng>(
    x: &ImagePatch,
    y: &ImagePatch,
    size: (usize, usize),
    rng: &mut R,
) -> Result<(ImagePatch, ImagePatch)> {
    if x.height != y.height || x.width != y.width {
        return Err(Error::ShapeMismatch {
            context: "paired crop".into(),
            expected: format!("{}x{}", x.height, x.width),
            got: format!("{}x{}", y.height, y.width),
        });
    }
    let (ch, cw) = size;
    if ch == 0 || cw == 0 || ch > x.height || cw > x.width {
        return Err(Error::ShapeMismatch {
            context: "crop window".into(),
            expected: format!("within {}x{}", x.height, x.width),
            got: format!("{ch}x{cw}"),
        });
    }
    let oy = rng.gen_range(0..=x.height - ch);
    let ox = rng.gen_range(0..=x.width - cw);
    Ok((crop_at(x, oy, ox, ch, cw), crop_at(y, oy, ox, ch, cw)))
}

fn crop_at(img: &ImagePatch, oy: usize, ox: usize, ch: usize, cw: usize) -> ImagePatch {
    let mut values = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        let row = (oy + y) * img.width + ox;
        values.extend_from_slice(&img.values[row..row + cw]);
    }
    ImagePatch {
        height: ch,
        width: cw,
        values,
    }
}

/// Rainy input with its clean target.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub rainy: ImagePatch,
    pub clean: ImagePatch,
}

/// The labeled/unlabeled partition a training run consumes.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledPair>,
    pub unlabeled: Vec<ImagePatch>,
    pub fraction_labeled: f64,
}

/// Seeded shuffle, then a prefix of `round(fraction * n)` (at least one)
/// keeps its targets; the rest drop theirs.
pub fn split(pairs: Vec<LabeledPair>, fraction_labeled: f64, seed: u64) -> Result<DatasetSplit> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(fraction_labeled > 0.0 && fraction_labeled <= 1.0) {
        return Err(Error::Config(format!(
            "fraction_labeled must lie in (0, 1], got {fraction_labeled}"
        )));
    }
    let n = pairs.len();
    let n_labeled = ((fraction_labeled * n as f64).round() as usize).clamp(1, n);
    let mut shuffled = pairs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let unlabeled = shuffled.split_off(n_labeled);
    Ok(DatasetSplit {
        labeled: shuffled,
        unlabeled: unlabeled.into_iter().map(|p| p.rainy).collect(),
        fraction_labeled,
    })
}

// ---------------------------------------------------------------------------
// Dataset directories

/// Which streak regime renders a set of pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Labeled,
    Shifted,
}

impl RegimeKind {
    pub fn params(self, seed: u64) -> RainParams {
        match self {
            RegimeKind::Labeled => RainParams::labeled_regime(seed),
            RegimeKind::Shifted => RainParams::shifted_regime(seed),
        }
    }
}

/// Everything needed to regenerate a dataset directory bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub fraction_labeled: f64,
    pub labeled_regime: RainParams,
    /// Absent when the split has no unlabeled side.
    pub shifted_regime: Option<RainParams>,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
}

/// Generation request; see [`generate_dataset`].
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub fraction_labeled: f64,
    pub seed: u64,
    /// Regime used for the labeled pairs (unlabeled inputs always come
    /// from the shifted regime). `Shifted` here produces paired test sets
    /// drawn from the unlabeled-like distribution.
    pub labeled_regime: RegimeKind,
}

/// Builds the full split in memory: base images, a seeded index shuffle,
/// labeled pairs under `spec.labeled_regime`, and shifted-regime unlabeled
/// inputs. Seeds for bases / shuffle / rain are derived stages of
/// `spec.seed`, and each image reseeds its own streak draw.
pub fn generate_dataset(spec: &GenSpec) -> Result<(DatasetSplit, Manifest)> {
    if spec.count == 0 {
        return Err(Error::Config("dataset count must be positive".into()));
    }
    if !(spec.fraction_labeled > 0.0 && spec.fraction_labeled <= 1.0) {
        return Err(Error::Config(format!(
            "fraction_labeled must lie in (0, 1], got {}",
            spec.fraction_labeled
        )));
    }
    let seed_bases = mix_seed(spec.seed, 0);
    let seed_shuffle = mix_seed(spec.seed, 1);
    let seed_rain_l = mix_seed(spec.seed, 2);
    let seed_rain_u = mix_seed(spec.seed, 3);

    let bases = make_base_images(spec.count, (spec.height, spec.width), seed_bases);
    let mut order: Vec<usize> = (0..spec.count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_shuffle);
    order.shuffle(&mut rng);
    let n_labeled =
        ((spec.fraction_labeled * spec.count as f64).round() as usize).clamp(1, spec.count);

    let labeled_params = spec.labeled_regime.params(seed_rain_l);
    let shifted_params = RainParams::shifted_regime(seed_rain_u);

    let mut labeled = Vec::with_capacity(n_labeled);
    for (i, &base_idx) in order[..n_labeled].iter().enumerate() {
        let clean = &bases[base_idx];
        let (rainy, _) = generate_streaks(clean, &labeled_params.for_image(i as u64))?;
        labeled.push(LabeledPair {
            rainy,
            clean: clean.clone(),
        });
    }
    let mut unlabeled = Vec::with_capacity(spec.count - n_labeled);
    for (i, &base_idx) in order[n_labeled..].iter().enumerate() {
        let (rainy, _) = generate_streaks(&bases[base_idx], &shifted_params.for_image(i as u64))?;
        unlabeled.push(rainy);
    }

    let manifest = Manifest {
        seed: spec.seed,
        count: spec.count,
        height: spec.height,
        width: spec.width,
        fraction_labeled: spec.fraction_labeled,
        labeled_regime: labeled_params,
        shifted_regime: if unlabeled.is_empty() {
            None
        } else {
            Some(shifted_params)
        },
        labeled_count: labeled.len(),
        unlabeled_count: unlabeled.len(),
    };
    Ok((
        DatasetSplit {
            labeled,
            unlabeled,
            fraction_labeled: spec.fraction_labeled,
        },
        manifest,
    ))
}

fn numbered(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:04}.pgm"))
}

/// Writes `labeled/rainy/NNNN.pgm`, `labeled/clean/NNNN.pgm`,
/// `unlabeled/rainy/NNNN.pgm` (only if any), and `manifest.json`.
pub fn write_dataset(dir: &Path, data: &DatasetSplit, manifest: &Manifest) -> Result<()> {
    let rainy_dir = dir.join("labeled").join("rainy");
    let clean_dir = dir.join("labeled").join("clean");
    fs::create_dir_all(&rainy_dir).map_err(|e| Error::io(e, &rainy_dir))?;
    fs::create_dir_all(&clean_dir).map_err(|e| Error::io(e, &clean_dir))?;
    for (i, pair) in data.labeled.iter().enumerate() {
        save_image(&pair.rainy, &numbered(&rainy_dir, i))?;
        save_image(&pair.clean, &numbered(&clean_dir, i))?;
    }
    if !data.unlabeled.is_empty() {
        let udir = dir.join("unlabeled").join("rainy");
        fs::create_dir_all(&udir).map_err(|e| Error::io(e, &udir))?;
        for (i, img) in data.unlabeled.iter().enumerate() {
            save_image(img, &numbered(&udir, i))?;
        }
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(e, &manifest_path))
}

/// Loads a directory written by [`write_dataset`]. A missing manifest or
/// missing `labeled/` tree is a structural error, not an I/O one.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::Format(format!(
            "no manifest.json under {}",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(e, &manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;

    let rainy_dir = dir.join("labeled").join("rainy");
    let clean_dir = dir.join("labeled").join("clean");
    if !rainy_dir.is_dir() || !clean_dir.is_dir() {
        return Err(Error::Format(format!(
            "dataset at {} is missing its labeled directories",
            dir.display()
        )));
    }
    let mut labeled = Vec::with_capacity(manifest.labeled_count);
    for i in 0..manifest.labeled_count {
        labeled.push(LabeledPair {
            rainy: load_image(&numbered(&rainy_dir, i))?,
            clean: load_image(&numbered(&clean_dir, i))?,
        });
    }
    let mut unlabeled = Vec::with_capacity(manifest.unlabeled_count);
    if manifest.unlabeled_count > 0 {
        let udir = dir.join("unlabeled").join("rainy");
        if !udir.is_dir() {
            return Err(Error::Format(format!(
                "manifest promises {} unlabeled images but {} is missing",
                manifest.unlabeled_count,
                udir.display()
            )));
        }
        for i in 0..manifest.unlabeled_count {
            unlabeled.push(load_image(&numbered(&udir, i))?);
        }
    }
    Ok((
        DatasetSplit {
            labeled,
            unlabeled,
            fraction_labeled: manifest.fraction_labeled,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64, h: usize, w: usize) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pgm_round_trip_stays_within_quantization() {
        let img = test_image(1, 9, 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.height(), back.width()), (9, 13));
        let worst = img
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "worst diff {worst}");
    }

    #[test]
    fn pgm_parses_comments_and_scales_maxval() {
        let bytes = b"P5 # a comment\n# another\n2 1\n100\n\x64\x32";
        let img = parse_pnm(bytes).unwrap();
        assert_eq!(img.values(), &[1.0, 0.5]);
    }

    #[test]
    fn ppm_luma_is_exact_on_primaries() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([255, 255, 255, 255, 0, 0]); // white, red
        let img = parse_pnm(&bytes).unwrap();
        assert_eq!(img.values()[0], 1.0, "white must map to exactly 1.0");
        assert_eq!(img.values()[1], 0.299);
    }

    #[test]
    fn truncated_raster_reports_offset_and_yields_nothing() {
        let bytes = b"P5\n4 4\n255\n\x01\x02";
        match parse_pnm(bytes) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, bytes.len() as u64);
                assert!(message.contains("truncated"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_deep_maxval_are_rejected() {
        assert!(matches!(
            parse_pnm(b"P3\n1 1\n255\n0"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            parse_pnm(b"P5\n1 1\n65535\n\x00\x00"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_pnm(b"P5\n0 4\n255\n"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn no_streaks_means_identity() {
        let clean = test_image(2, 16, 16);
        let p = RainParams {
            streak_count: (0, 0),
            ..RainParams::labeled_regime(7)
        };
        let (rainy, residual) = generate_streaks(&clean, &p).unwrap();
        assert_eq!(rainy, clean);
        assert!(residual.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_is_nonnegative_and_additive_where_unclipped() {
        let clean = test_image(3, 32, 32);
        let p = RainParams::shifted_regime(11);
        let (rainy, residual) = generate_streaks(&clean, &p).unwrap();
        assert!(residual.values().iter().any(|&v| v > 0.0), "rain fell");
        for i in 0..clean.values().len() {
            let r = residual.values()[i];
            assert!(r >= 0.0);
            let unclipped = clean.values()[i] + r;
            if unclipped <= 1.0 {
                assert!(
                    (rainy.values()[i] - unclipped).abs() < 1e-15,
                    "additive model must hold away from the clip"
                );
            } else {
                assert_eq!(rainy.values()[i], 1.0);
            }
        }
    }

    #[test]
    fn streaks_are_deterministic_per_seed() {
        let clean = test_image(4, 24, 24);
        let p = RainParams::labeled_regime(99);
        let a = generate_streaks(&clean, &p).unwrap();
        let b = generate_streaks(&clean, &p).unwrap();
        assert_eq!(a, b);
        let c = generate_streaks(&clean, &p.for_image(1)).unwrap();
        assert_ne!(a.0, c.0, "reseeded draw must differ");
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = RainParams::labeled_regime(0);
        p.blur_taps = 4;
        assert!(p.validate().is_err());
        let mut p = RainParams::labeled_regime(0);
        p.intensity = (0.5, 1.5);
        assert!(p.validate().is_err());
        let mut p = RainParams::labeled_regime(0);
        p.length_px = (10.0, 5.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn base_images_are_reproducible_and_bounded() {
        let a = make_base_images(3, (16, 16), 5);
        let b = make_base_images(3, (16, 16), 5);
        assert_eq!(a, b);
        for img in &a {
            assert!(img.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let c = make_base_images(3, (16, 16), 6);
        assert!(
            a.iter().zip(&c).any(|(x, y)| x != y),
            "different seeds must change the set"
        );
        // Streams make image i independent of how many images precede it.
        let first_of_ten = &make_base_images(10, (16, 16), 5)[0];
        assert_eq!(first_of_ten, &a[0]);
    }

    #[test]
    fn crop_of_full_size_is_identity_and_pairs_stay_aligned() {
        let img = test_image(6, 12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = random_crop(&img, &img, (12, 10), &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
        let (ca, cb) = random_crop(&img, &img, (5, 5), &mut rng).unwrap();
        assert_eq!(ca, cb, "same offset must hit both images");
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let img = test_image(7, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_crop(&img, &img, (9, 8), &mut rng).is_err());
        assert!(random_crop(&img, &img, (0, 4), &mut rng).is_err());
    }

    #[test]
    fn crop_offsets_cover_the_grid_uniformly() {
        // Pixel values encode coordinates, so a 1x1 crop reveals its offset.
        let (h, w) = (6, 6);
        let img = ImagePatch::new(
            h,
            w,
            (0..h * w).map(|i| i as f64 / (h * w) as f64).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut bins = vec![0usize; h * w];
        let draws = 10_000;
        for _ in 0..draws {
            let (c, _) = random_crop(&img, &img, (1, 1), &mut rng).unwrap();
            let idx = (c.values()[0] * (h * w) as f64).round() as usize;
            bins[idx] += 1;
        }
        let expected = draws as f64 / (h * w) as f64;
        let chi2: f64 = bins
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        // 35 degrees of freedom: mean 35, sd ~8.4; anything near 90 is broken.
        assert!(chi2 < 90.0, "chi-square {chi2} too large for uniform offsets");
    }

    #[test]
    fn split_counts_and_determinism() {
        let pairs: Vec<LabeledPair> = (0..100)
            .map(|i| {
                let img = ImagePatch::new(1, 1, vec![i as f64 / 100.0]).unwrap();
                LabeledPair {
                    rainy: img.clone(),
                    clean: img,
                }
            })
            .collect();
        let s = split(pairs.clone(), 0.1, 42).unwrap();
        assert_eq!(s.labeled.len(), 10);
        assert_eq!(s.unlabeled.len(), 90);
        let s2 = split(pairs.clone(), 0.1, 42).unwrap();
        assert_eq!(s.labeled, s2.labeled);
        assert_eq!(s.unlabeled, s2.unlabeled);

        // Disjoint: every source value lands on exactly one side.
        let mut seen: Vec<f64> = s
            .labeled
            .iter()
            .map(|p| p.rainy.values()[0])
            .chain(s.unlabeled.iter().map(|u| u.values()[0]))
            .collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 100);

        let all = split(pairs, 1.0, 42).unwrap();
        assert!(all.unlabeled.is_empty());
        assert_eq!(all.labeled.len(), 100);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split(vec![], 0.5, 0).is_err());
        let img = ImagePatch::new(1, 1, vec![0.0]).unwrap();
        let pair = LabeledPair {
            rainy: img.clone(),
            clean: img,
        };
        assert!(split(vec![pair.clone()], 0.0, 0).is_err());
        assert!(split(vec![pair], 1.5, 0).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let spec = GenSpec {
            count: 8,
            height: 16,
            width: 16,
            fraction_labeled: 0.25,
            seed: 77,
            labeled_regime: RegimeKind::Labeled,
        };
        let (data, manifest) = generate_dataset(&spec).unwrap();
        assert_eq!(data.labeled.len(), 2);
        assert_eq!(data.unlabeled.len(), 6);
        assert_eq!(manifest.labeled_count, 2);
        assert!(manifest.shifted_regime.is_some());

        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &manifest).unwrap();
        let (back, manifest2) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest, manifest2);
        assert_eq!(back.labeled.len(), 2);
        assert_eq!(back.unlabeled.len(), 6);
        // Disk copies are 8-bit quantized versions of the originals.
        for (orig, loaded) in data.labeled.iter().zip(&back.labeled) {
            let worst = orig
                .rainy
                .values()
                .iter()
                .zip(loaded.rainy.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1.0 / 255.0);
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_its_spec() {
        let spec = GenSpec {
            count: 5,
            height: 12,
            width: 12,
            fraction_labeled: 0.4,
            seed: 3,
            labeled_regime: RegimeKind::Labeled,
        };
        let (a, ma) = generate_dataset(&spec).unwrap();
        let (b, mb) = generate_dataset(&spec).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.unlabeled, b.unlabeled);
    }

    #[test]
    fn full_fraction_writes_no_unlabeled_directory() {
        let spec = GenSpec {
            count: 3,
            height: 12,
            width: 12,
            fraction_labeled: 1.0,
            seed: 9,
            labeled_regime: RegimeKind::Shifted,
        };
        let (data, manifest) = generate_dataset(&spec).unwrap();
        assert!(data.unlabeled.is_empty());
        assert!(manifest.shifted_regime.is_none());
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &manifest).unwrap();
        assert!(!dir.path().join("unlabeled").exists());
        let (back, _) = load_dataset(dir.path()).unwrap();
        assert!(back.unlabeled.is_empty());
    }

    #[test]
    fn missing_structure_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Format(_))
        ));
    }
}
