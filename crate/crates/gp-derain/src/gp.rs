//! Gaussian-process pseudo-labeling in latent space.
//!
//! Latents of labeled images act as observations of a GP with a cosine
//! kernel. For an unlabeled latent `z` we condition on its nearest
//! neighbors to get a posterior mean (the pseudo ground truth) and
//! variance, and on its farthest neighbors to get a second variance used
//! as a repulsion diagnostic. All conditioning goes through a Cholesky
//! solve of `K + sigma_eps^2 I`; the kernel matrix is never inverted
//! explicitly.

use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{write_f64s, write_string, Reader};
use crate::error::{Error, Result};

/// Observation noise and neighbor budgets for latent-space conditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    /// Observation noise variance added to the kernel diagonal and to the
    /// posterior variance.
    pub sigma_eps_sq: f64,
    /// Nearest-neighbor budget for the pseudo-GT posterior.
    pub n_nearest: usize,
    /// Farthest-neighbor budget; 0 disables the far-variance term.
    pub n_farthest: usize,
    /// Floor for logarithm arguments in the unsupervised loss.
    pub log_clamp: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            sigma_eps_sq: 1.0,
            n_nearest: 64,
            n_farthest: 64,
            log_clamp: 1e-6,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eps_sq.is_finite() && self.sigma_eps_sq > 0.0) {
            return Err(Error::Config(format!(
                "sigma_eps_sq must be finite and > 0, got {}",
                self.sigma_eps_sq
            )));
        }
        if self.n_nearest == 0 {
            return Err(Error::Config("n_nearest must be >= 1".into()));
        }
        if !(self.log_clamp > 0.0 && self.log_clamp < 1.0) {
            return Err(Error::Config(format!(
                "log_clamp must lie in (0, 1), got {}",
                self.log_clamp
            )));
        }
        Ok(())
    }
}

/// One latent observation plus the id of the image it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    values: Vec<f64>,
    source_id: String,
}

impl LatentVector {
    /// Rejects empty and non-finite vectors. Zero-norm vectors are
    /// representable but rejected later, at kernel use.
    pub fn new(values: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("latent vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        Ok(LatentVector {
            values,
            source_id: source_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Latents collected from the labeled set during one labeled epoch.
///
/// Row order is the collection order of that epoch; all rows share one
/// dimension `M`. The `epoch_tag` is process-local provenance and is not
/// part of the serialized format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentStore {
    rows: Vec<LatentVector>,
    epoch_tag: u64,
}

impl LatentStore {
    pub fn new(epoch_tag: u64) -> Self {
        LatentStore {
            rows: Vec::new(),
            epoch_tag,
        }
    }

    pub fn push(&mut self, row: LatentVector) -> Result<()> {
        if let Some(first) = self.rows.first() {
            if first.len() != row.len() {
                return Err(Error::ShapeMismatch {
                    context: "latent store push".into(),
                    expected: format!("dimension {}", first.len()),
                    got: format!("dimension {}", row.len()),
                });
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LatentVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Latent dimension, or `None` while the store is empty.
    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(LatentVector::len)
    }

    pub fn epoch_tag(&self) -> u64 {
        self.epoch_tag
    }

    /// Writes the store as `GPLS` version 1: header (magic, version u32,
    /// row count u64, dimension u64), then row-major f64 values, then
    /// length-prefixed source ids — all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("refusing to save an empty latent store".into()));
        }
        let dim = self.dim().unwrap_or(0);
        let file = std::fs::File::create(path).map_err(|e| Error::io(e, path))?;
        let mut w = BufWriter::new(file);
        let werr = |e: std::io::Error| Error::io(e, path);
        w.write_all(b"GPLS").map_err(werr)?;
        w.write_all(&1u32.to_le_bytes()).map_err(werr)?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes()).map_err(werr)?;
        w.write_all(&(dim as u64).to_le_bytes()).map_err(werr)?;
        for row in &self.rows {
            write_f64s(&mut w, row.values()).map_err(werr)?;
        }
        for row in &self.rows {
            write_string(&mut w, row.source_id()).map_err(werr)?;
        }
        w.flush().map_err(werr)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(e, path))?;
        let mut r = Reader::new(BufReader::new(file));
        r.expect_magic(b"GPLS", "latent store")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Format(format!(
                "unsupported latent store version {version}"
            )));
        }
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::Parse {
                offset: 8,
                message: format!("degenerate store shape {n} x {dim}"),
            });
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f64_vec(dim)?);
        }
        let mut store = LatentStore::new(0);
        for row in values {
            let id = r.string()?;
            store.push(LatentVector::new(row, id)?)?;
        }
        r.expect_eof("latent store")?;
        Ok(store)
    }
}

/// Cosine similarity `<a, b> / (|a| |b|)`, clamped into `[-1, 1]` to absorb
/// last-ulp rounding. Zero-norm inputs are degenerate.
pub fn cosine_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine kernel".into(),
            expected: format!("length {}", a.len()),
            got: format!("length {}", b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector { index: None });
    }
    let k = dot / (na * nb);
    if !k.is_finite() {
        return Err(Error::NonFinite("cosine kernel".into()));
    }
    Ok(k.clamp(-1.0, 1.0))
}

/// Similarities of `query` against every store row, in row order.
pub fn kernel_cross(query: &LatentVector, store: &LatentStore) -> Result<Vec<f64>> {
    if let Some(dim) = store.dim() {
        if dim != query.len() {
            return Err(Error::ShapeMismatch {
                context: "kernel cross".into(),
                expected: format!("dimension {dim}"),
                got: format!("dimension {}", query.len()),
            });
        }
    }
    store
        .rows()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            cosine_kernel(query.values(), row.values()).map_err(|e| match e {
                Error::DegenerateVector { .. } => Error::DegenerateVector { index: Some(i) },
                other => other,
            })
        })
        .collect()
}

/// Full Gram matrix of the store rows, row-major. The diagonal is exactly 1.
pub fn kernel_matrix(store: &LatentStore) -> Result<Vec<Vec<f64>>> {
    let n = store.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        k[i][i] = 1.0;
        // Self-similarity is 1 by definition; computing it would only pick
        // up sqrt rounding.
        for j in 0..i {
            let v = cosine_kernel(store.rows()[i].values(), store.rows()[j].values())
                .map_err(|e| match e {
                    Error::DegenerateVector { .. } => Error::DegenerateVector { index: Some(i) },
                    other => other,
                })?;
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    // A degenerate row j < i would surface with index i above; re-scan row 0
    // against itself to catch a store whose only row is degenerate.
    if n == 1 && store.rows()[0].norm() == 0.0 {
        return Err(Error::DegenerateVector { index: Some(0) });
    }
    Ok(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborKind {
    Nearest,
    Farthest,
}

/// Indices into a store plus their query similarities.
///
/// Similarities are descending for `Nearest`, ascending for `Farthest`;
/// ties break toward the lower store index.
#[derive(Clone, Debug)]
pub struct NeighborSet {
    pub kind: NeighborKind,
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// Picks `budget` rows by similarity; a budget beyond the store size
/// returns every row.
pub fn select_neighbors(
    query: &LatentVector,
    store: &LatentStore,
    budget: usize,
    kind: NeighborKind,
) -> Result<NeighborSet> {
    if store.is_empty() {
        return Err(Error::Config("neighbor selection on an empty store".into()));
    }
    if budget == 0 {
        return Err(Error::Config("neighbor budget must be >= 1".into()));
    }
    let sims = kernel_cross(query, store)?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    // Stable sort keeps lower indices first among equal similarities.
    match kind {
        NeighborKind::Nearest => order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a])),
        NeighborKind::Farthest => order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b])),
    }
    order.truncate(budget.min(sims.len()));
    let similarities = order.iter().map(|&i| sims[i]).collect();
    Ok(NeighborSet {
        kind,
        indices: order,
        similarities,
    })
}

/// Posterior of a query latent conditioned on one neighbor set.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    /// Posterior mean, a combination of the neighbor rows.
    pub mean: Vec<f64>,
    /// Scalar posterior variance (shared across latent coordinates),
    /// clamped to be non-negative.
    pub variance: f64,
    /// Solve weights; `mean = sum_i weights[i] * row_i`.
    pub weights: Vec<f64>,
}

/// Conditions the query on the given neighbors.
///
/// With `A = K_nn + sigma_eps^2 I` and `k` the query/neighbor similarity
/// vector, the weights solve `A w = k`, the mean is `w` applied to the
/// neighbor rows, and the variance is `1 - k.w + sigma_eps^2` (the prior
/// self-similarity is exactly 1).
pub fn gp_condition(
    query: &LatentVector,
    neighbors: &NeighborSet,
    store: &LatentStore,
    cfg: &GpConfig,
) -> Result<GpPosterior> {
    cfg.validate()?;
    if neighbors.indices.is_empty() {
        return Err(Error::Config("conditioning on an empty neighbor set".into()));
    }
    let dim = store.dim().ok_or_else(|| Error::Config("empty latent store".into()))?;
    if query.len() != dim {
        return Err(Error::ShapeMismatch {
            context: "gp conditioning".into(),
            expected: format!("dimension {dim}"),
            got: format!("dimension {}", query.len()),
        });
    }
    let n = neighbors.indices.len();
    for &i in &neighbors.indices {
        if i >= store.len() {
            return Err(Error::Incompatible(format!(
                "neighbor index {i} outside store of {} rows",
                store.len()
            )));
        }
    }

    // A = K_nn + sigma^2 I over the neighbor rows only.
    let mut a = vec![vec![0.0; n]; n];
    for (ai, &si) in neighbors.indices.iter().enumerate() {
        a[ai][ai] = 1.0 + cfg.sigma_eps_sq;
        for (aj, &sj) in neighbors.indices.iter().enumerate().take(ai) {
            let v = cosine_kernel(store.rows()[si].values(), store.rows()[sj].values())?;
            a[ai][aj] = v;
            a[aj][ai] = v;
        }
    }
    let k = &neighbors.similarities;
    let weights = cholesky_solve(&a, k)?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("gp solve weights".into()));
    }

    let mut mean = vec![0.0; dim];
    for (w, &si) in weights.iter().zip(&neighbors.indices) {
        for (m, v) in mean.iter_mut().zip(store.rows()[si].values()) {
            *m += w * v;
        }
    }
    let quad: f64 = weights.iter().zip(k).map(|(w, kq)| w * kq).sum();
    let variance = (1.0 - quad + cfg.sigma_eps_sq).max(0.0);
    if !variance.is_finite() {
        return Err(Error::NonFinite("gp posterior variance".into()));
    }
    Ok(GpPosterior {
        mean,
        variance,
        weights,
    })
}

/// Pseudo ground truth for an unlabeled latent: the nearest-set posterior
/// plus, when `n_farthest > 0`, the farthest-set variance.
pub fn pseudo_gt(
    query: &LatentVector,
    store: &LatentStore,
    cfg: &GpConfig,
) -> Result<(GpPosterior, Option<f64>)> {
    cfg.validate()?;
    let near_set = select_neighbors(query, store, cfg.n_nearest, NeighborKind::Nearest)?;
    let near = gp_condition(query, &near_set, store, cfg)
        .map_err(|e| e.context("nearest-set conditioning"))?;
    let far_variance = if cfg.n_farthest == 0 {
        None
    } else {
        let far_set = select_neighbors(query, store, cfg.n_farthest, NeighborKind::Farthest)?;
        let far = gp_condition(query, &far_set, store, cfg)
            .map_err(|e| e.context("farthest-set conditioning"))?;
        Some(far.variance)
    };
    Ok((near, far_variance))
}

/// Solves `A x = b` for symmetric positive-definite `A` via an LL^T
/// factorization. Fails with the offending pivot if `A` is not PD.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = a.len();
    debug_assert_eq!(b.len(), n);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::IllConditioned { row: i, pivot: s });
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Ok(x)
}

/// True when the two neighbor sets share no store index. With budgets that
/// together exceed the store size, overlap is expected.
pub fn neighbor_sets_disjoint(a: &NeighborSet, b: &NeighborSet) -> bool {
    let seen: BTreeSet<usize> = a.indices.iter().copied().collect();
    b.indices.iter().all(|i| !seen.contains(i))
}
