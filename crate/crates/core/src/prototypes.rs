//! Category prototypes and the object-level invariance losses.
//!
//! ROI features that clear a confidence threshold feed per-category running
//! means (the prototypes). Two constraints act on the object level: an
//! explicit KL divergence between the category distributions predicted from
//! matched original/augmented proposals, and an implicit contrastive loss
//! that pulls same-category prototypes from the two streams together while
//! pushing different categories apart. Concentration diagnostics measure
//! how tightly per-domain prototypes cluster around their average.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("matched lists have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown category {category} (registry holds {n_categories})")]
    UnknownCategory { category: usize, n_categories: usize },
    #[error("category sets differ between registries: {0:?} vs {1:?}")]
    CategoryMismatch(Vec<usize>, Vec<usize>),
    #[error("zero-norm prototype for category {0}")]
    ZeroNormPrototype(usize),
    #[error("temperature {0} must be positive")]
    BadTemperature(f64),
    #[error("confidence threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty prototype list")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad registry json: {0}")]
    BadJson(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PrototypeError>;

/// Floor applied to the second argument of the KL divergence before the log.
pub const KL_FLOOR: f64 = 1e-12;

/// One ROI's feature vector, category label, and classifier confidence.
#[derive(Debug, Clone)]
pub struct RoiFeature {
    pub vector: Vec<f64>,
    pub category: usize,
    pub confidence: f64,
}

/// A validated probability vector over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedDist {
    probs: Vec<f64>,
}

impl PredictedDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(PrototypeError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(PrototypeError::InvalidDistribution(format!("{probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PrototypeError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(PredictedDist { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(0.0, f64::max)
    }
}

/// How prototype means absorb new samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AverageMode {
    /// Exact arithmetic mean of everything accumulated so far.
    Cumulative,
    /// Exponential moving average after the first sample.
    Ema { momentum: f64 },
}

/// Per-category running-mean vectors with sample counts.
#[derive(Debug, Clone)]
pub struct PrototypeRegistry {
    dim: usize,
    mode: AverageMode,
    means: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl PrototypeRegistry {
    pub fn new(n_categories: usize, dim: usize) -> Self {
        Self::with_mode(n_categories, dim, AverageMode::Cumulative)
    }

    pub fn with_mode(n_categories: usize, dim: usize, mode: AverageMode) -> Self {
        PrototypeRegistry {
            dim,
            mode,
            means: vec![vec![0.0; dim]; n_categories],
            counts: vec![0; n_categories],
        }
    }

    pub fn n_categories(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, category: usize) -> u64 {
        self.counts.get(category).copied().unwrap_or(0)
    }

    /// Mean vector for a category that has absorbed at least one sample.
    pub fn mean(&self, category: usize) -> Option<&[f64]> {
        (self.count(category) > 0).then(|| self.means[category].as_slice())
    }

    /// Categories with a nonzero count, ascending.
    pub fn active_categories(&self) -> Vec<usize> {
        (0..self.means.len()).filter(|&c| self.counts[c] > 0).collect()
    }

    /// Folds one confidence-filtered feature into its category prototype.
    /// Cumulative mode keeps the exact arithmetic mean:
    /// `mean' = mean + (v - mean) / (count + 1)`.
    pub fn update(&mut self, f: &RoiFeature) -> Result<()> {
        if f.category >= self.means.len() {
            return Err(PrototypeError::UnknownCategory {
                category: f.category,
                n_categories: self.means.len(),
            });
        }
        if f.vector.len() != self.dim {
            return Err(PrototypeError::DimensionMismatch(format!(
                "feature dim {} vs registry dim {}",
                f.vector.len(),
                self.dim
            )));
        }
        let count = self.counts[f.category];
        let mean = &mut self.means[f.category];
        match (self.mode, count) {
            (_, 0) => mean.copy_from_slice(&f.vector),
            (AverageMode::Cumulative, n) => {
                let inv = 1.0 / (n as f64 + 1.0);
                for (m, &v) in mean.iter_mut().zip(&f.vector) {
                    *m += (v - *m) * inv;
                }
            }
            (AverageMode::Ema { momentum }, _) => {
                for (m, &v) in mean.iter_mut().zip(&f.vector) {
                    *m = momentum * *m + (1.0 - momentum) * v;
                }
            }
        }
        self.counts[f.category] = count + 1;
        Ok(())
    }

    /// Stable-key JSON document `{category: {mean, count}}`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            mean: &'a [f64],
            count: u64,
        }
        let map: BTreeMap<String, Entry> = self
            .active_categories()
            .into_iter()
            .map(|c| {
                (
                    c.to_string(),
                    Entry {
                        mean: &self.means[c],
                        count: self.counts[c],
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("registry serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Keeps features whose confidence is strictly greater than `t`, preserving
/// order.
pub fn filter_proposals(feats: &[RoiFeature], t: f64) -> Result<Vec<RoiFeature>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(PrototypeError::BadThreshold(t));
    }
    Ok(feats.iter().filter(|f| f.confidence > t).cloned().collect())
}

fn kl_divergence(p: &PredictedDist, q: &PredictedDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(PrototypeError::DimensionMismatch(format!(
            "distributions over {} vs {} categories",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pc, &qc) in p.probs.iter().zip(&q.probs) {
        if pc > 0.0 {
            acc += pc * (pc / qc.max(KL_FLOOR)).ln();
        }
    }
    Ok(acc)
}

/// Explicit constraint: mean KL(original || augmented) over matched
/// proposal pairs. An empty pair list contributes zero.
pub fn explicit_loss(p0: &[PredictedDist], pk: &[PredictedDist]) -> Result<f64> {
    if p0.len() != pk.len() {
        return Err(PrototypeError::LengthMismatch(p0.len(), pk.len()));
    }
    if p0.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, q) in p0.iter().zip(pk) {
        acc += kl_divergence(p, q)?;
    }
    Ok(acc / p0.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Implicit constraint: a temperature-scaled contrastive loss over the
/// cosine-similarity matrix of matched category prototypes,
/// `-sum_i log(exp(s(i,i)) / sum_j exp(s(i,j)))`, computed with
/// max-subtraction.
pub fn implicit_loss(reg0: &PrototypeRegistry, regk: &PrototypeRegistry, tau: f64) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(PrototypeError::BadTemperature(tau));
    }
    let cats0 = reg0.active_categories();
    let catsk = regk.active_categories();
    if cats0 != catsk {
        return Err(PrototypeError::CategoryMismatch(cats0, catsk));
    }
    if cats0.is_empty() {
        return Ok(0.0);
    }
    let n = cats0.len();
    let mut sim = vec![vec![0.0f64; n]; n];
    for (i, &ci) in cats0.iter().enumerate() {
        let vi = reg0.mean(ci).expect("active category");
        for (j, &cj) in cats0.iter().enumerate() {
            let vj = regk.mean(cj).expect("active category");
            let cos = cosine(vi, vj).ok_or(PrototypeError::ZeroNormPrototype(if vi.iter().all(|&v| v == 0.0) {
                ci
            } else {
                cj
            }))?;
            sim[i][j] = cos / tau;
        }
    }
    let mut loss = 0.0;
    for i in 0..n {
        let row_max = sim[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row_max + sim[i].iter().map(|&s| (s - row_max).exp()).sum::<f64>().ln();
        loss += lse - sim[i][i];
    }
    Ok(loss)
}

/// Combined object-level loss: explicit plus implicit.
pub fn prototype_loss(exp: f64, imp: f64) -> f64 {
    exp + imp
}

/// Arithmetic mean of per-domain prototypes for one category.
pub fn avg_prototype(protos: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = protos.first().ok_or(PrototypeError::Empty)?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for p in protos {
        if p.len() != dim {
            return Err(PrototypeError::DimensionMismatch(format!(
                "prototype dims {} vs {}",
                p.len(),
                dim
            )));
        }
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= protos.len() as f64;
    }
    Ok(mean)
}

/// Concentration degree: mean over domains of the mean absolute deviation
/// from the average prototype. Zero iff all domain prototypes coincide.
pub fn concentration(protos: &[Vec<f64>]) -> Result<f64> {
    let avg = avg_prototype(protos)?;
    let dim = avg.len() as f64;
    let mut acc = 0.0;
    for p in protos {
        let dev: f64 = p.iter().zip(&avg).map(|(a, b)| (a - b).abs()).sum();
        acc += dev / dim;
    }
    Ok(acc / protos.len() as f64)
}
