//! Attention maps, binarization, Dice losses, and attention-gated feature
//! selection.
//!
//! The attention map is the elementwise sigmoid of the backbone features,
//! kept at full `C x H x W` resolution so it can gate the features by an
//! elementwise product. Binarizing it yields a significance map; the Dice
//! loss between two significance maps measures how far apart the activated
//! regions are. Training uses the differentiable soft variant; the hard
//! variant is an evaluation metric.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation")]
    NonFinite,
    #[error("attention value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("binarization threshold {0} outside (0, 1)")]
    BadThreshold(f64),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Default binarization threshold: the sigmoid midpoint, so a feature's
/// sign decides its significance.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `C x H x W` real activations, planar layout (`(c * H + y) * W + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: MapShape,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_values(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = MapShape { channels, height, width };
        if data.len() != shape.len() {
            return Err(AttentionError::ShapeMismatch(format!(
                "expected {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite);
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn shape(&self) -> MapShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Sigmoid of a feature map; values in `[0, 1]`, strictly interior when
/// produced by [`attention_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    shape: MapShape,
    data: Vec<f64>,
}

impl AttentionMap {
    /// Accepts the closed interval so limit maps (exact 0/1 values) can be
    /// built in tests and comparisons.
    pub fn from_values(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = MapShape { channels, height, width };
        if data.len() != shape.len() {
            return Err(AttentionError::ShapeMismatch(format!(
                "expected {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(AttentionError::OutOfRange(v));
            }
        }
        Ok(AttentionMap { shape, data })
    }

    pub fn shape(&self) -> MapShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mean over channels, one value per pixel; used for heat-image export.
    pub fn channel_mean(&self) -> Vec<f64> {
        let MapShape { channels, height, width } = self.shape;
        let mut out = vec![0.0; height * width];
        for c in 0..channels {
            for i in 0..height * width {
                out[i] += self.data[c * height * width + i];
            }
        }
        for v in &mut out {
            *v /= channels as f64;
        }
        out
    }

    /// Channel-mean map quantized for PGM export.
    pub fn heat_bytes(&self) -> Vec<u8> {
        self.channel_mean()
            .into_iter()
            .map(crate::raster::quantize)
            .collect()
    }
}

/// Binary significance map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignificanceMap {
    shape: MapShape,
    data: Vec<u8>,
}

impl SignificanceMap {
    pub fn shape(&self) -> MapShape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise sigmoid; outputs are nudged into the open interval so the
/// attention map invariant (strictly inside `(0, 1)`) survives saturation.
pub fn attention_map(f: &FeatureMap) -> AttentionMap {
    const EPS: f64 = 1e-12;
    let data = f
        .data
        .iter()
        .map(|&v| sigmoid(v).clamp(EPS, 1.0 - EPS))
        .collect();
    AttentionMap {
        shape: f.shape,
        data,
    }
}

/// Pixel-level binarization: 1 where the attention value is `>= theta`.
pub fn binarize(a: &AttentionMap, theta: f64) -> Result<SignificanceMap> {
    if !(0.0 < theta && theta < 1.0) {
        return Err(AttentionError::BadThreshold(theta));
    }
    Ok(SignificanceMap {
        shape: a.shape,
        data: a.data.iter().map(|&v| (v >= theta) as u8).collect(),
    })
}

fn check_shapes(a: MapShape, b: MapShape) -> Result<()> {
    if a != b {
        return Err(AttentionError::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Dice loss between two binary maps:
/// `1 - (2 |X1 ^ X2| + 1) / (|X1| + |X2| + 1)`.
pub fn dice(x1: &SignificanceMap, x2: &SignificanceMap) -> Result<f64> {
    check_shapes(x1.shape, x2.shape)?;
    let inter: u64 = x1
        .data
        .iter()
        .zip(&x2.data)
        .map(|(&a, &b)| (a & b) as u64)
        .sum();
    let n1 = x1.count_ones();
    let n2 = x2.count_ones();
    Ok(1.0 - (2 * inter + 1) as f64 / (n1 + n2 + 1) as f64)
}

/// Differentiable surrogate: counts become sums and the intersection
/// becomes an elementwise product.
pub fn soft_dice(a1: &AttentionMap, a2: &AttentionMap) -> Result<f64> {
    check_shapes(a1.shape, a2.shape)?;
    let inter: f64 = a1.data.iter().zip(&a2.data).map(|(a, b)| a * b).sum();
    let s1: f64 = a1.data.iter().sum();
    let s2: f64 = a2.data.iter().sum();
    Ok(1.0 - (2.0 * inter + 1.0) / (s1 + s2 + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionLossMode {
    /// Dice over binarized maps; evaluation metric, no gradient path.
    DiceHard,
    /// Soft Dice over the attention values; the training path.
    DiceSoft,
    /// Mean squared difference of the attention values (ablation variant).
    Mse,
}

/// Attention invariance loss between two feature maps.
pub fn attention_loss(f0: &FeatureMap, fk: &FeatureMap, mode: AttentionLossMode) -> Result<f64> {
    check_shapes(f0.shape, fk.shape)?;
    let a0 = attention_map(f0);
    let ak = attention_map(fk);
    match mode {
        AttentionLossMode::DiceHard => dice(&binarize(&a0, DEFAULT_THETA)?, &binarize(&ak, DEFAULT_THETA)?),
        AttentionLossMode::DiceSoft => soft_dice(&a0, &ak),
        AttentionLossMode::Mse => {
            let n = a0.data.len() as f64;
            Ok(a0
                .data
                .iter()
                .zip(&ak.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n)
        }
    }
}

/// Attention-gated feature selection: the elementwise product `F (.) A`.
pub fn gate_features(f: &FeatureMap, a: &AttentionMap) -> Result<FeatureMap> {
    check_shapes(f.shape, a.shape)?;
    Ok(FeatureMap {
        shape: f.shape,
        data: f.data.iter().zip(&a.data).map(|(x, g)| x * g).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(values: &[f64]) -> FeatureMap {
        FeatureMap::from_values(1, 1, values.len(), values.to_vec()).unwrap()
    }

    fn amap(values: &[f64]) -> AttentionMap {
        AttentionMap::from_values(1, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let a = attention_map(&fmap(&[0.0; 6]));
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sigmoid_saturates_near_one() {
        let a = attention_map(&fmap(&[100.0]));
        assert!(a.data()[0] >= 1.0 - 1e-6);
        assert!(a.data()[0] < 1.0); // open interval preserved
    }

    #[test]
    fn sigmoid_of_two() {
        let a = attention_map(&fmap(&[2.0]));
        assert!((a.data()[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        assert!(matches!(
            FeatureMap::from_values(1, 1, 1, vec![f64::INFINITY]),
            Err(AttentionError::NonFinite)
        ));
    }

    #[test]
    fn binarize_boundary_uses_geq() {
        let all_half = amap(&[0.5; 4]);
        let sig = binarize(&all_half, 0.5).unwrap();
        assert!(sig.data().iter().all(|&v| v == 1));

        let below = amap(&[0.49; 4]);
        let sig = binarize(&below, 0.5).unwrap();
        assert!(sig.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn binarize_checker() {
        let a = amap(&[0.3, 0.7, 0.3, 0.7]);
        let sig = binarize(&a, 0.5).unwrap();
        assert_eq!(sig.data(), &[0, 1, 0, 1]);
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let a = amap(&[0.5]);
        assert!(matches!(binarize(&a, 0.0), Err(AttentionError::BadThreshold(_))));
        assert!(matches!(binarize(&a, 1.0), Err(AttentionError::BadThreshold(_))));
    }

    #[test]
    fn dice_identical_maps_is_zero() {
        let a = amap(&[0.9, 0.9, 0.9, 0.9, 0.1, 0.1]);
        let sig = binarize(&a, 0.5).unwrap();
        assert_eq!(sig.count_ones(), 4);
        assert_eq!(dice(&sig, &sig).unwrap(), 0.0);
    }

    #[test]
    fn dice_disjoint_four_four() {
        let x1 = binarize(&amap(&[0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1]), 0.5).unwrap();
        let x2 = binarize(&amap(&[0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.9]), 0.5).unwrap();
        let want = 1.0 - 1.0 / 9.0;
        assert!((dice(&x1, &x2).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn dice_all_empty_is_zero() {
        let z = binarize(&amap(&[0.1; 5]), 0.5).unwrap();
        assert_eq!(dice(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded() {
        // brute force over all 2x2 binary map pairs
        for bits1 in 0..16u8 {
            for bits2 in 0..16u8 {
                let vals = |bits: u8| -> Vec<f64> {
                    (0..4).map(|i| if bits >> i & 1 == 1 { 0.9 } else { 0.1 }).collect()
                };
                let x1 = binarize(&amap(&vals(bits1)), 0.5).unwrap();
                let x2 = binarize(&amap(&vals(bits2)), 0.5).unwrap();
                let d12 = dice(&x1, &x2).unwrap();
                let d21 = dice(&x2, &x1).unwrap();
                assert_eq!(d12, d21);
                assert!((0.0..1.0).contains(&d12));
            }
        }
    }

    #[test]
    fn soft_dice_all_ones_limit_is_zero() {
        let a = amap(&[1.0; 4]);
        assert!(soft_dice(&a, &a).unwrap().abs() < 1e-15);
    }

    #[test]
    fn soft_dice_matches_hand_computation() {
        let a = amap(&[0.2, 0.4, 0.6, 0.8]);
        // 1 - (2 * sum(a^2) + 1) / (2 * sum(a) + 1) = 1 - 3.4 / 5
        assert!((soft_dice(&a, &a).unwrap() - 0.32).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_equals_hard_dice_on_binary_maps() {
        for bits1 in 0..16u8 {
            for bits2 in 0..16u8 {
                let vals = |bits: u8| -> Vec<f64> {
                    (0..4).map(|i| (bits >> i & 1) as f64).collect()
                };
                let a1 = amap(&vals(bits1));
                let a2 = amap(&vals(bits2));
                let s1 = binarize(&a1, 0.5).unwrap();
                let s2 = binarize(&a2, 0.5).unwrap();
                // note: binarize maps 1.0 -> 1 and 0.0 -> 0
                assert!((soft_dice(&a1, &a2).unwrap() - dice(&s1, &s2).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_loss_for_identical_features() {
        let f = fmap(&[1.0, -2.0, 0.5, 3.0]);
        assert_eq!(attention_loss(&f, &f, AttentionLossMode::DiceHard).unwrap(), 0.0);
        assert_eq!(attention_loss(&f, &f, AttentionLossMode::Mse).unwrap(), 0.0);
        // soft dice of a map with itself is the formula's self-overlap
        // value, which reaches zero only for binary maps
        let a = attention_map(&f);
        let s1: f64 = a.data().iter().sum();
        let s2: f64 = a.data().iter().map(|v| v * v).sum();
        let want = 1.0 - (2.0 * s2 + 1.0) / (2.0 * s1 + 1.0);
        let got = attention_loss(&f, &f, AttentionLossMode::DiceSoft).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_saturated_complement() {
        let n = 2 * 3 * 4;
        let f0 = FeatureMap::from_values(2, 3, 4, vec![10.0; n]).unwrap();
        let fk = FeatureMap::from_values(2, 3, 4, vec![-10.0; n]).unwrap();
        let got = attention_loss(&f0, &fk, AttentionLossMode::DiceHard).unwrap();
        let want = 1.0 - 1.0 / (n as f64 + 1.0);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_mse_constant_difference() {
        // attention values differing by 0.1 uniformly -> mse 0.01
        let f0 = fmap(&[0.0; 8]); // sigma = 0.5
        let target = 0.6f64;
        let logit = (target / (1.0 - target)).ln(); // sigma(logit) = 0.6
        let fk = fmap(&vec![logit; 8]);
        let got = attention_loss(&f0, &fk, AttentionLossMode::Mse).unwrap();
        assert!((got - 0.01).abs() < 1e-9);
    }

    #[test]
    fn attention_loss_invariant_under_channel_permutation() {
        let f0 = FeatureMap::from_values(2, 2, 2, vec![0.3, -1.0, 2.0, 0.7, -0.2, 1.5, 0.0, -3.0]).unwrap();
        let fk = FeatureMap::from_values(2, 2, 2, vec![1.3, 0.4, -0.5, 0.2, 0.9, -1.1, 0.6, 0.8]).unwrap();
        let swap = |f: &FeatureMap| {
            let mut v = f.data()[4..8].to_vec();
            v.extend_from_slice(&f.data()[0..4]);
            FeatureMap::from_values(2, 2, 2, v).unwrap()
        };
        for mode in [AttentionLossMode::DiceHard, AttentionLossMode::DiceSoft, AttentionLossMode::Mse] {
            let a = attention_loss(&f0, &fk, mode).unwrap();
            let b = attention_loss(&swap(&f0), &swap(&fk), mode).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_features_limits() {
        let f = fmap(&[1.0, -2.0, 3.0]);
        let ones = amap(&[1.0; 3]);
        assert_eq!(gate_features(&f, &ones).unwrap().data(), f.data());

        let zeros_f = fmap(&[0.0; 3]);
        let a = amap(&[0.3, 0.6, 0.9]);
        assert!(gate_features(&zeros_f, &a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_features_scalar_spot_check() {
        let f = fmap(&[2.0]);
        let a = attention_map(&f);
        let gated = gate_features(&f, &a).unwrap();
        assert!((gated.data()[0] - 1.761594).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = fmap(&[1.0, 2.0]);
        let g = FeatureMap::from_values(1, 2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            attention_loss(&f, &g, AttentionLossMode::DiceSoft),
            Err(AttentionError::ShapeMismatch(_))
        ));
    }
}
