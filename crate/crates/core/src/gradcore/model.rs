//! The toy backbone and head: conv -> ReLU -> conv features, sigmoid
//! attention gating, and per-ROI mean-pool -> linear -> softmax heads.
//!
//! Parameters live in six tensors (conv1 w/b, conv2 w/b, head w/b) and are
//! flattened in that fixed order for gradients, finite differences, and the
//! checkpoint format (text shape manifest + little-endian f32 payload).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMap, FeatureMap};
use crate::prototypes::{PredictedDist, RoiFeature};
use crate::raster::{BoxRect, Raster};

use super::tape::{NodeId, Tape, Tensor};
use super::GradError;

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden_channels: usize,
    pub feat_channels: usize,
    pub n_categories: usize,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_channels: 8,
            feat_channels: 8,
            n_categories: 3,
            kernel: 3,
        }
    }
}

pub const IN_CHANNELS: usize = 3;
const PARAM_NAMES: [&str; 6] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b"];

/// Two-conv backbone plus a linear/softmax head over pooled ROI features.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ToyModel {
    /// Tensor shapes in flat order.
    pub fn shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let k = config.kernel;
        let (h, c, n) = (config.hidden_channels, config.feat_channels, config.n_categories);
        vec![
            vec![h, IN_CHANNELS, k, k],
            vec![h],
            vec![c, h, k, k],
            vec![c],
            vec![n, c],
            vec![n],
        ]
    }

    /// Uniform `U[-a, a]` init with `a = sqrt(6 / (fan_in + fan_out))` per
    /// layer; tensors are drawn in flat order from one seeded stream.
    pub fn init(seed: u64, config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = config.kernel * config.kernel;
        let fans = [
            (IN_CHANNELS * k2, config.hidden_channels * k2),
            (IN_CHANNELS * k2, config.hidden_channels * k2),
            (config.hidden_channels * k2, config.feat_channels * k2),
            (config.hidden_channels * k2, config.feat_channels * k2),
            (config.feat_channels, config.n_categories),
            (config.feat_channels, config.n_categories),
        ];
        let tensors = Self::shapes(&config)
            .into_iter()
            .zip(fans)
            .map(|(dims, (fan_in, fan_out))| {
                let a = xavier_bound(fan_in, fan_out);
                let len: usize = dims.iter().product();
                Tensor {
                    dims,
                    data: (0..len).map(|_| a * (2.0 * rng.random::<f64>() - 1.0)).collect(),
                }
            })
            .collect();
        ToyModel { config, tensors }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Parameters concatenated in flat order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut offset = 0;
        for t in &mut self.tensors {
            let len = t.len();
            t.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_flat(flat);
        m
    }

    /// Pushes every parameter tensor onto a tape as a trainable leaf.
    pub fn push_params(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            ids: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Checkpoint: text manifest, a `DATA` marker line, then every tensor's
    /// values as little-endian f32 in flat order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut head = String::from("TOYMODEL 1\n");
        head.push_str(&format!("hidden_channels {}\n", self.config.hidden_channels));
        head.push_str(&format!("feat_channels {}\n", self.config.feat_channels));
        head.push_str(&format!("n_categories {}\n", self.config.n_categories));
        head.push_str(&format!("kernel {}\n", self.config.kernel));
        for (name, t) in PARAM_NAMES.iter().zip(&self.tensors) {
            let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        }
        head.push_str("DATA\n");
        let mut bytes = head.into_bytes();
        for t in &self.tensors {
            for &v in &t.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let marker = b"DATA\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| GradError::BadCheckpoint("missing DATA marker".into()))?;
        let head = std::str::from_utf8(&bytes[..split])
            .map_err(|_| GradError::BadCheckpoint("non-utf8 manifest".into()))?;
        let payload = &bytes[split + marker.len()..];

        let mut lines = head.lines();
        if lines.next() != Some("TOYMODEL 1") {
            return Err(GradError::BadCheckpoint("bad magic".into()));
        }
        let mut fields = std::collections::HashMap::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [key, value] if *key != "tensor" => {
                    let v: usize = value
                        .parse()
                        .map_err(|_| GradError::BadCheckpoint(format!("bad value for {key}")))?;
                    fields.insert(key.to_string(), v);
                }
                ["tensor", name, dims @ ..] => {
                    let dims = dims
                        .iter()
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| GradError::BadCheckpoint(format!("bad dims for {name}")))?;
                    shapes.push((name.to_string(), dims));
                }
                _ => return Err(GradError::BadCheckpoint(format!("bad manifest line: {line}"))),
            }
        }
        let get = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| GradError::BadCheckpoint(format!("missing {key}")))
        };
        let config = ModelConfig {
            hidden_channels: get("hidden_channels")?,
            feat_channels: get("feat_channels")?,
            n_categories: get("n_categories")?,
            kernel: get("kernel")?,
        };
        let expected = Self::shapes(&config);
        if shapes.len() != PARAM_NAMES.len() {
            return Err(GradError::BadCheckpoint(format!(
                "expected {} tensors, manifest has {}",
                PARAM_NAMES.len(),
                shapes.len()
            )));
        }
        for ((name, dims), (want_name, want_dims)) in shapes.iter().zip(PARAM_NAMES.iter().zip(&expected)) {
            if name != want_name || dims != want_dims {
                return Err(GradError::BadCheckpoint(format!(
                    "tensor {name} {dims:?}, expected {want_name} {want_dims:?}"
                )));
            }
        }
        let total: usize = expected.iter().map(|d| d.iter().product::<usize>()).sum();
        if payload.len() != total * 4 {
            return Err(GradError::BadCheckpoint(format!(
                "payload {} bytes, expected {}",
                payload.len(),
                total * 4
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let tensors = expected
            .into_iter()
            .map(|dims| {
                let len: usize = dims.iter().product();
                Tensor {
                    dims,
                    data: (&mut values).take(len).collect(),
                }
            })
            .collect();
        Ok(ToyModel { config, tensors })
    }
}

/// Tape leaves for the six parameter tensors, in flat order.
pub struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn conv1_w(&self) -> NodeId {
        self.ids[0]
    }
    pub fn conv1_b(&self) -> NodeId {
        self.ids[1]
    }
    pub fn conv2_w(&self) -> NodeId {
        self.ids[2]
    }
    pub fn conv2_b(&self) -> NodeId {
        self.ids[3]
    }
    pub fn head_w(&self) -> NodeId {
        self.ids[4]
    }
    pub fn head_b(&self) -> NodeId {
        self.ids[5]
    }

    /// Concatenated gradient vector in flat parameter order; call after
    /// `Tape::backward`.
    pub fn gradient(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in &self.ids {
            out.extend_from_slice(tape.grad(id));
        }
        out
    }
}

/// One proposal: a half-open box plus its ground-truth label.
#[derive(Debug, Clone, Copy)]
pub struct RoiSpec {
    pub rect: BoxRect,
    pub label: usize,
}

/// Tape handles produced by one scene forward pass.
pub struct SceneNodes {
    /// Backbone features `E(x)`, pre-sigmoid.
    pub feature: NodeId,
    /// `sigma(E(x))`.
    pub attention: NodeId,
    /// `E(x) (.) attention`.
    pub gated: NodeId,
    pub rois: Vec<RoiNodes>,
}

pub struct RoiNodes {
    pub pooled: NodeId,
    pub probs: NodeId,
    pub label: usize,
}

fn image_tensor(image: &Raster) -> Tensor {
    let (h, w) = (image.height(), image.width());
    let mut data = vec![0.0f64; IN_CHANNELS * h * w];
    for c in 0..IN_CHANNELS {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = image.get(y, x, c);
            }
        }
    }
    Tensor::chw(IN_CHANNELS, h, w, data)
}

/// Records one scene's forward pass (backbone, attention gating, per-ROI
/// heads) on the tape.
pub fn build_scene(
    tape: &mut Tape,
    params: &ParamNodes,
    image: &Raster,
    rois: &[RoiSpec],
) -> Result<SceneNodes> {
    let (h, w) = (image.height(), image.width());
    if h < 2 || w < 2 {
        return Err(GradError::ImageTooSmall { height: h, width: w });
    }
    for roi in rois {
        if !roi.rect.fits_in(w, h) || roi.rect.area() == 0 {
            return Err(GradError::BoxOutOfBounds {
                x0: roi.rect.x0,
                y0: roi.rect.y0,
                x1: roi.rect.x1,
                y1: roi.rect.y1,
                width: w,
                height: h,
            });
        }
    }
    let x = tape.constant(image_tensor(image));
    let h1 = tape.conv2d(x, params.conv1_w(), params.conv1_b());
    let a1 = tape.relu(h1);
    let feature = tape.conv2d(a1, params.conv2_w(), params.conv2_b());
    let attention = tape.sigmoid(feature);
    let gated = tape.mul(feature, attention);
    let rois = rois
        .iter()
        .map(|roi| {
            let pooled = tape.mean_pool_box(gated, roi.rect);
            let logits = tape.linear(pooled, params.head_w(), params.head_b());
            let probs = tape.softmax(logits);
            RoiNodes {
                pooled,
                probs,
                label: roi.label,
            }
        })
        .collect();
    Ok(SceneNodes {
        feature,
        attention,
        gated,
        rois,
    })
}

/// Plain forward pass: feature map, attention map, and per-ROI predictions.
/// Confidence is the max softmax probability.
pub struct ForwardOutput {
    pub feature: FeatureMap,
    pub attention: AttentionMap,
    pub rois: Vec<(PredictedDist, RoiFeature)>,
}

pub fn forward(model: &ToyModel, image: &Raster, rois: &[RoiSpec]) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let params = model.push_params(&mut tape);
    let scene = build_scene(&mut tape, &params, image, rois)?;
    let fv = tape.value(scene.feature);
    let (c, h, w) = (fv.dims[0], fv.dims[1], fv.dims[2]);
    let feature = FeatureMap::from_values(c, h, w, fv.data.clone())
        .map_err(|e| GradError::BadForward(e.to_string()))?;
    let attention = AttentionMap::from_values(c, h, w, tape.value(scene.attention).data.clone())
        .map_err(|e| GradError::BadForward(e.to_string()))?;
    let rois = scene
        .rois
        .iter()
        .map(|r| {
            let probs = PredictedDist::new(tape.value(r.probs).data.clone())
                .map_err(|e| GradError::BadForward(e.to_string()))?;
            let feature = RoiFeature {
                vector: tape.value(r.pooled).data.clone(),
                category: r.label,
                confidence: probs.max_prob(),
            };
            Ok((probs, feature))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOutput {
        feature,
        attention,
        rois,
    })
}
