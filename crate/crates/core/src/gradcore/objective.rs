//! The total training objective over paired original/augmented scenes:
//! supervised cross-entropy on both streams plus the weighted attention and
//! prototype invariance terms.
//!
//! Proposal selection for the prototype terms happens once, on the original
//! stream's confidences; the same boxes index the augmented stream. The
//! implicit term uses same-batch prototype estimates (per-category means of
//! the filtered ROI features), so gradients reach the current batch and the
//! persistent registries stay out of the graph.

use crate::raster::Raster;

use super::model::{build_scene, ParamNodes, RoiSpec, SceneNodes, ToyModel};
use super::tape::{NodeId, Tape};
use super::GradError;

pub type Result<T> = std::result::Result<T, GradError>;

/// Which attention-loss variant trains the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainAttentionMode {
    DiceSoft,
    Mse,
}

#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Confidence threshold `t`; proposals with original-stream confidence
    /// strictly above it feed the prototype terms.
    pub conf_threshold: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub att_mode: TrainAttentionMode,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lambda1: 0.1,
            lambda2: 0.1,
            conf_threshold: 0.7,
            tau: 0.2,
            att_mode: TrainAttentionMode::DiceSoft,
        }
    }
}

/// One training example: an original scene, its augmented view, and the
/// shared proposal boxes with labels.
#[derive(Clone, Copy)]
pub struct ScenePair<'a> {
    pub original: &'a Raster,
    pub augmented: &'a Raster,
    pub rois: &'a [RoiSpec],
}

/// Scalar loss nodes of one batch.
pub struct LossNodes {
    pub sup: NodeId,
    pub att: NodeId,
    pub exp: NodeId,
    pub imp: NodeId,
    pub prot: NodeId,
    pub total: NodeId,
}

/// Everything recorded for one batch forward.
pub struct BatchNodes {
    pub losses: LossNodes,
    /// `(original, augmented)` scene handles per pair.
    pub scenes: Vec<(SceneNodes, SceneNodes)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub att: f64,
    pub exp: f64,
    pub imp: f64,
    pub total: f64,
}

/// Records the full objective for a batch on the tape.
pub fn build_total_loss(
    tape: &mut Tape,
    params: &ParamNodes,
    batch: &[ScenePair],
    hyper: &Hyper,
) -> Result<BatchNodes> {
    if batch.is_empty() {
        return Err(GradError::EmptyBatch);
    }
    let mut scenes = Vec::with_capacity(batch.len());
    for pair in batch {
        let orig = build_scene(tape, params, pair.original, pair.rois)?;
        let aug = build_scene(tape, params, pair.augmented, pair.rois)?;
        scenes.push((orig, aug));
    }

    // supervised cross-entropy over every ROI of both streams
    let mut ce_terms = Vec::new();
    for (orig, aug) in &scenes {
        for scene in [orig, aug] {
            for roi in &scene.rois {
                let lp = tape.ln(roi.probs);
                let picked = tape.pick(lp, roi.label);
                ce_terms.push(tape.scale(picked, -1.0));
            }
        }
    }
    let sup = if ce_terms.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        let total = tape.sum_of(&ce_terms);
        tape.scale(total, 1.0 / ce_terms.len() as f64)
    };

    // attention invariance, mean over pairs
    let att_terms: Vec<NodeId> = scenes
        .iter()
        .map(|(orig, aug)| match hyper.att_mode {
            TrainAttentionMode::DiceSoft => {
                let a0 = orig.attention;
                let ak = aug.attention;
                tape.soft_dice(a0, ak)
            }
            TrainAttentionMode::Mse => tape.mse_loss(orig.attention, aug.attention),
        })
        .collect();
    let att = tape.mean_of(&att_terms);

    // confidence filter on the original stream decides the matched set
    let mut filtered: Vec<(usize, usize)> = Vec::new();
    for (p, (orig, _)) in scenes.iter().enumerate() {
        for (i, roi) in orig.rois.iter().enumerate() {
            let conf = tape
                .value(roi.probs)
                .data
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            if conf > hyper.conf_threshold {
                filtered.push((p, i));
            }
        }
    }

    // explicit constraint: mean KL(original || augmented) over matched pairs
    let exp = if filtered.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        let kls: Vec<NodeId> = filtered
            .iter()
            .map(|&(p, i)| {
                let (orig, aug) = &scenes[p];
                tape.kl_pair(orig.rois[i].probs, aug.rois[i].probs)
            })
            .collect();
        let total = tape.sum_of(&kls);
        tape.scale(total, 1.0 / kls.len() as f64)
    };

    // implicit constraint over same-batch prototypes
    let mut by_category: std::collections::BTreeMap<usize, (Vec<NodeId>, Vec<NodeId>)> =
        std::collections::BTreeMap::new();
    for &(p, i) in &filtered {
        let (orig, aug) = &scenes[p];
        let entry = by_category.entry(orig.rois[i].label).or_default();
        entry.0.push(orig.rois[i].pooled);
        entry.1.push(aug.rois[i].pooled);
    }
    let protos: Vec<(NodeId, NodeId)> = by_category
        .values()
        .map(|(v0, vk)| (tape.mean_of(v0), tape.mean_of(vk)))
        .collect();
    let imp = if protos.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        let n = protos.len();
        let mut sims = vec![vec![NodeId(0); n]; n];
        for i in 0..n {
            for j in 0..n {
                let cos = tape.cosine_sim(protos[i].0, protos[j].1);
                sims[i][j] = tape.scale(cos, 1.0 / hyper.tau);
            }
        }
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let lse = tape.log_sum_exp(&sims[i]);
            rows.push(tape.sub(lse, sims[i][i]));
        }
        tape.sum_of(&rows)
    };

    let prot = tape.add(exp, imp);
    let att_w = tape.scale(att, hyper.lambda1);
    let prot_w = tape.scale(prot, hyper.lambda2);
    let reg = tape.add(att_w, prot_w);
    let total = tape.add(sup, reg);

    Ok(BatchNodes {
        losses: LossNodes {
            sup,
            att,
            exp,
            imp,
            prot,
            total,
        },
        scenes,
    })
}

impl BatchNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            sup: tape.scalar_value(self.losses.sup),
            att: tape.scalar_value(self.losses.att),
            exp: tape.scalar_value(self.losses.exp),
            imp: tape.scalar_value(self.losses.imp),
            total: tape.scalar_value(self.losses.total),
        }
    }
}

/// Convenience evaluation of the objective without keeping the tape.
pub fn total_loss(model: &ToyModel, batch: &[ScenePair], hyper: &Hyper) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = model.push_params(&mut tape);
    let nodes = build_total_loss(&mut tape, &params, batch, hyper)?;
    Ok(nodes.breakdown(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::model::ModelConfig;
    use crate::prototypes::{implicit_loss, PrototypeRegistry, RoiFeature};
    use crate::raster::BoxRect;

    fn scene_pair() -> (Raster, Raster, Vec<RoiSpec>) {
        let orig = Raster::from_fn(8, 8, |y, x, c| ((y * 5 + x * 3 + c) % 11) as f64 / 11.0);
        let aug = Raster::from_fn(8, 8, |y, x, c| ((y * 3 + x * 7 + 2 * c) % 13) as f64 / 13.0);
        let rois = vec![
            RoiSpec { rect: BoxRect::new(0, 0, 4, 4), label: 0 },
            RoiSpec { rect: BoxRect::new(4, 4, 8, 8), label: 1 },
        ];
        (orig, aug, rois)
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = ToyModel::init(0, ModelConfig::default());
        assert!(matches!(
            total_loss(&model, &[], &Hyper::default()),
            Err(GradError::EmptyBatch)
        ));
    }

    #[test]
    fn zero_lambdas_reduce_to_cross_entropy() {
        let model = ToyModel::init(3, ModelConfig::default());
        let (orig, aug, rois) = scene_pair();
        let batch = [ScenePair { original: &orig, augmented: &aug, rois: &rois }];
        let hyper = Hyper { lambda1: 0.0, lambda2: 0.0, conf_threshold: 0.0, ..Hyper::default() };
        let b = total_loss(&model, &batch, &hyper).unwrap();
        assert!((b.total - b.sup).abs() < 1e-15);
        assert!(b.sup > 0.0);
    }

    #[test]
    fn identical_views_zero_the_invariance_terms() {
        let model = ToyModel::init(5, ModelConfig::default());
        let (orig, _, rois) = scene_pair();
        let batch = [ScenePair { original: &orig, augmented: &orig, rois: &rois }];
        let hyper = Hyper { conf_threshold: 0.0, att_mode: TrainAttentionMode::Mse, ..Hyper::default() };
        let b = total_loss(&model, &batch, &hyper).unwrap();
        assert_eq!(b.att, 0.0);
        assert!(b.exp.abs() < 1e-12);
        // implicit term compares a registry against itself: identical
        // prototypes, so every similarity row is maximal at the diagonal
        assert!(b.imp >= 0.0);
    }

    #[test]
    fn components_recombine_to_the_total() {
        let model = ToyModel::init(7, ModelConfig::default());
        let (orig, aug, rois) = scene_pair();
        let batch = [ScenePair { original: &orig, augmented: &aug, rois: &rois }];
        let hyper = Hyper { conf_threshold: 0.0, ..Hyper::default() };
        let b = total_loss(&model, &batch, &hyper).unwrap();
        let recombined = b.sup + 0.1 * b.att + 0.1 * (b.exp + b.imp);
        assert!((b.total - recombined).abs() < 1e-9, "{} vs {recombined}", b.total);
    }

    #[test]
    fn high_threshold_disables_prototype_terms() {
        // an untrained 3-category model cannot clear t close to 1
        let model = ToyModel::init(11, ModelConfig::default());
        let (orig, aug, rois) = scene_pair();
        let batch = [ScenePair { original: &orig, augmented: &aug, rois: &rois }];
        let hyper = Hyper { conf_threshold: 0.999999, ..Hyper::default() };
        let b = total_loss(&model, &batch, &hyper).unwrap();
        assert_eq!(b.exp, 0.0);
        assert_eq!(b.imp, 0.0);
    }

    #[test]
    fn tape_implicit_term_matches_registry_implementation() {
        // one ROI per category in each stream makes the batch prototypes
        // equal the raw pooled vectors, so the tape value must match the
        // registry-based implicit loss exactly
        let model = ToyModel::init(13, ModelConfig::default());
        let (orig, aug, rois) = scene_pair();
        let batch = [ScenePair { original: &orig, augmented: &aug, rois: &rois }];
        let hyper = Hyper { conf_threshold: 0.0, ..Hyper::default() };

        let mut tape = Tape::new();
        let params = model.push_params(&mut tape);
        let nodes = build_total_loss(&mut tape, &params, &batch, &hyper).unwrap();
        let b = nodes.breakdown(&tape);

        let d = model.config.feat_channels;
        let mut reg0 = PrototypeRegistry::new(2, d);
        let mut regk = PrototypeRegistry::new(2, d);
        let (orig_nodes, aug_nodes) = &nodes.scenes[0];
        for (scene, reg) in [(orig_nodes, &mut reg0), (aug_nodes, &mut regk)] {
            for roi in &scene.rois {
                reg.update(&RoiFeature {
                    vector: tape.value(roi.pooled).data.clone(),
                    category: roi.label,
                    confidence: 1.0,
                })
                .unwrap();
            }
        }
        let want = implicit_loss(&reg0, &regk, hyper.tau).unwrap();
        assert!((b.imp - want).abs() < 1e-12, "{} vs {want}", b.imp);
    }
}
