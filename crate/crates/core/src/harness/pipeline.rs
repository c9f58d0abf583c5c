//! The four run pipelines: augment, train, gradcheck, diagnose.
//!
//! Training follows the shared-parameter two-stream scheme: each step takes
//! two scenes, augments each with a fresh seeded plan, and optimizes the
//! combined objective over the paired original/augmented views. Prototype
//! registries accumulate confidence-filtered ROI features per stream during
//! the run; the reported end-of-run diagnostics (hard Dice between
//! significance maps, per-category concentration d_c) come from a separate
//! evaluation pass over the trained model, with the original stream as
//! domain 0 and each evaluation plan as a further domain.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::{attention_loss, AttentionError, AttentionLossMode};
use crate::gradcore::{
    build_total_loss, gradcheck_component, forward, GradError, Hyper, LossComponent, ModelConfig,
    RoiSpec, SgdMomentum, Tape, ToyModel, FD_EPS,
};
use crate::localaug::{glt, sample_plan, AugError, AugmentationPlan, PlanConfig};
use crate::prototypes::{PrototypeError, PrototypeRegistry, RoiFeature};
use crate::raster::{disjointify, ObjectSet, Raster, RasterError};
use crate::seeds::child_seed;
use crate::spectral::SpectralError;

use super::config::{ConfigError, RunConfig};
use super::metrics::{MetricsReport, StepMetrics, Summary};
use super::scene::{gen_scenes, scene_rois, SyntheticScene, N_CATEGORIES};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("training diverged at step {step}: {source}")]
    Divergence { step: usize, source: GradError },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

const MODEL_TAG: u64 = 0x4d4f_4445; // "MODE"
const PLAN_TAG: u64 = 0x0050_4c41_4e00; // "PLAN"
const EVAL_TAG: u64 = 0x0045_5641_4c00; // "EVAL"
const GRADCHECK_TAG: u64 = 0x4743_4845; // "GCHE"

impl RunConfig {
    fn plan_config_for(&self, height: usize, width: usize) -> PlanConfig {
        let auto = (height.min(width) / 8).max(1);
        let r_max = if self.r_max == 0 { auto } else { self.r_max };
        PlanConfig {
            r_min: self.r_min.min(r_max),
            r_max,
            identity_background: false,
        }
    }

    fn hyper(&self) -> Result<Hyper> {
        Ok(Hyper {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            conf_threshold: self.conf_threshold,
            tau: self.tau,
            att_mode: self.attention_mode()?,
        })
    }

    fn model_config(&self, n_categories: usize) -> ModelConfig {
        ModelConfig {
            hidden_channels: self.hidden_channels,
            feat_channels: self.feat_channels,
            n_categories,
            kernel: 3,
        }
    }
}

/// Augments one image. Masks are disjointified first; when no plan is
/// given, one is sampled from `seed` with ranges from the config.
pub fn cmd_augment(
    image: &Raster,
    objects: &ObjectSet,
    plan_in: Option<AugmentationPlan>,
    seed: u64,
    cfg: &RunConfig,
) -> Result<(Raster, AugmentationPlan)> {
    let objects = disjointify(objects);
    let plan = match plan_in {
        Some(p) => p,
        None => sample_plan(
            seed,
            objects.boxes(),
            image.width(),
            image.height(),
            &cfg.plan_config_for(image.height(), image.width()),
        ),
    };
    let out = glt(image, &objects, &plan)?;
    Ok((out, plan))
}

/// Everything a training run produces.
pub struct TrainOutput {
    pub report: MetricsReport,
    pub model: ToyModel,
    /// Running registries accumulated during training (original stream,
    /// augmented stream).
    pub registries: (PrototypeRegistry, PrototypeRegistry),
}

struct PreparedScene {
    scene: SyntheticScene,
    rois: Vec<RoiSpec>,
}

fn prepare_scenes(cfg: &RunConfig) -> Vec<PreparedScene> {
    gen_scenes(cfg.seed, cfg.n_scenes, cfg.size)
        .into_iter()
        .map(|scene| {
            let rois = scene_rois(&scene);
            PreparedScene { scene, rois }
        })
        .collect()
}

fn augment_scene(prepared: &PreparedScene, plan_seed: u64, cfg: &RunConfig) -> Result<Raster> {
    let plan = sample_plan(
        plan_seed,
        prepared.scene.objects.boxes(),
        cfg.size,
        cfg.size,
        &cfg.plan_config_for(cfg.size, cfg.size),
    );
    Ok(glt(&prepared.scene.raster, &prepared.scene.objects, &plan)?)
}

/// Paired-stream training over synthetic scenes.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let hyper = cfg.hyper()?;
    let proto_mode = cfg.proto_mode()?;
    let scenes = prepare_scenes(cfg);
    let mut model = ToyModel::init(child_seed(cfg.seed, MODEL_TAG), cfg.model_config(N_CATEGORIES));
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, model.n_params())?;
    let mut reg0 = PrototypeRegistry::with_mode(N_CATEGORIES, cfg.feat_channels, proto_mode);
    let mut regk = PrototypeRegistry::with_mode(N_CATEGORIES, cfg.feat_channels, proto_mode);
    let mut report = MetricsReport::new(cfg.clone());

    for step in 0..cfg.steps {
        // two scenes per step, each with one original and one augmented view
        let indices = [(2 * step) % scenes.len(), (2 * step + 1) % scenes.len()];
        let mut augmented = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            let plan_seed = child_seed(cfg.seed, PLAN_TAG ^ (2 * step + slot) as u64);
            augmented.push(augment_scene(&scenes[i], plan_seed, cfg)?);
        }
        let batch: Vec<crate::gradcore::ScenePair> = indices
            .iter()
            .zip(&augmented)
            .map(|(&i, aug)| crate::gradcore::ScenePair {
                original: &scenes[i].scene.raster,
                augmented: aug,
                rois: &scenes[i].rois,
            })
            .collect();

        let mut tape = Tape::new();
        let params = model.push_params(&mut tape);
        let nodes = build_total_loss(&mut tape, &params, &batch, &hyper)
            .map_err(|source| HarnessError::Divergence { step, source })?;
        let breakdown = nodes.breakdown(&tape);
        tape.backward(nodes.losses.total)
            .map_err(|source| HarnessError::Divergence { step, source })?;
        let grad = params.gradient(&tape);
        opt.step(&mut model, &grad)
            .map_err(|source| HarnessError::Divergence { step, source })?;

        // fold matched confidence-filtered features into the running
        // registries (selection on the original stream, per the objective)
        for (orig, aug) in &nodes.scenes {
            for (r0, rk) in orig.rois.iter().zip(&aug.rois) {
                let conf = tape.value(r0.probs).data.iter().cloned().fold(0.0f64, f64::max);
                if conf > hyper.conf_threshold {
                    reg0.update(&RoiFeature {
                        vector: tape.value(r0.pooled).data.clone(),
                        category: r0.label,
                        confidence: conf,
                    })?;
                    let conf_k = tape.value(rk.probs).data.iter().cloned().fold(0.0f64, f64::max);
                    regk.update(&RoiFeature {
                        vector: tape.value(rk.pooled).data.clone(),
                        category: rk.label,
                        confidence: conf_k,
                    })?;
                }
            }
        }

        report.steps.push(StepMetrics {
            step,
            sup: breakdown.sup,
            att: breakdown.att,
            exp: breakdown.exp,
            imp: breakdown.imp,
            total: breakdown.total,
        });
    }

    let eval = evaluate(&model, &scenes, cfg)?;
    report.summary = Summary {
        dice_hard: Some(eval.dice_hard),
        d_c: eval.d_c,
        mean_d_c: eval.mean_d_c,
        ..Summary::default()
    };
    Ok(TrainOutput {
        report,
        model,
        registries: (reg0, regk),
    })
}

/// End-of-run diagnostics for a model over a scene set.
pub struct EvalOutcome {
    pub dice_hard: f64,
    pub d_c: BTreeMap<String, f64>,
    pub mean_d_c: Option<f64>,
    /// Domain registries: index 0 is the original stream, then one per
    /// evaluation plan.
    pub domains: Vec<PrototypeRegistry>,
}

fn evaluate(model: &ToyModel, scenes: &[PreparedScene], cfg: &RunConfig) -> Result<EvalOutcome> {
    let k_plans = cfg.eval_plans.max(1);
    let mut domains = vec![PrototypeRegistry::new(N_CATEGORIES, cfg.feat_channels); 1 + k_plans];
    let mut dice_acc = 0.0;
    let mut dice_n = 0usize;

    for (i, prepared) in scenes.iter().enumerate() {
        let out0 = forward(model, &prepared.scene.raster, &prepared.rois)?;
        for (_, feat) in &out0.rois {
            if feat.confidence > cfg.conf_threshold {
                domains[0].update(feat)?;
            }
        }
        for j in 0..k_plans {
            let plan_seed = child_seed(cfg.seed, EVAL_TAG ^ (i * k_plans + j) as u64);
            let aug = augment_scene(prepared, plan_seed, cfg)?;
            let outk = forward(model, &aug, &prepared.rois)?;
            dice_acc += attention_loss(&out0.feature, &outk.feature, AttentionLossMode::DiceHard)?;
            dice_n += 1;
            for (_, feat) in &outk.rois {
                if feat.confidence > cfg.conf_threshold {
                    domains[1 + j].update(feat)?;
                }
            }
        }
    }

    let mut d_c = BTreeMap::new();
    for c in 0..N_CATEGORIES {
        let protos: Vec<Vec<f64>> = domains
            .iter()
            .filter_map(|reg| reg.mean(c).map(|m| m.to_vec()))
            .collect();
        if protos.len() >= 2 {
            d_c.insert(c.to_string(), crate::prototypes::concentration(&protos)?);
        }
    }
    let mean_d_c = if d_c.is_empty() {
        None
    } else {
        Some(d_c.values().sum::<f64>() / d_c.len() as f64)
    };
    Ok(EvalOutcome {
        dice_hard: dice_acc / dice_n.max(1) as f64,
        d_c,
        mean_d_c,
        domains,
    })
}

/// The deterministic 8x8 two-category scene used by the gradient check.
fn gradcheck_fixture(cfg: &RunConfig) -> Result<(Raster, Raster, Vec<RoiSpec>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, GRADCHECK_TAG));
    let mut data = Vec::with_capacity(8 * 8 * 3);
    for _ in 0..8 * 8 * 3 {
        data.push(rng.random::<f64>());
    }
    let image = Raster::from_data(8, 8, data)?;
    let boxes = [
        crate::raster::BoxRect::new(0, 0, 4, 4),
        crate::raster::BoxRect::new(4, 4, 8, 8),
    ];
    let masks = boxes
        .iter()
        .map(|b| crate::raster::GrayMask::from_fn(8, 8, |y, x| (b.y0..b.y1).contains(&y) && (b.x0..b.x1).contains(&x)))
        .collect();
    let objects = ObjectSet::from_parts(masks, boxes.to_vec(), vec![0, 1])?;
    let plan = sample_plan(
        child_seed(cfg.seed, GRADCHECK_TAG + 1),
        objects.boxes(),
        8,
        8,
        &PlanConfig { r_min: 1, r_max: 1, identity_background: false },
    );
    let augmented = glt(&image, &objects, &plan)?;
    let rois = vec![
        RoiSpec { rect: boxes[0], label: 0 },
        RoiSpec { rect: boxes[1], label: 1 },
    ];
    Ok((image, augmented, rois))
}

/// Runs every analytic-vs-finite-difference gradient check on an 8x8
/// two-category scene pair and reports per-component max relative errors.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<MetricsReport> {
    let (orig, aug, rois) = gradcheck_fixture(cfg)?;
    let model = ToyModel::init(child_seed(cfg.seed, MODEL_TAG), cfg.model_config(2));
    let batch = [crate::gradcore::ScenePair {
        original: &orig,
        augmented: &aug,
        rois: &rois,
    }];
    // t = 0 keeps every proposal: the prototype terms stay active and the
    // filtered set cannot flip under the finite-difference nudges
    let hyper = Hyper {
        conf_threshold: 0.0,
        ..cfg.hyper()?
    };
    let mut report = MetricsReport::new(cfg.clone());
    let mut worst = 0.0f64;
    for comp in LossComponent::ALL {
        let check = gradcheck_component(&model, &batch, &hyper, comp, FD_EPS)?;
        worst = worst.max(check.max_rel_err);
        report
            .summary
            .gradcheck
            .insert(comp.name().to_string(), check.max_rel_err);
    }
    report.summary.gradcheck_max_rel_err = Some(worst);
    Ok(report)
}

/// Post-hoc diagnostics for a checkpoint (optionally compared against a
/// second one) over the config's scene set.
pub fn cmd_diagnose(cfg: &RunConfig, model: &ToyModel, other: Option<&ToyModel>) -> Result<(MetricsReport, EvalOutcome)> {
    let scenes = prepare_scenes(cfg);
    let eval = evaluate(model, &scenes, cfg)?;
    let mut report = MetricsReport::new(cfg.clone());
    report.summary.dice_hard = Some(eval.dice_hard);
    report.summary.d_c = eval.d_c.clone();
    report.summary.mean_d_c = eval.mean_d_c;
    if let Some(other) = other {
        let mut acc = 0.0;
        let mut n = 0usize;
        for prepared in &scenes {
            let fa = forward(model, &prepared.scene.raster, &prepared.rois)?;
            let fb = forward(other, &prepared.scene.raster, &prepared.rois)?;
            acc += fa
                .feature
                .data()
                .iter()
                .zip(fb.feature.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            n += fa.feature.data().len();
        }
        report.summary.feature_l1 = Some(acc / n.max(1) as f64);
    }
    Ok((report, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        RunConfig {
            size: 32,
            n_scenes: 2,
            steps: 3,
            eval_plans: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_yields_initial_state_report() {
        let cfg = RunConfig { steps: 0, ..small_cfg() };
        let out = cmd_train(&cfg).unwrap();
        assert!(out.report.steps.is_empty());
        assert!(out.report.summary.dice_hard.is_some());
    }

    #[test]
    fn train_is_bit_deterministic() {
        let cfg = small_cfg();
        let a = cmd_train(&cfg).unwrap();
        let b = cmd_train(&cfg).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.model.flat(), b.model.flat());
    }

    #[test]
    fn loss_components_recombine_at_every_step() {
        let cfg = small_cfg();
        let out = cmd_train(&cfg).unwrap();
        for s in &out.report.steps {
            let recombined = s.sup + cfg.lambda1 * s.att + cfg.lambda2 * (s.exp + s.imp);
            assert!((s.total - recombined).abs() < 1e-9, "step {}", s.step);
        }
    }

    #[test]
    fn augment_replay_is_bit_exact() {
        let cfg = small_cfg();
        let scenes = gen_scenes(9, 1, 32);
        let scene = &scenes[0];
        let (out1, plan) = cmd_augment(&scene.raster, &scene.objects, None, 5, &cfg).unwrap();
        let replayed = AugmentationPlan::from_text(&plan.to_text()).unwrap();
        let (out2, _) = cmd_augment(&scene.raster, &scene.objects, Some(replayed), 999, &cfg).unwrap();
        assert_eq!(out1.data(), out2.data());
    }

    #[test]
    fn gradcheck_report_passes_threshold() {
        let cfg = small_cfg();
        let report = cmd_gradcheck(&cfg).unwrap();
        let worst = report.summary.gradcheck_max_rel_err.unwrap();
        assert!(worst <= 1e-3, "max rel err {worst:.3e}");
        assert_eq!(report.summary.gradcheck.len(), LossComponent::ALL.len());
        // JSON round-trip
        let parsed = MetricsReport::from_json(&report.to_json()).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn diagnose_identical_checkpoints_zero_distance() {
        let cfg = small_cfg();
        let out = cmd_train(&cfg).unwrap();
        let (report, _) = cmd_diagnose(&cfg, &out.model, Some(&out.model)).unwrap();
        assert_eq!(report.summary.feature_l1, Some(0.0));
    }
}
