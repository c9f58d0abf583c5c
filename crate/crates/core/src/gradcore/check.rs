//! Central finite differences and per-component gradient checks.

use super::model::{ParamNodes, ToyModel};
use super::objective::{build_total_loss, Hyper, ScenePair, TrainAttentionMode};
use super::tape::{NodeId, Tape};
use super::GradError;

pub type Result<T> = std::result::Result<T, GradError>;

/// Default step for central differences.
pub const FD_EPS: f64 = 1e-4;

/// Coordinates where both gradients are below this magnitude are skipped by
/// [`max_rel_err`].
pub const GRAD_FLOOR: f64 = 1e-6;

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per
/// coordinate.
pub fn finite_diff(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        theta[i] = params[i] + eps;
        let hi = f(&theta)?;
        theta[i] = params[i] - eps;
        let lo = f(&theta)?;
        theta[i] = params[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(GradError::NonFiniteLoss(if hi.is_finite() { lo } else { hi }));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Max of `|a - n| / max(|a|, |n|)` over coordinates whose larger magnitude
/// exceeds `floor`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale > floor {
                (a - n).abs() / scale
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Loss components the gradient check can isolate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Sup,
    AttDiceSoft,
    AttMse,
    Exp,
    Imp,
    Total,
}

impl LossComponent {
    pub const ALL: [LossComponent; 6] = [
        LossComponent::Sup,
        LossComponent::AttDiceSoft,
        LossComponent::AttMse,
        LossComponent::Exp,
        LossComponent::Imp,
        LossComponent::Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossComponent::Sup => "sup",
            LossComponent::AttDiceSoft => "att_dice_soft",
            LossComponent::AttMse => "att_mse",
            LossComponent::Exp => "exp",
            LossComponent::Imp => "imp",
            LossComponent::Total => "total",
        }
    }

    fn hyper(&self, base: &Hyper) -> Hyper {
        match self {
            LossComponent::AttMse => Hyper {
                att_mode: TrainAttentionMode::Mse,
                ..*base
            },
            _ => *base,
        }
    }
}

fn component_node(tape: &mut Tape, model: &ToyModel, batch: &[ScenePair], hyper: &Hyper, comp: LossComponent) -> Result<(ParamNodes, NodeId)> {
    let params = model.push_params(tape);
    let nodes = build_total_loss(tape, &params, batch, &comp.hyper(hyper))?;
    let id = match comp {
        LossComponent::Sup => nodes.losses.sup,
        LossComponent::AttDiceSoft | LossComponent::AttMse => nodes.losses.att,
        LossComponent::Exp => nodes.losses.exp,
        LossComponent::Imp => nodes.losses.imp,
        LossComponent::Total => nodes.losses.total,
    };
    Ok((params, id))
}

/// Result of one component check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub component: LossComponent,
    pub max_rel_err: f64,
    pub value: f64,
}

/// Compares the tape gradient of one loss component against central finite
/// differences over the full flat parameter vector.
pub fn gradcheck_component(
    model: &ToyModel,
    batch: &[ScenePair],
    hyper: &Hyper,
    comp: LossComponent,
    eps: f64,
) -> Result<GradCheck> {
    let flat = model.flat();

    let mut tape = Tape::new();
    let (params, loss) = component_node(&mut tape, model, batch, hyper, comp)?;
    let value = tape.scalar_value(loss);
    tape.backward(loss)?;
    let analytic = params.gradient(&tape);

    let numeric = finite_diff(
        |theta| {
            let m = model.with_flat(theta);
            let mut t = Tape::new();
            let (_, l) = component_node(&mut t, &m, batch, hyper, comp)?;
            Ok(t.scalar_value(l))
        },
        &flat,
        eps,
    )?;

    Ok(GradCheck {
        component: comp,
        max_rel_err: max_rel_err(&analytic, &numeric, GRAD_FLOOR),
        value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::model::{ModelConfig, RoiSpec};
    use crate::raster::{BoxRect, Raster};

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff(|t| Ok(t[0] * t[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rel_err_ignores_tiny_coordinates() {
        let e = max_rel_err(&[1e-9, 1.0], &[5e-9, 1.001], 1e-6);
        assert!((e - 0.001 / 1.001).abs() < 1e-6);
    }

    fn check_batch() -> (Raster, Raster, Vec<RoiSpec>) {
        // 8x8 scene with 2 categories
        let orig = Raster::from_fn(8, 8, |y, x, c| ((y * 5 + x * 3 + c) % 11) as f64 / 11.0);
        let aug = Raster::from_fn(8, 8, |y, x, c| ((y * 3 + x * 7 + 2 * c) % 13) as f64 / 13.0);
        let rois = vec![
            RoiSpec { rect: BoxRect::new(0, 0, 4, 4), label: 0 },
            RoiSpec { rect: BoxRect::new(4, 4, 8, 8), label: 1 },
        ];
        (orig, aug, rois)
    }

    #[test]
    fn all_components_match_finite_differences() {
        let config = ModelConfig { n_categories: 2, ..ModelConfig::default() };
        let model = ToyModel::init(21, config);
        let (orig, aug, rois) = check_batch();
        let batch = [ScenePair { original: &orig, augmented: &aug, rois: &rois }];
        // t = 0 keeps every proposal, so the prototype terms are active and
        // the filtered set is stable under the FD nudges
        let hyper = Hyper { conf_threshold: 0.0, ..Hyper::default() };
        for comp in LossComponent::ALL {
            let check = gradcheck_component(&model, &batch, &hyper, comp, FD_EPS).unwrap();
            assert!(
                check.max_rel_err <= 1e-3,
                "{}: rel err {:.3e}",
                comp.name(),
                check.max_rel_err
            );
        }
    }
}
