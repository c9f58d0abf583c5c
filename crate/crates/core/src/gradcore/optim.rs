//! Classical SGD with momentum: `v <- mu v - lr g`, `theta <- theta + v`.

use super::model::ToyModel;
use super::objective::{build_total_loss, Hyper, LossBreakdown, ScenePair};
use super::tape::Tape;
use super::GradError;

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, n_params: usize) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(GradError::BadLearningRate(lr));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: vec![0.0; n_params],
        })
    }

    /// Applies one update in place. Non-finite gradients abort the step and
    /// leave the parameters untouched.
    pub fn step(&mut self, model: &mut ToyModel, grad: &[f64]) -> Result<()> {
        assert_eq!(grad.len(), self.velocity.len(), "gradient length");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(GradError::NonFiniteGradient);
        }
        let mut flat = model.flat();
        for ((v, &g), theta) in self.velocity.iter_mut().zip(grad).zip(&mut flat) {
            *v = self.momentum * *v - self.lr * g;
            *theta += *v;
        }
        model.set_flat(&flat);
        Ok(())
    }
}

/// One full optimization step over a batch: forward, backward, update.
/// Returns the pre-update loss breakdown.
pub fn train_step(
    model: &mut ToyModel,
    opt: &mut SgdMomentum,
    batch: &[ScenePair],
    hyper: &Hyper,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = model.push_params(&mut tape);
    let nodes = build_total_loss(&mut tape, &params, batch, hyper)?;
    let breakdown = nodes.breakdown(&tape);
    tape.backward(nodes.losses.total)?;
    let grad = params.gradient(&tape);
    opt.step(model, &grad)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::model::ModelConfig;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut model = ToyModel::init(1, ModelConfig::default());
        let before = model.flat();
        let mut opt = SgdMomentum::new(0.1, 0.9, model.n_params()).unwrap();
        opt.step(&mut model, &vec![0.0; before.len()]).unwrap();
        assert_eq!(model.flat(), before);
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let mut model = ToyModel::init(2, ModelConfig::default());
        let before = model.flat();
        let grad: Vec<f64> = (0..before.len()).map(|i| (i % 5) as f64 / 10.0).collect();
        let mut opt = SgdMomentum::new(0.01, 0.0, before.len()).unwrap();
        opt.step(&mut model, &grad).unwrap();
        for ((b, g), a) in before.iter().zip(&grad).zip(model.flat()) {
            assert!((a - (b - 0.01 * g)).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_matches_scalar_recursion() {
        // two steps on f(theta) = theta^2 with mu = 0.9
        let (lr, mu) = (0.1, 0.9);
        let mut theta = 3.0f64;
        let mut v = 0.0f64;
        let mut hand = Vec::new();
        for _ in 0..2 {
            let g = 2.0 * theta;
            v = mu * v - lr * g;
            theta += v;
            hand.push(theta);
        }

        let mut model = ToyModel::init(0, ModelConfig::default());
        let mut flat = vec![0.0; model.n_params()];
        flat[0] = 3.0;
        model.set_flat(&flat);
        let mut opt = SgdMomentum::new(lr, mu, flat.len()).unwrap();
        for want in hand {
            let mut grad = vec![0.0; flat.len()];
            grad[0] = 2.0 * model.flat()[0];
            opt.step(&mut model, &grad).unwrap();
            assert!((model.flat()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut model = ToyModel::init(3, ModelConfig::default());
        let before = model.flat();
        let mut grad = vec![0.0; before.len()];
        grad[7] = f64::NAN;
        let mut opt = SgdMomentum::new(0.1, 0.9, before.len()).unwrap();
        assert!(matches!(opt.step(&mut model, &grad), Err(GradError::NonFiniteGradient)));
        assert_eq!(model.flat(), before);
    }

    #[test]
    fn bad_learning_rate_is_rejected() {
        assert!(matches!(SgdMomentum::new(0.0, 0.9, 4), Err(GradError::BadLearningRate(_))));
        assert!(matches!(SgdMomentum::new(-0.1, 0.9, 4), Err(GradError::BadLearningRate(_))));
    }
}
