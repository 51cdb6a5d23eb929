//! Central-finite-difference verification of the analytic gradients over a
//! full model graph. The finite-difference path never touches the tape's
//! backward code, so the two routes stay independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub elements_checked: usize,
}

fn loss_of(model: &Model, decoded: &Tensor, mask: Option<&Tensor>, target: &Tensor) -> Result<f64> {
    let mut m = model.clone_for_eval();
    let (mut tape, trace) = m.forward_train(decoded, mask)?;
    let loss = tape.mse_loss(trace.output, target)?;
    Ok(tape.value(loss).data()[0])
}

impl Model {
    /// Clone with fresh (non-shared) state, for perturb-and-reevaluate runs.
    pub fn clone_for_eval(&self) -> Model {
        let mut m = Model::build(self.config, 0).expect("config already validated");
        for (name, p) in self.params.iter() {
            let q = m.params.get_mut(name).unwrap();
            q.value = p.value.clone();
            q.value.requires_grad = true;
            q.lr_scale = p.lr_scale;
        }
        m.bn = self.bn.clone();
        m
    }
}

/// Checks every parameter of a model against central differences on a
/// random input/mask/target triple.
pub fn gradcheck(cfg: ModelConfig, seed: u64, height: usize, width: usize) -> Result<GradCheckReport> {
    let mut model = Model::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b9));
    // Jitter every parameter. The zero-initialized recon layer would
    // otherwise mute all upstream gradients, and zero biases let ReLU
    // inputs land exactly on the kink (a fully negative receptive field
    // convolves to exactly 0), where central differences and the analytic
    // derivative legitimately disagree.
    for (_, p) in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let shape = Shape::new(1, 1, height, width);
    let mut rand_tensor = |lo: f64, hi: f64| {
        Tensor::new(shape, (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };
    let decoded = rand_tensor(0.0, 1.0);
    let target = rand_tensor(0.0, 1.0);
    let mask_t = rand_tensor(0.0, 1.0);
    let mask = (cfg.variant == Variant::Bdrrn).then_some(&mask_t);

    // Analytic gradients.
    let mut m = model.clone_for_eval();
    let (mut tape, trace) = m.forward_train(&decoded, mask)?;
    let loss = tape.mse_loss(trace.output, &target)?;
    tape.backward(loss)?;
    m.accumulate_grads(&tape, &trace)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        params_checked: 0,
        elements_checked: 0,
    };
    let names: Vec<String> = m.params.names().map(|s| s.to_string()).collect();
    for name in names {
        report.params_checked += 1;
        let analytic = m.params.get(&name).unwrap().value.grad.clone().unwrap();
        for i in 0..analytic.len() {
            let central = |h: f64| -> Result<f64> {
                let mut plus = model.clone_for_eval();
                plus.params.get_mut(&name).unwrap().value.data_mut()[i] += h;
                let mut minus = model.clone_for_eval();
                minus.params.get_mut(&name).unwrap().value.data_mut()[i] -= h;
                Ok((loss_of(&plus, &decoded, mask, &target)?
                    - loss_of(&minus, &decoded, mask, &target)?)
                    / (2.0 * h))
            };
            let a = analytic[i];
            // Scale floor keeps rounding noise on near-zero gradients from
            // dominating the relative measure.
            let rel_at = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            let mut rel = rel_at(central(FD_STEP)?);
            // A large mismatch is retried with smaller steps: a ReLU kink
            // inside the stencil stops being crossed as h shrinks, while a
            // wrong analytic gradient keeps disagreeing at every h.
            let mut h = FD_STEP;
            while rel > 1e-5 && h > FD_STEP / 1e3 {
                h /= 10.0;
                rel = rel.min(rel_at(central(h)?));
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
            report.elements_checked += 1;
        }
    }
    Ok(report)
}
