//! Minibatched MSE training of the residual, with the final-layer
//! learning-rate split, deterministic shuffling, logging, and checkpoints.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{EvalFrame, PatchPair};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{checkpoint, mask_to_tensor, plane_to_tensor, tensor_to_plane, Model, Variant};
use crate::optim::Adam;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    /// Hard step cap for desk-scale runs; epochs bound the run otherwise.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            batch_size: 256,
            epochs: 150,
            seed: 0,
            eval_every: None,
            checkpoint_path: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidArgument("base_lr must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub psnr_decoded: f64,
    pub psnr_enhanced: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<(usize, f64)>,
    pub evals: Vec<EvalRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:.12e}\n", s.step, s.epoch, s.loss));
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("epoch,eval_psnr_decoded,eval_psnr_enhanced\n");
        for e in &self.evals {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                e.epoch, e.psnr_decoded, e.psnr_enhanced
            ));
        }
        out
    }
}

fn batch_tensors(patches: &[PatchPair], indices: &[usize], with_mask: bool) -> (Tensor, Option<Tensor>, Tensor) {
    let side = (patches[indices[0]].decoded.len() as f64).sqrt() as usize;
    let shape = Shape::new(indices.len(), 1, side, side);
    let mut dec = Vec::with_capacity(shape.len());
    let mut orig = Vec::with_capacity(shape.len());
    let mut mask = Vec::with_capacity(if with_mask { shape.len() } else { 0 });
    for &i in indices {
        dec.extend_from_slice(&patches[i].decoded);
        orig.extend_from_slice(&patches[i].original);
        if with_mask {
            mask.extend_from_slice(&patches[i].mask);
        }
    }
    (
        Tensor::new(shape, dec).unwrap(),
        with_mask.then(|| Tensor::new(shape, mask).unwrap()),
        Tensor::new(shape, orig).unwrap(),
    )
}

/// Runs the training loop. Patches are read-only; the model and optimizer
/// state are the only mutable pieces.
pub fn train(
    model: &mut Model,
    patches: &[PatchPair],
    cfg: &TrainConfig,
    eval_set: Option<&[EvalFrame]>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    if cfg.batch_size > patches.len() {
        return Err(Error::Training(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            patches.len()
        )));
    }
    let with_mask = model.config.variant == Variant::Bdrrn;
    let mut adam = Adam::new(cfg.base_lr);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut indices: Vec<usize> = (0..patches.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        indices.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        // Drop-last keeps per-epoch step counts stable.
        for chunk in indices.chunks_exact(cfg.batch_size) {
            let (dec, mask, target) = batch_tensors(patches, chunk, with_mask);
            let (mut tape, trace) = model.forward_train(&dec, mask.as_ref())?;
            let loss_var = tape.mse_loss(trace.output, &target)?;
            let loss = tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at step {step} (epoch {epoch})"
                )));
            }
            model.zero_grads();
            tape.backward(loss_var)?;
            model.accumulate_grads(&tape, &trace)?;
            adam.step(&mut model.params)?;
            log.steps.push(StepRecord { step, epoch, loss });
            epoch_losses.push(loss);
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                log.epoch_seconds.push(t0.elapsed().as_secs_f64());
                record_epoch(&mut log, epoch, &epoch_losses);
                break 'epochs;
            }
        }
        log.epoch_seconds.push(t0.elapsed().as_secs_f64());
        record_epoch(&mut log, epoch, &epoch_losses);

        let due = cfg.eval_every.is_some_and(|n| n > 0 && (epoch + 1) % n == 0);
        if due {
            if let Some(frames) = eval_set {
                let rows = evaluate(model, frames)?;
                let (pd, pe) = mean_eval(&rows);
                log.evals.push(EvalRecord {
                    epoch,
                    psnr_decoded: pd,
                    psnr_enhanced: pe,
                });
            }
            if let Some(path) = &cfg.checkpoint_path {
                checkpoint::save_checkpoint(model, path)?;
            }
        }
    }

    if let Some(frames) = eval_set {
        let rows = evaluate(model, frames)?;
        let (pd, pe) = mean_eval(&rows);
        log.evals.push(EvalRecord {
            epoch: cfg.epochs - 1,
            psnr_decoded: pd,
            psnr_enhanced: pe,
        });
    }
    if let Some(path) = &cfg.checkpoint_path {
        checkpoint::save_checkpoint(model, path)?;
    }
    Ok(log)
}

fn record_epoch(log: &mut TrainLog, epoch: usize, losses: &[f64]) {
    if !losses.is_empty() {
        log.epoch_mean_loss
            .push((epoch, losses.iter().sum::<f64>() / losses.len() as f64));
    }
}

fn mean_eval(rows: &[FrameEval]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|r| r.psnr_decoded).sum::<f64>() / n,
        rows.iter().map(|r| r.psnr_enhanced).sum::<f64>() / n,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEval {
    pub psnr_decoded: f64,
    pub psnr_enhanced: f64,
    pub delta_db: f64,
}

/// Whole-frame eval-mode inference: per frame, PSNR of decoded and enhanced
/// against the original. Enhanced output is rounded and clamped to 8-bit
/// before PSNR.
pub fn evaluate(model: &Model, frames: &[EvalFrame]) -> Result<Vec<FrameEval>> {
    let mut rows = Vec::with_capacity(frames.len());
    for frame in frames {
        let enhanced = enhance_frame(model, frame)?;
        let pd = psnr(&frame.original, &frame.decoded)?;
        let pe = psnr(&frame.original, &enhanced)?;
        rows.push(FrameEval {
            psnr_decoded: pd,
            psnr_enhanced: pe,
            delta_db: pe - pd,
        });
    }
    Ok(rows)
}

/// Runs one whole frame through the network in Eval mode, de-normalizing
/// back to an 8-bit plane.
pub fn enhance_frame(model: &Model, frame: &EvalFrame) -> Result<crate::plane::Plane8> {
    let dec = plane_to_tensor(&frame.decoded);
    let mask = (model.config.variant == Variant::Bdrrn).then(|| mask_to_tensor(&frame.mask));
    let out = model.forward_eval(&dec, mask.as_ref())?;
    tensor_to_plane(&out)
}
