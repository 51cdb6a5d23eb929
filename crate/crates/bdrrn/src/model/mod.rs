//! DRRN / B-DRRN model: named-parameter registry plus variant wiring.
//! Weight sharing is literal identity of registry entries; every use site
//! of a shared layer references the same entry by name.

pub mod checkpoint;
pub mod wiring;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::{Parameter, ParamRegistry};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use wiring::{lookup_wiring, ParamInit, Wiring};

pub const BN_EPS: f64 = 1e-5;
/// Running-stat EMA: new = RUNNING_DECAY * old + (1 - RUNNING_DECAY) * batch.
pub const RUNNING_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Drrn,
    Bdrrn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub main_iters: usize,
    pub extra_iters: usize,
    pub merge_iters: usize,
    /// Branch-combination operator; meaningful for B-DRRN only.
    pub fusion: Fusion,
}

impl ModelConfig {
    pub fn drrn() -> Self {
        ModelConfig {
            variant: Variant::Drrn,
            channels: 64,
            main_iters: 9,
            extra_iters: 3,
            merge_iters: 2,
            fusion: Fusion::Add,
        }
    }

    pub fn bdrrn(fusion: Fusion) -> Self {
        ModelConfig {
            variant: Variant::Bdrrn,
            fusion,
            ..Self::drrn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::InvalidArgument("channels must be >= 1".into()));
        }
        if self.main_iters < 1 || self.extra_iters < 1 || self.merge_iters < 1 {
            return Err(Error::InvalidArgument("iteration counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Non-fatal deviations from the reference depth ratio (extra branch at
    /// one third of the main branch).
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.variant == Variant::Bdrrn && self.extra_iters * 3 != self.main_iters {
            out.push(format!(
                "extra_iters * 3 != main_iters ({} * 3 != {}); extra branch depth is not 1/3 of the main branch",
                self.extra_iters, self.main_iters
            ));
        }
        out
    }

    pub fn variant_name(&self) -> &'static str {
        match (self.variant, self.fusion) {
            (Variant::Drrn, _) => "drrn",
            (Variant::Bdrrn, Fusion::Add) => "bdrrn-add",
            (Variant::Bdrrn, Fusion::Concat) => "bdrrn-concat",
        }
    }
}

/// Shared batch-norm running statistics (one track, used by both the
/// decoded-frame and mask inputs, mirroring the shared gamma/beta).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: f64,
    pub running_var: f64,
    pub initialized: bool,
}

impl Default for BnState {
    fn default() -> Self {
        BnState {
            running_mean: 0.0,
            running_var: 1.0,
            initialized: false,
        }
    }
}

impl BnState {
    pub fn update(&mut self, batch_mean: f64, batch_var: f64) {
        self.running_mean = RUNNING_DECAY * self.running_mean + (1.0 - RUNNING_DECAY) * batch_mean;
        self.running_var = RUNNING_DECAY * self.running_var + (1.0 - RUNNING_DECAY) * batch_var;
        self.initialized = true;
    }
}

/// Output of a traced forward pass; lets callers harvest parameter
/// gradients after `Tape::backward`.
pub struct ForwardTrace {
    pub output: Var,
    pub param_vars: BTreeMap<String, Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamRegistry,
    pub bn: BnState,
    wiring: Box<dyn Wiring>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .field("bn", &self.bn)
            .finish()
    }
}

impl Model {
    /// Deterministic He-style initialization. Each parameter draws from its
    /// own stream keyed by (seed, name), so variants sharing a name share
    /// its initial values.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let wiring = lookup_wiring(config.variant_name())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {}", config.variant_name())))?;
        let mut params = ParamRegistry::new();
        for spec in wiring.param_specs(&config) {
            let tensor = match spec.init {
                ParamInit::Zero => Tensor::zeros(spec.shape),
                ParamInit::One => Tensor::full(spec.shape, 1.0),
                ParamInit::HeConv { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.name));
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    let data = (0..spec.shape.len()).map(|_| dist.sample(&mut rng)).collect();
                    Tensor::new(spec.shape, data)?
                }
            };
            params.insert(&spec.name, Parameter::new(tensor, spec.lr_scale));
        }
        Ok(Model {
            config,
            params,
            bn: BnState::default(),
            wiring,
        })
    }

    /// Learnable parameter count; registry entries are counted exactly once,
    /// so cross-branch sharing never inflates the total. Running statistics
    /// and optimizer state are excluded.
    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    fn check_inputs(&self, decoded: &Tensor, mask: Option<&Tensor>) -> Result<()> {
        let ds = decoded.shape();
        if ds.c != 1 {
            return Err(Error::shape("forward input", "single channel", format!("{ds}")));
        }
        match (self.config.variant, mask) {
            (Variant::Bdrrn, None) => Err(Error::InvalidArgument(
                "B-DRRN requires a mean-mask input".into(),
            )),
            (Variant::Drrn, Some(_)) => Err(Error::InvalidArgument(
                "DRRN takes no mask input".into(),
            )),
            (_, Some(m)) if m.shape() != ds => Err(Error::shape(
                "mask input",
                format!("{ds}"),
                format!("{}", m.shape()),
            )),
            _ => Ok(()),
        }
    }

    /// Training-mode forward pass. Updates batch-norm running statistics and
    /// returns the tape plus a trace for gradient harvesting.
    pub fn forward_train(&mut self, decoded: &Tensor, mask: Option<&Tensor>) -> Result<(Tape, ForwardTrace)> {
        self.check_inputs(decoded, mask)?;
        let mut tape = Tape::new();
        let (trace, batch_stats) = self.run_wiring(&mut tape, decoded, mask, Mode::Train)?;
        for (mean, var) in batch_stats {
            self.bn.update(mean, var);
        }
        Ok((tape, trace))
    }

    /// Eval-mode forward pass: pure, uses frozen running statistics.
    pub fn forward_eval(&self, decoded: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (tape, trace) = self.forward_eval_traced(decoded, mask)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Eval-mode forward that also exposes the tape, for gradient checking.
    pub fn forward_eval_traced(&self, decoded: &Tensor, mask: Option<&Tensor>) -> Result<(Tape, ForwardTrace)> {
        self.check_inputs(decoded, mask)?;
        if !self.bn.initialized {
            return Err(Error::BatchNormUninitialized);
        }
        let mut tape = Tape::new();
        let (trace, _) = self.run_wiring(&mut tape, decoded, mask, Mode::Eval)?;
        Ok((tape, trace))
    }

    /// Forward with explicit mode, mirroring the variant's contract.
    pub fn forward(&mut self, decoded: &Tensor, mask: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (tape, trace) = self.forward_train(decoded, mask)?;
                Ok(tape.value(trace.output).clone())
            }
            Mode::Eval => self.forward_eval(decoded, mask),
        }
    }

    fn run_wiring(
        &self,
        tape: &mut Tape,
        decoded: &Tensor,
        mask: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(ForwardTrace, Vec<(f64, f64)>)> {
        let mut param_vars = BTreeMap::new();
        for (name, p) in self.params.iter() {
            param_vars.insert(name.to_string(), tape.leaf(p.value.clone()));
        }
        let decoded_var = tape.leaf(decoded.clone());
        let mask_var = mask.map(|m| tape.leaf(m.clone()));
        let mut ctx = wiring::WireCtx {
            tape,
            params: &param_vars,
            cfg: &self.config,
            decoded: decoded_var,
            mask: mask_var,
            mode,
            running: (self.bn.running_mean, self.bn.running_var),
            batch_stats: Vec::new(),
        };
        let output = self.wiring.wire(&mut ctx)?;
        let batch_stats = ctx.batch_stats;
        debug_assert!(tape.value(output).all_finite());
        Ok((
            ForwardTrace {
                output,
                param_vars,
            },
            batch_stats,
        ))
    }

    /// Adds the tape's parameter gradients into the registry's grad slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, trace: &ForwardTrace) -> Result<()> {
        for (name, var) in &trace.param_vars {
            let grad = tape
                .grad(*var)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?
                .to_vec();
            self.params
                .get_mut(name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?
                .value
                .accumulate_grad(&grad)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Converts an 8-bit plane to a normalized 1x1xHxW tensor.
pub fn plane_to_tensor(plane: &crate::plane::Plane8) -> Tensor {
    Tensor::new(
        Shape::new(1, 1, plane.height, plane.width),
        plane.pixels.iter().map(|p| *p as f64 / 255.0).collect(),
    )
    .expect("plane pixel count matches its dimensions")
}

/// Converts a mean mask to a 1x1xHxW tensor (already normalized).
pub fn mask_to_tensor(mask: &crate::mask::MeanMask) -> Tensor {
    Tensor::new(
        Shape::new(1, 1, mask.height, mask.width),
        mask.values.clone(),
    )
    .expect("mask value count matches its dimensions")
}

/// De-normalizes a 1x1xHxW tensor to an 8-bit plane (round then clamp).
pub fn tensor_to_plane(t: &Tensor) -> Result<crate::plane::Plane8> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("tensor_to_plane", "1x1xHxW", format!("{s}")));
    }
    Ok(crate::plane::Plane8 {
        width: s.w,
        height: s.h,
        pixels: t
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect(),
    })
}
