//! Variant wiring strategies behind a common trait, registered by name.
//!
//! Every variant shares the same parameter vocabulary; what differs is the
//! dataflow. `lookup_wiring` resolves the name selected at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Shape;

use super::{Fusion, Mode, ModelConfig, BN_EPS};

#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    Zero,
    One,
    HeConv { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub lr_scale: f64,
    pub init: ParamInit,
}

/// Per-pass wiring context; owns the tape and resolves parameter names to
/// their (single) leaf variables, which is what makes sharing literal.
pub struct WireCtx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a BTreeMap<String, Var>,
    pub cfg: &'a ModelConfig,
    pub decoded: Var,
    pub mask: Option<Var>,
    pub mode: Mode,
    pub running: (f64, f64),
    pub batch_stats: Vec<(f64, f64)>,
}

impl WireCtx<'_> {
    fn p(&self, name: &str) -> Var {
        *self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("wiring referenced unregistered parameter `{name}`"))
    }

    /// Input batch norm; both inputs go through the same gamma/beta entry.
    fn bn(&mut self, x: Var) -> Result<Var> {
        let gamma = self.p("bn.gamma");
        let beta = self.p("bn.beta");
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                self.batch_stats.push((mean, var));
                Ok(y)
            }
            Mode::Eval => self
                .tape
                .batchnorm_eval(x, gamma, beta, self.running.0, self.running.1, BN_EPS),
        }
    }

    fn conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.conv3x3(x, w, b)
    }

    fn pre_act_conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let r = self.tape.relu(x)?;
        self.conv(prefix, r)
    }

    /// One recursive residual iteration anchored on `anchor`, using the
    /// single shared (c1, c2) pair.
    fn rru(&mut self, u: Var, anchor: Var) -> Result<Var> {
        let c1 = self.pre_act_conv("rru.c1", u)?;
        let c2 = self.pre_act_conv("rru.c2", c1)?;
        self.tape.add(anchor, c2)
    }

    /// Embed an input: BN then the shared first conv (no pre-activation on
    /// the BN output).
    fn embed(&mut self, input: Var) -> Result<Var> {
        let a = self.bn(input)?;
        self.conv("conv_in", a)
    }

    fn branch(&mut self, input: Var, iters: usize) -> Result<Var> {
        let x0 = self.embed(input)?;
        let mut u = x0;
        for _ in 0..iters {
            u = self.rru(u, x0)?;
        }
        Ok(u)
    }

    /// Residual reconstruction plus the global skip on the raw input.
    fn reconstruct(&mut self, features: Var, raw_input: Var) -> Result<Var> {
        let residual = self.pre_act_conv("recon", features)?;
        self.tape.add(raw_input, residual)
    }
}

pub trait Wiring: Send + Sync {
    fn name(&self) -> &'static str;
    fn requires_mask(&self) -> bool;
    fn param_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec>;
    fn wire(&self, ctx: &mut WireCtx) -> Result<Var>;
}

fn conv_specs(prefix: &str, cout: usize, cin: usize, lr_scale: f64) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{prefix}.w"),
            shape: Shape::new(cout, cin, 3, 3),
            lr_scale,
            init: ParamInit::HeConv { fan_in: cin * 9 },
        },
        ParamSpec {
            name: format!("{prefix}.b"),
            shape: Shape::new(1, cout, 1, 1),
            lr_scale,
            init: ParamInit::Zero,
        },
    ]
}

fn common_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut specs = vec![
        ParamSpec {
            name: "bn.gamma".into(),
            shape: Shape::new(1, 1, 1, 1),
            lr_scale: 1.0,
            init: ParamInit::One,
        },
        ParamSpec {
            name: "bn.beta".into(),
            shape: Shape::new(1, 1, 1, 1),
            lr_scale: 1.0,
            init: ParamInit::Zero,
        },
    ];
    specs.extend(conv_specs("conv_in", c, 1, 1.0));
    specs.extend(conv_specs("rru.c1", c, c, 1.0));
    specs.extend(conv_specs("rru.c2", c, c, 1.0));
    specs.extend(conv_specs("recon", 1, c, 0.1));
    // Zero-initialized reconstruction makes the fresh network the identity
    // mapping; the global skip then carries the input until training moves
    // the residual away from zero.
    for spec in specs.iter_mut().filter(|s| s.name == "recon.w") {
        spec.init = ParamInit::Zero;
    }
    specs
}

struct DrrnWiring;

impl Wiring for DrrnWiring {
    fn name(&self) -> &'static str {
        "drrn"
    }

    fn requires_mask(&self) -> bool {
        false
    }

    fn param_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        common_specs(cfg)
    }

    fn wire(&self, ctx: &mut WireCtx) -> Result<Var> {
        let u = ctx.branch(ctx.decoded, ctx.cfg.main_iters)?;
        ctx.reconstruct(u, ctx.decoded)
    }
}

struct BdrrnWiring {
    fusion: Fusion,
}

impl Wiring for BdrrnWiring {
    fn name(&self) -> &'static str {
        match self.fusion {
            Fusion::Add => "bdrrn-add",
            Fusion::Concat => "bdrrn-concat",
        }
    }

    fn requires_mask(&self) -> bool {
        true
    }

    fn param_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = common_specs(cfg);
        if self.fusion == Fusion::Concat {
            specs.extend(conv_specs("fuse", cfg.channels, 2 * cfg.channels, 1.0));
        }
        specs
    }

    fn wire(&self, ctx: &mut WireCtx) -> Result<Var> {
        let mask = ctx
            .mask
            .ok_or_else(|| Error::InvalidArgument("B-DRRN requires a mean-mask input".into()))?;
        let u = ctx.branch(ctx.decoded, ctx.cfg.main_iters)?;
        let v = ctx.branch(mask, ctx.cfg.extra_iters)?;
        let fused = match self.fusion {
            Fusion::Add => ctx.tape.add(u, v)?,
            Fusion::Concat => {
                let cat = ctx.tape.concat_channels(u, v)?;
                ctx.pre_act_conv("fuse", cat)?
            }
        };
        let mut w = fused;
        for _ in 0..ctx.cfg.merge_iters {
            w = ctx.rru(w, fused)?;
        }
        ctx.reconstruct(w, ctx.decoded)
    }
}

/// Registered wiring strategies, selectable by name at runtime.
pub fn wiring_names() -> &'static [&'static str] {
    &["drrn", "bdrrn-add", "bdrrn-concat"]
}

pub fn lookup_wiring(name: &str) -> Option<Box<dyn Wiring>> {
    match name {
        "drrn" => Some(Box::new(DrrnWiring)),
        "bdrrn-add" => Some(Box::new(BdrrnWiring { fusion: Fusion::Add })),
        "bdrrn-concat" => Some(Box::new(BdrrnWiring {
            fusion: Fusion::Concat,
        })),
        _ => None,
    }
}
