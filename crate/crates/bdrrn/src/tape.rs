//! Reverse-mode automatic differentiation over a topologically ordered tape.
//!
//! Ops push nodes onto the tape in execution order; `backward` walks the
//! tape in reverse, applying each op's chain rule. Exactly the operators
//! the network needs are provided, nothing more.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv3x3 { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    ConcatChannels { a: Var, b: Var },
    /// Batch normalization of a single-channel input. `mean`/`var` are the
    /// statistics used for normalization; `through_stats` marks whether they
    /// were computed from `x` (Train) so gradients flow through them.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: f64,
        var: f64,
        eps: f64,
        through_stats: bool,
    },
    MseLoss { pred: Var, target: Tensor },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Computation tape. Single-use per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::InvalidArgument("variable does not belong to this tape".into()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// 3x3 convolution, stride 1, zero padding 1; spatial dims preserved.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.node(x)?.value.shape();
        let ws = self.node(w)?.value.shape();
        let bs = self.node(b)?.value.shape();
        if ws.h != 3 || ws.w != 3 {
            return Err(Error::shape("conv3x3 weight", "kx3x3 kernel", format!("{}", ws)));
        }
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv3x3 input channels",
                format!("{}", ws.c),
                format!("{}", xs.c),
            ));
        }
        if bs.len() != ws.n {
            return Err(Error::shape(
                "conv3x3 bias",
                format!("{} elements", ws.n),
                format!("{}", bs.len()),
            ));
        }
        let out = conv3x3_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        Ok(self.push(out, Op::Conv3x3 { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let mut out = xv.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(self.push(out, Op::Relu { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa != sb {
            return Err(Error::shape("add", format!("{}", sa), format!("{}", sb)));
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/spatial {}x{}x{}", sa.n, sa.h, sa.w),
                format!("{}x{}x{}", sb.n, sb.h, sb.w),
            ));
        }
        let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let plane = sa.h * sa.w;
        let mut data = Vec::with_capacity(os.len());
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        for n in 0..sa.n {
            data.extend_from_slice(&da[n * sa.c * plane..(n + 1) * sa.c * plane]);
            data.extend_from_slice(&db[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        let out = Tensor::new(os, data)?;
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// Train-mode batch norm over (n, h, w) of a single-channel input.
    /// Returns the output plus the batch statistics for running-stat updates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, f64, f64)> {
        let xs = self.node(x)?.value.shape();
        if xs.c != 1 {
            return Err(Error::shape("batchnorm input", "single channel", format!("{}", xs)));
        }
        let data = self.nodes[x.0].value.data();
        let m = data.len() as f64;
        let mean = data.iter().sum::<f64>() / m;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let out = bn_apply(
            &self.nodes[x.0].value,
            self.nodes[gamma.0].value.data()[0],
            self.nodes[beta.0].value.data()[0],
            mean,
            var,
            eps,
        );
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                through_stats: true,
            },
        );
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: f64, var: f64, eps: f64) -> Result<Var> {
        let xs = self.node(x)?.value.shape();
        if xs.c != 1 {
            return Err(Error::shape("batchnorm input", "single channel", format!("{}", xs)));
        }
        let out = bn_apply(
            &self.nodes[x.0].value,
            self.nodes[gamma.0].value.data()[0],
            self.nodes[beta.0].value.data()[0],
            mean,
            var,
            eps,
        );
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                through_stats: false,
            },
        ))
    }

    /// Mean squared error against a constant target (no gradient to target).
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let ps = self.node(pred)?.value.shape();
        if ps != target.shape() {
            return Err(Error::shape("mse_loss", format!("{}", ps), format!("{}", target.shape())));
        }
        let sum: f64 = self.nodes[pred.0]
            .value
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let loss = Tensor::scalar(sum / ps.len() as f64);
        Ok(self.push(
            loss,
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.node(x)?.value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }))
    }

    /// Reverse pass from a scalar node; accumulates into node gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.node(loss)?.value.shape();
        if ls.len() != 1 {
            return Err(Error::shape("backward target", "scalar", format!("{}", ls)));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = adj[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut adj)?;
            adj[i] = Some(gout);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            let Some(a) = a else { continue };
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
            for (g, d) in grad.iter_mut().zip(&a) {
                *g += d;
            }
        }
        Ok(())
    }

    fn seed_adj(&self, adj: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        let a = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        for (g, d) in a.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&self, i: usize, gout: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv3x3 { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (gx, gw, gb) =
                    conv3x3_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, gout);
                self.seed_adj(adj, x, &gx);
                self.seed_adj(adj, w, &gw);
                self.seed_adj(adj, b, &gb);
            }
            Op::Relu { x } => {
                let x = *x;
                let gin: Vec<f64> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.seed_adj(adj, x, &gin);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.seed_adj(adj, a, gout);
                self.seed_adj(adj, b, gout);
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let plane = sa.h * sa.w;
                let mut ga = vec![0.0; sa.len()];
                let mut gb = vec![0.0; sb.len()];
                let stride = (sa.c + sb.c) * plane;
                for n in 0..sa.n {
                    ga[n * sa.c * plane..(n + 1) * sa.c * plane]
                        .copy_from_slice(&gout[n * stride..n * stride + sa.c * plane]);
                    gb[n * sb.c * plane..(n + 1) * sb.c * plane]
                        .copy_from_slice(&gout[n * stride + sa.c * plane..(n + 1) * stride]);
                }
                self.seed_adj(adj, a, &ga);
                self.seed_adj(adj, b, &gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                through_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, var, eps, through) = (*mean, *var, *eps, *through_stats);
                let s = (var + eps).sqrt();
                let g = self.nodes[gamma.0].value.data()[0];
                let xd = self.nodes[x.0].value.data();
                let m = xd.len() as f64;
                let mut dgamma = 0.0;
                let mut dbeta = 0.0;
                for (xi, go) in xd.iter().zip(gout) {
                    dgamma += go * (xi - mean) / s;
                    dbeta += go;
                }
                let gin: Vec<f64> = if through {
                    let mean_dy: f64 = gout.iter().sum::<f64>() / m;
                    let mean_dy_xhat: f64 = xd
                        .iter()
                        .zip(gout)
                        .map(|(xi, go)| go * (xi - mean) / s)
                        .sum::<f64>()
                        / m;
                    xd.iter()
                        .zip(gout)
                        .map(|(xi, go)| {
                            let xhat = (xi - mean) / s;
                            g / s * (go - mean_dy - xhat * mean_dy_xhat)
                        })
                        .collect()
                } else {
                    gout.iter().map(|go| go * g / s).collect()
                };
                self.seed_adj(adj, x, &gin);
                self.seed_adj(adj, gamma, &[dgamma]);
                self.seed_adj(adj, beta, &[dbeta]);
            }
            Op::MseLoss { pred, target } => {
                let pred = *pred;
                let scale = 2.0 * gout[0] / target.len() as f64;
                let gin: Vec<f64> = self.nodes[pred.0]
                    .value
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.seed_adj(adj, pred, &gin);
            }
            Op::Sum { x } => {
                let x = *x;
                let gin = vec![gout[0]; self.nodes[x.0].value.len()];
                self.seed_adj(adj, x, &gin);
            }
        }
        Ok(())
    }
}

fn bn_apply(x: &Tensor, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Tensor {
    let s = (var + eps).sqrt();
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (*v - mean) / s * gamma + beta;
    }
    out
}

fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let xs = x.shape();
    let (h, wd) = (xs.h, xs.w);
    let cout = w.shape().n;
    let cin = xs.c;
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, h, wd));
    let plane = h * wd;
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for n in 0..xs.n {
        for co in 0..cout {
            let obase = (n * cout + co) * plane;
            od[obase..obase + plane].fill(bd[co]);
            for ci in 0..cin {
                let ibase = (n * cin + ci) * plane;
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = wdta[wbase + ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_shifted(
                            &mut od[obase..obase + plane],
                            &xd[ibase..ibase + plane],
                            h,
                            wd,
                            ky as isize - 1,
                            kx as isize - 1,
                            wv,
                        );
                    }
                }
            }
        }
    }
    out
}

/// out[y][x] += wv * src[y+dy][x+dx], zero outside bounds.
fn accumulate_shifted(out: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    for y in 0..h as isize {
        let sy = y + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let (x0, x1) = clip_range(w, dx);
        let orow = y as usize * w;
        let srow = sy as usize * w;
        let sx0 = (x0 as isize + dx) as usize;
        let out_row = &mut out[orow + x0..orow + x1];
        let src_row = &src[srow + sx0..srow + sx0 + (x1 - x0)];
        for (o, s) in out_row.iter_mut().zip(src_row) {
            *o += wv * s;
        }
    }
}

fn clip_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = if dx < 0 { (-dx) as usize } else { 0 };
    let x1 = if dx > 0 { w - dx as usize } else { w };
    (x0, x1)
}

fn conv3x3_backward(x: &Tensor, w: &Tensor, gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let (h, wd) = (xs.h, xs.w);
    let cout = w.shape().n;
    let cin = xs.c;
    let plane = h * wd;
    let xd = x.data();
    let wdta = w.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdta.len()];
    let mut gb = vec![0.0; cout];
    for n in 0..xs.n {
        for co in 0..cout {
            let obase = (n * cout + co) * plane;
            let gslice = &gout[obase..obase + plane];
            gb[co] += gslice.iter().sum::<f64>();
            for ci in 0..cin {
                let ibase = (n * cin + ci) * plane;
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        // dL/dx: transposed shift of the output gradient.
                        let wv = wdta[wbase + ky * 3 + kx];
                        if wv != 0.0 {
                            accumulate_shifted(&mut gx[ibase..ibase + plane], gslice, h, wd, -dy, -dx, wv);
                        }
                        // dL/dw: correlation of input with output gradient.
                        let mut acc = 0.0;
                        for y in 0..h as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let (x0, x1) = clip_range(wd, dx);
                            let orow = y as usize * wd;
                            let srow = sy as usize * wd;
                            let sx0 = (x0 as isize + dx) as usize;
                            let grow = &gslice[orow + x0..orow + x1];
                            let xrow = &xd[ibase + srow + sx0..ibase + srow + sx0 + (x1 - x0)];
                            for (g, xv) in grow.iter().zip(xrow) {
                                acc += g * xv;
                            }
                        }
                        gw[wbase + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
