use super::kernels::{self, ConvGeom};
use super::{accumulate, Node, NodeId, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics;

/// Stabilizer added to the per-channel variance in [`Tape::channel_norm`].
pub const CHANNEL_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dConfig {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl Default for Conv1dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose1dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvTranspose1dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a `[C]` vector applied along axis 1 of `[B, C, L]`.
    Channel,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Relu(NodeId),
    PRelu {
        input: NodeId,
        slope: NodeId,
    },
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    ScalarMul(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    ChannelNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    NarrowChannels {
        input: NodeId,
        start: usize,
    },
    ConcatChannels(Vec<NodeId>),
    FitLength(NodeId),
    GumbelKeep {
        logits: NodeId,
        tau: T,
    },
    BinarizeSte(NodeId),
    PitNegSiSdr {
        estimates: NodeId,
        grad: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::Relu(_) => "relu",
            Op::PRelu { .. } => "prelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::NarrowChannels { .. } => "narrow_channels",
            Op::ConcatChannels(_) => "concat_channels",
            Op::FitLength(_) => "fit_length",
            Op::GumbelKeep { .. } => "gumbel_keep_prob",
            Op::BinarizeSte(_) => "binarize_ste",
            Op::PitNegSiSdr { .. } => "pit_neg_sisdr",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv1d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose1d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::ScalarMul(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::FitLength(a)
            | Op::BinarizeSte(a) => vec![*a],
            Op::PRelu { input, slope } => vec![*input, *slope],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::ChannelNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::NarrowChannels { input, .. } => vec![*input],
            Op::ConcatChannels(v) => v.clone(),
            Op::GumbelKeep { logits, .. } => vec![*logits],
            Op::PitNegSiSdr { estimates, .. } => vec![*estimates],
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        idx: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let val = |id: NodeId| nodes[id.0].value.data();
        let shape = |id: NodeId| nodes[id.0].value.shape();
        let req = |id: NodeId| nodes[id.0].requires_grad;
        let out = nodes[idx].value.data();

        // Elementwise unary helper: grad_in += gout * f(x, y).
        let unary = |a: NodeId, f: &dyn Fn(T, T) -> T, grads: &mut [Option<Vec<T>>]| {
            if req(a) {
                let x = val(a);
                let slot = accumulate(grads, a, x.len());
                for i in 0..x.len() {
                    slot[i] += gout[i] * f(x[i], out[i]);
                }
            }
        };

        match self {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            }
            | Op::ConvTranspose1d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (req(*input), req(*weight), bias.map(req).unwrap_or(false));
                let (gx, gw, gb) = if matches!(self, Op::Conv1d { .. }) {
                    kernels::conv1d_backward(val(*input), val(*weight), gout, geom, need)
                } else {
                    kernels::conv_transpose1d_backward(val(*input), val(*weight), gout, geom, need)
                };
                add_into(grads, *input, gx);
                add_into(grads, *weight, gw);
                if let Some(b) = bias {
                    add_into(grads, *b, gb);
                }
            }
            Op::Relu(a) => unary(*a, &|x, _| if x > T::zero() { T::one() } else { T::zero() }, grads),
            Op::Sigmoid(a) => unary(*a, &|_, y| y * (T::one() - y), grads),
            Op::Log(a) => unary(*a, &|x, _| x.recip(), grads),
            Op::Exp(a) => unary(*a, &|_, y| y, grads),
            Op::Square(a) => unary(*a, &|x, _| x + x, grads),
            Op::Sqrt(a) => unary(*a, &|_, y| (y + y).recip(), grads),
            Op::ScalarMul(a, s) => {
                let s = *s;
                unary(*a, &|_, _| s, grads)
            }
            Op::FitLength(a) => {
                if req(*a) {
                    let ishape = shape(*a);
                    let lin = *ishape.last().unwrap();
                    let lout = *nodes[idx].value.shape().last().unwrap();
                    let rows = val(*a).len() / lin;
                    let keep = lin.min(lout);
                    let slot = accumulate(grads, *a, rows * lin);
                    for r in 0..rows {
                        for t in 0..keep {
                            slot[r * lin + t] += gout[r * lout + t];
                        }
                    }
                }
            }
            Op::PRelu { input, slope } => {
                let x = val(*input);
                let sl = val(*slope);
                let (rows, c, l) = channel_dims(shape(*input));
                let per_channel = sl.len() != 1;
                if req(*input) {
                    let slot = accumulate(grads, *input, x.len());
                    for i in 0..x.len() {
                        let a = if per_channel { sl[(i / l) % c] } else { sl[0] };
                        slot[i] += if x[i] > T::zero() { gout[i] } else { gout[i] * a };
                    }
                }
                if req(*slope) {
                    let slot = accumulate(grads, *slope, sl.len());
                    for i in 0..x.len() {
                        if x[i] <= T::zero() {
                            let k = if per_channel { (i / l) % c } else { 0 };
                            slot[k] += gout[i] * x[i];
                        }
                    }
                }
                let _ = rows;
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(self, Op::Sub(..)) { -T::one() } else { T::one() };
                if req(*a) {
                    let slot = accumulate(grads, *a, gout.len());
                    slot.iter_mut().zip(gout).for_each(|(s, g)| *s += *g);
                }
                if req(*b) {
                    match bc {
                        Broadcast::Same => {
                            let slot = accumulate(grads, *b, gout.len());
                            slot.iter_mut().zip(gout).for_each(|(s, g)| *s += sign * *g);
                        }
                        Broadcast::Channel => {
                            let (_, c, l) = channel_dims(shape(*a));
                            let slot = accumulate(grads, *b, c);
                            for (i, g) in gout.iter().enumerate() {
                                slot[(i / l) % c] += sign * *g;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let x = val(*a);
                let y = val(*b);
                match bc {
                    Broadcast::Same => {
                        if req(*a) {
                            let slot = accumulate(grads, *a, x.len());
                            for i in 0..x.len() {
                                slot[i] += gout[i] * y[i];
                            }
                        }
                        if req(*b) {
                            let slot = accumulate(grads, *b, y.len());
                            for i in 0..y.len() {
                                slot[i] += gout[i] * x[i];
                            }
                        }
                    }
                    Broadcast::Channel => {
                        let (_, c, l) = channel_dims(shape(*a));
                        if req(*a) {
                            let slot = accumulate(grads, *a, x.len());
                            for i in 0..x.len() {
                                slot[i] += gout[i] * y[(i / l) % c];
                            }
                        }
                        if req(*b) {
                            let slot = accumulate(grads, *b, c);
                            for i in 0..x.len() {
                                slot[(i / l) % c] += gout[i] * x[i];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if req(*a) {
                    let n = val(*a).len();
                    let g = if matches!(self, Op::Mean(_)) {
                        gout[0] / T::of(n as f64)
                    } else {
                        gout[0]
                    };
                    let slot = accumulate(grads, *a, n);
                    slot.iter_mut().for_each(|s| *s += g);
                }
            }
            Op::ChannelNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, c, l) = channel_dims(shape(*input));
                let gn = val(*gain);
                let lf = T::of(l as f64);
                if req(*input) {
                    let slot = accumulate(grads, *input, rows * c * l);
                    for r in 0..rows {
                        for ch in 0..c {
                            let base = (r * c + ch) * l;
                            let mut mean_g = T::zero();
                            let mut mean_gx = T::zero();
                            for t in 0..l {
                                let gh = gout[base + t] * gn[ch];
                                mean_g += gh;
                                mean_gx += gh * xhat[base + t];
                            }
                            mean_g = mean_g / lf;
                            mean_gx = mean_gx / lf;
                            let is = inv_std[r * c + ch];
                            for t in 0..l {
                                let gh = gout[base + t] * gn[ch];
                                slot[base + t] += is * (gh - mean_g - xhat[base + t] * mean_gx);
                            }
                        }
                    }
                }
                if req(*gain) || req(*bias) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for r in 0..rows {
                        for ch in 0..c {
                            let base = (r * c + ch) * l;
                            for t in 0..l {
                                gg[ch] += gout[base + t] * xhat[base + t];
                                gb[ch] += gout[base + t];
                            }
                        }
                    }
                    if req(*gain) {
                        add_into(grads, *gain, Some(gg));
                    }
                    if req(*bias) {
                        add_into(grads, *bias, Some(gb));
                    }
                }
            }
            Op::NarrowChannels { input, start } => {
                if req(*input) {
                    let (rows, c, l) = channel_dims(shape(*input));
                    let width = nodes[idx].value.shape()[1];
                    let slot = accumulate(grads, *input, rows * c * l);
                    for r in 0..rows {
                        let src = &gout[r * width * l..][..width * l];
                        let dst = &mut slot[(r * c + start) * l..][..width * l];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let total = nodes[idx].value.shape()[1];
                let mut offset = 0;
                for part in parts {
                    let (rows, c, l) = channel_dims(shape(*part));
                    if req(*part) {
                        let slot = accumulate(grads, *part, rows * c * l);
                        for r in 0..rows {
                            let src = &gout[(r * total + offset) * l..][..c * l];
                            let dst = &mut slot[r * c * l..][..c * l];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                        }
                    }
                    offset += c;
                }
            }
            Op::GumbelKeep { logits, tau } => {
                if req(*logits) {
                    let slot = accumulate(grads, *logits, gout.len() * 2);
                    for (j, (&p, &g)) in out.iter().zip(gout).enumerate() {
                        let d = g * p * (T::one() - p) / *tau;
                        slot[2 * j] += d;
                        slot[2 * j + 1] -= d;
                    }
                }
            }
            Op::BinarizeSte(a) => {
                if req(*a) {
                    let slot = accumulate(grads, *a, gout.len());
                    for (s, &g) in slot.iter_mut().zip(gout) {
                        *s += g.max(-T::one()).min(T::one());
                    }
                }
            }
            Op::PitNegSiSdr { estimates, grad } => {
                if req(*estimates) {
                    let slot = accumulate(grads, *estimates, grad.len());
                    for (s, &g) in slot.iter_mut().zip(grad) {
                        *s += gout[0] * g;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, delta: Option<Vec<T>>) {
    let Some(delta) = delta else { return };
    match grads[id.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
        None => grads[id.0] = Some(delta),
    }
}

/// Splits a `[B, C, L]` shape; rank-2 `[C, L]` is treated as `B = 1`.
fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [b, c, l] => (*b, *c, *l),
        [c, l] => (1, *c, *l),
        [c] => (1, *c, 1),
        _ => (1, 1, shape.iter().product()),
    }
}

fn expect_rank3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c, l] => Ok((*b, *c, *l)),
        _ => Err(Error::invalid(format!(
            "{what} expects [B, C, L], got {shape:?}"
        ))),
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `[B, Cin, L]` with weight `[Cout, Cin/groups, K]`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        cfg: Conv1dConfig,
    ) -> Result<NodeId> {
        let (batch, cin, len) = expect_rank3(self.shape(input), "conv1d input")?;
        let (cout, cig, kernel) = expect_rank3(self.shape(weight), "conv1d weight")?;
        if cfg.groups == 0 || cfg.stride == 0 || cfg.dilation == 0 || kernel == 0 {
            return Err(Error::invalid("conv1d stride, dilation, groups and kernel must be positive"));
        }
        if cin % cfg.groups != 0 || cout % cfg.groups != 0 || cig != cin / cfg.groups {
            return Err(Error::invalid(format!(
                "conv1d weight {:?} incompatible with {cin} input channels in {} groups",
                self.shape(weight),
                cfg.groups
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::invalid(format!("conv1d bias must be [{cout}]")));
            }
        }
        let lout = kernels::conv1d_output_len(len, kernel, cfg.stride, cfg.dilation, cfg.padding)
            .ok_or_else(|| Error::invalid(format!("conv1d output length < 1 for input length {len}")))?;
        let geom = ConvGeom {
            batch,
            cin,
            len,
            cout,
            kernel,
            stride: cfg.stride,
            dilation: cfg.dilation,
            padding: cfg.padding,
            groups: cfg.groups,
            lout,
        };
        let out = kernels::conv1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            "conv1d",
            Tensor::new(vec![batch, cout, lout], out)?,
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Transposed convolution of `[B, Cin, L]` with weight `[Cin, Cout, K]`.
    pub fn conv_transpose1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        cfg: ConvTranspose1dConfig,
    ) -> Result<NodeId> {
        let (batch, cin, len) = expect_rank3(self.shape(input), "conv_transpose1d input")?;
        let (wcin, cout, kernel) = expect_rank3(self.shape(weight), "conv_transpose1d weight")?;
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv_transpose1d weight {:?} incompatible with {cin} input channels",
                self.shape(weight)
            )));
        }
        if cfg.stride == 0 || kernel == 0 {
            return Err(Error::invalid("conv_transpose1d stride and kernel must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::invalid(format!("conv_transpose1d bias must be [{cout}]")));
            }
        }
        let lout = kernels::conv_transpose1d_output_len(len, kernel, cfg.stride, cfg.padding)
            .ok_or_else(|| Error::invalid("conv_transpose1d output length < 1"))?;
        let geom = ConvGeom {
            batch,
            cin,
            len,
            cout,
            kernel,
            stride: cfg.stride,
            dilation: 1,
            padding: cfg.padding,
            groups: 1,
            lout,
        };
        let out = kernels::conv_transpose1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            "conv_transpose1d",
            Tensor::new(vec![batch, cout, lout], out)?,
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    fn map_unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.requires_grad(a);
        self.push(name, out, op, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary("sqrt", a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.map_unary("scalar_mul", a, |x| x * s, Op::ScalarMul(a, s))
    }

    /// PReLU with a `[C]` (per-channel) or `[1]` (shared) slope.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let (_, c, l) = channel_dims(&ishape);
        let sl = self.value(slope).data().to_vec();
        if sl.len() != 1 && (sl.len() != c || self.shape(slope).len() != 1) {
            return Err(Error::invalid(format!(
                "prelu slope must be [1] or [{c}], got {:?}",
                self.shape(slope)
            )));
        }
        let out: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let a = if sl.len() == 1 { sl[0] } else { sl[(i / l) % c] };
                if x > T::zero() {
                    x
                } else {
                    a * x
                }
            })
            .collect();
        let rg = self.requires_grad(input) || self.requires_grad(slope);
        self.push(
            "prelu",
            Tensor::new(ishape, out)?,
            Op::PRelu { input, slope },
            rg,
        )
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId, what: &str) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if let ([_, c, _], [cb]) = (sa, sb) {
            if c == cb {
                return Ok(Broadcast::Channel);
            }
        }
        Err(Error::invalid(format!(
            "{what}: cannot broadcast {sb:?} against {sa:?}"
        )))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        make: impl Fn(NodeId, NodeId, Broadcast) -> Op<T>,
    ) -> Result<NodeId> {
        let bc = self.broadcast_kind(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let out: Vec<T> = match bc {
            Broadcast::Same => va.data().iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Channel => {
                let (_, c, l) = channel_dims(va.shape());
                va.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb[(i / l) % c]))
                    .collect()
            }
        };
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(name, out, make(a, b, bc), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).data();
        let s: T = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.requires_grad(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Normalizes every (batch, channel) row over time with its own mean and
    /// variance, then applies per-channel `gain` and `bias`. Channels never
    /// mix, so zeroing or removing one leaves the others untouched.
    pub fn channel_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, c, l) = expect_rank3(self.shape(input), "channel_norm input")?;
        if c == 0 || l < 2 {
            return Err(Error::invalid("channel_norm needs C >= 1 and L >= 2"));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::invalid(format!("channel_norm gain and bias must be [{c}]")));
        }
        let x = self.value(input).data();
        let gn = self.value(gain).data();
        let bs = self.value(bias).data();
        let lf = T::of(l as f64);
        let eps = T::of(CHANNEL_NORM_EPS);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows * c];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            for ch in 0..c {
                let base = (r * c + ch) * l;
                let row = &x[base..base + l];
                let mean = row.iter().copied().sum::<T>() / lf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / lf;
                let is = (var + eps).sqrt().recip();
                inv_std[r * c + ch] = is;
                for t in 0..l {
                    let h = (row[t] - mean) * is;
                    xhat[base + t] = h;
                    out[base + t] = gn[ch] * h + bs[ch];
                }
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push(
            "channel_norm",
            Tensor::new(vec![rows, c, l], out)?,
            Op::ChannelNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Channels `start..start+len` of a `[B, C, L]` node.
    pub fn narrow_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (b, c, l) = expect_rank3(self.shape(input), "narrow_channels input")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!(
                "narrow_channels {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * len * l);
        for r in 0..b {
            out.extend_from_slice(&x[(r * c + start) * l..][..len * l]);
        }
        let rg = self.requires_grad(input);
        self.push(
            "narrow_channels",
            Tensor::new(vec![b, len, l], out)?,
            Op::NarrowChannels { input, start },
            rg,
        )
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_channels needs at least one input"));
        };
        let (b, _, l) = expect_rank3(self.shape(first), "concat_channels input")?;
        let mut total = 0;
        for &p in parts {
            let (pb, pc, pl) = expect_rank3(self.shape(p), "concat_channels input")?;
            if pb != b || pl != l {
                return Err(Error::invalid("concat_channels inputs disagree on batch or length"));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(b * total * l);
        for r in 0..b {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[r * c * l..][..c * l]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(
            "concat_channels",
            Tensor::new(vec![b, total, l], out)?,
            Op::ConcatChannels(parts.to_vec()),
            rg,
        )
    }

    /// Crops or zero-pads the last axis to `len`.
    pub fn fit_length(&mut self, input: NodeId, len: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let Some(&lin) = shape.last() else {
            return Err(Error::invalid("fit_length needs rank >= 1"));
        };
        if len == 0 {
            return Err(Error::invalid("fit_length target must be positive"));
        }
        let rows = self.value(input).numel() / lin;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); rows * len];
        let keep = lin.min(len);
        for r in 0..rows {
            out[r * len..r * len + keep].copy_from_slice(&x[r * lin..r * lin + keep]);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let rg = self.requires_grad(input);
        self.push("fit_length", Tensor::new(oshape, out)?, Op::FitLength(input), rg)
    }

    /// Two-class Gumbel-Softmax keep probability per channel.
    ///
    /// `logits` is `[C, 2]` (keep, drop) and `noise` holds the matching Gumbel
    /// draws. Returns `π_j = σ(((α_keep + g_keep) − (α_drop + g_drop)) / τ)`,
    /// which is the keep entry of the two-way softmax computed without
    /// overflow.
    pub fn gumbel_keep_prob(&mut self, logits: NodeId, noise: &[T], tau: T) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        let [c, 2] = shape[..] else {
            return Err(Error::invalid(format!("gumbel logits must be [C, 2], got {shape:?}")));
        };
        if noise.len() != 2 * c {
            return Err(Error::invalid("gumbel noise must match logits"));
        }
        if tau.is_nan() || tau <= T::zero() {
            return Err(Error::invalid("temperature must be positive"));
        }
        let a = self.value(logits).data();
        let out: Vec<T> = (0..c)
            .map(|j| {
                stable_sigmoid(((a[2 * j] + noise[2 * j]) - (a[2 * j + 1] + noise[2 * j + 1])) / tau)
            })
            .collect();
        let rg = self.requires_grad(logits);
        self.push(
            "gumbel_keep_prob",
            Tensor::new(vec![c], out)?,
            Op::GumbelKeep { logits, tau },
            rg,
        )
    }

    /// Hard threshold `m = 1[π > ε]` whose backward passes the upstream
    /// gradient through clamped to `[-1, 1]`.
    pub fn binarize_ste(&mut self, input: NodeId, threshold: T) -> Result<NodeId> {
        self.map_unary(
            "binarize_ste",
            input,
            |p| if p > threshold { T::one() } else { T::zero() },
            Op::BinarizeSte(input),
        )
    }

    /// Permutation-invariant negative SI-SDR between `[B, C, T]` estimates and
    /// constant references, averaged over the batch.
    pub fn pit_neg_sisdr(&mut self, estimates: NodeId, references: &Tensor<T>) -> Result<NodeId> {
        let (b, c, l) = expect_rank3(self.shape(estimates), "pit_neg_sisdr estimates")?;
        if references.shape() != [b, c, l] {
            return Err(Error::invalid(format!(
                "references {:?} do not match estimates {:?}",
                references.shape(),
                [b, c, l]
            )));
        }
        let est: Vec<f64> = self.value(estimates).data().iter().map(|v| v.f64()).collect();
        let refs: Vec<f64> = references.data().iter().map(|v| v.f64()).collect();
        let (loss, grad) = metrics::pit_neg_sisdr_with_grad(&est, &refs, b, c, l)?;
        let rg = self.requires_grad(estimates);
        self.push(
            "pit_neg_sisdr",
            Tensor::scalar(T::of(loss)),
            Op::PitNegSiSdr {
                estimates,
                grad: grad.into_iter().map(T::of).collect(),
            },
            rg,
        )
    }
}

pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
