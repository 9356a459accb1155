//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape in reverse, pushing the upstream gradient of each node into
//! the nodes it was computed from. Gradients of a node reached along several
//! paths are summed.

use super::kernels::{self, ConvGeometry};
use super::mask::Mask;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking their logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    ExpandConcat {
        base: Var,
        vectors: Vec<Var>,
    },
    Resize {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    MaskedMean {
        input: Var,
        mask: Vec<bool>,
        count: usize,
    },
    CrossEntropy {
        probs: Var,
        target: Vec<bool>,
    },
    Sum {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
///
/// Parameters are read in place from a borrowed [`ParamStore`]; the gradients
/// returned by [`Tape::backward`] are added to the store by the caller.
#[derive(Debug)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    params_require_grad: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters, for differentiating plain inputs.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            params_require_grad: false,
        }
    }

    /// A tape whose parameters receive gradients.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
            params_require_grad: true,
        }
    }

    /// A tape that reads parameters as constants; nothing is kept for backward.
    pub fn frozen(params: &'p ParamStore) -> Self {
        Tape {
            params_require_grad: false,
            ..Self::with_params(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// The node for a stored parameter. Repeated calls return the same node,
    /// so a shared weight accumulates gradient from every use.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("tape has no parameter store");
        if let Some(var) = self.param_vars[id.0] {
            return var;
        }
        debug_assert!(id.0 < store.len());
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.params_require_grad,
        });
        let var = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(var);
        var
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => {
                &self
                    .params
                    .expect("parameter node without store")
                    .get(*id)
                    .value
            }
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn dims3(&self, var: Var) -> Result<(usize, usize, usize)> {
        self.value(var).dims3()
    }

    /// Square-kernel convolution of an `h × w × c_in` input with a
    /// `k × k × c_in × c_out` kernel, zero padded.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (h, w, c_in) = self.dims3(input)?;
        let kshape = self.value(kernel).shape().to_vec();
        let [k, k2, kc_in, c_out] = kshape[..] else {
            return Err(Error::InvalidShape(format!(
                "conv kernel must be k×k×c_in×c_out, got {kshape:?}"
            )));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "conv kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv stride must be at least 1".into()));
        }
        if kc_in != c_in {
            return Err(Error::InvalidShape(format!(
                "conv kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::InvalidShape(format!(
                "{h}x{w} input with padding {padding} is smaller than a {k}x{k} kernel"
            )));
        }
        let geom = ConvGeometry {
            h,
            w,
            c_in,
            c_out,
            k,
            stride,
            pad: padding,
        };
        let kernel_grad = self.requires_grad(kernel);
        let requires_grad = kernel_grad || self.requires_grad(input);
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            &geom,
            kernel_grad,
        );
        let value = Tensor::new(vec![geom.out_h(), geom.out_w(), c_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            requires_grad,
        ))
    }

    /// Adds a per-channel bias vector.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (h, w, c) = self.dims3(input)?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::InvalidShape(format!(
                "bias of length {} for {c} channels",
                b.len()
            )));
        }
        let mut out = self.value(input).clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for (v, bv) in px.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        debug_assert_eq!(out.shape(), &[h, w, c]);
        let rg = self.requires_grad(input) || self.requires_grad(bias);
        Ok(self.push(out, Op::BiasAdd { input, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(relu_scalar);
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Stacks `h × w × c_i` parts along the channel axis, in order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape("concat of zero parts".into()));
        };
        let (h, w, _) = self.dims3(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.dims3(p)?;
            if (ph, pw) != (h, w) {
                return Err(Error::InvalidShape(format!(
                    "concat part is {ph}x{pw}, expected {h}x{w}"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[px * c..(px + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let value = Tensor::new(vec![h, w, total], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Broadcasts each vector over every pixel of `base` and appends it as
    /// extra channels, in list order.
    pub fn expand_concat(&mut self, base: Var, vectors: &[Var]) -> Result<Var> {
        let (h, w, c) = self.dims3(base)?;
        for &v in vectors {
            if self.value(v).shape().len() != 1 {
                return Err(Error::InvalidShape(format!(
                    "expand_concat expects 1-D vectors, got {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let extra: usize = vectors.iter().map(|&v| self.value(v).len()).sum();
        let total = c + extra;
        let mut out = Vec::with_capacity(h * w * total);
        let base_data = self.value(base).data();
        for px in base_data.chunks_exact(c) {
            out.extend_from_slice(px);
            for &v in vectors {
                out.extend_from_slice(self.value(v).data());
            }
        }
        let rg = self.requires_grad(base) || vectors.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(vec![h, w, total], out)?;
        Ok(self.push(
            value,
            Op::ExpandConcat {
                base,
                vectors: vectors.to_vec(),
            },
            rg,
        ))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidShape(
                "resize target must be at least 1x1".into(),
            ));
        }
        let dims = self.dims3(input)?;
        let out = kernels::bilinear_forward(self.value(input).data(), dims, out_h, out_w);
        let rg = self.requires_grad(input);
        let value = Tensor::new(vec![out_h, out_w, dims.2], out)?;
        Ok(self.push(value, Op::Resize { input }, rg))
    }

    /// Softmax over the channel axis of an `h × w × c` tensor.
    pub fn channel_softmax(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.dims3(input)?;
        if c < 2 {
            return Err(Error::InvalidShape(format!(
                "softmax needs at least 2 channels, got {c}"
            )));
        }
        let out = kernels::softmax_last(self.value(input).data(), c);
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::new(vec![h, w, c], out)?, Op::Softmax { input }, rg))
    }

    /// Mean of the feature rows at the mask's foreground pixels.
    pub fn masked_mean(&mut self, input: Var, mask: &Mask) -> Result<Var> {
        let (h, w, d) = self.dims3(input)?;
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::InvalidShape(format!(
                "mask {}x{} does not match {h}x{w} features",
                mask.height(),
                mask.width()
            )));
        }
        let count = mask.count();
        if count == 0 {
            return Err(Error::EmptyMask(
                "masked mean over a mask with no foreground".into(),
            ));
        }
        let mut sum = vec![0.0; d];
        for (row, &m) in self
            .value(input)
            .data()
            .chunks_exact(d)
            .zip(mask.as_slice())
        {
            if m {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        let n = count as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(vec![d], sum)?,
            Op::MaskedMean {
                input,
                mask: mask.as_slice().to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean per-pixel negative log-likelihood of the target class under a
    /// two-channel probability map (channel 1 = foreground).
    pub fn cross_entropy(&mut self, probs: Var, target: &Mask) -> Result<Var> {
        let (h, w, c) = self.dims3(probs)?;
        if c != 2 || (target.height(), target.width()) != (h, w) {
            return Err(Error::InvalidShape(format!(
                "cross entropy of {h}x{w}x{c} probabilities against a {}x{} mask",
                target.height(),
                target.width()
            )));
        }
        let p = self.value(probs).data();
        let total: f64 = target
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &t)| -floor_prob(p[2 * i + usize::from(t)]).ln())
            .sum();
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(total / (h * w) as f64),
            Op::CrossEntropy {
                probs,
                target: target.as_slice().to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::InvalidShape(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.requires_grad(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every leaf and
    /// parameter that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, Var(i), &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.value(var).len();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                if self.nodes[kernel.0].requires_grad {
                    let src = cols.as_deref().unwrap_or_else(|| self.value(*input).data());
                    let kernel_grad = self.slot(grads, *kernel).expect("kernel requires grad");
                    kernels::conv2d_kernel_grad(src, g, geom, kernel_grad);
                }
                if self.nodes[input.0].requires_grad {
                    let kernel_value = self.value(*kernel).data();
                    let input_grad = self.slot(grads, *input).expect("input requires grad");
                    kernels::conv2d_input_grad(kernel_value, g, geom, input_grad);
                }
            }
            Op::BiasAdd { input, bias } => {
                if let Some(gi) = self.slot(grads, *input) {
                    add_into(gi, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let c = gb.len();
                    for px in g.chunks_exact(c) {
                        add_into(gb, px);
                    }
                }
            }
            Op::Relu { input } => {
                let y = self.value(out).data();
                if let Some(gi) = self.slot(grads, *input) {
                    for ((acc, &gv), &yv) in gi.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = self.value(out).shape()[2];
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[2];
                    if let Some(gp) = self.slot(grads, p) {
                        for (dst, src) in gp.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                            add_into(dst, &src[offset..offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::ExpandConcat { base, vectors } => {
                let total = self.value(out).shape()[2];
                let c = self.value(*base).shape()[2];
                if let Some(gb) = self.slot(grads, *base) {
                    for (dst, src) in gb.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                        add_into(dst, &src[..c]);
                    }
                }
                let mut offset = c;
                for &v in vectors {
                    let d = self.value(v).len();
                    if let Some(gv) = self.slot(grads, v) {
                        for px in g.chunks_exact(total) {
                            add_into(gv, &px[offset..offset + d]);
                        }
                    }
                    offset += d;
                }
            }
            Op::Resize { input } => {
                let dims = self
                    .value(*input)
                    .dims3()
                    .expect("rank checked at record time");
                let oshape = self.value(out).shape();
                let (oh, ow) = (oshape[0], oshape[1]);
                if let Some(gi) = self.slot(grads, *input) {
                    kernels::bilinear_backward(g, dims, oh, ow, gi);
                }
            }
            Op::Softmax { input } => {
                let p = self.value(out);
                let c = p.shape()[2];
                if let Some(gi) = self.slot(grads, *input) {
                    for ((acc, gv), pv) in gi
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(p.data().chunks_exact(c))
                    {
                        let dot: f64 = gv.iter().zip(pv).map(|(a, b)| a * b).sum();
                        for ((a, &gj), &pj) in acc.iter_mut().zip(gv).zip(pv) {
                            *a += pj * (gj - dot);
                        }
                    }
                }
            }
            Op::MaskedMean { input, mask, count } => {
                let scale = 1.0 / *count as f64;
                let d = g.len();
                if let Some(gi) = self.slot(grads, *input) {
                    for (row, &m) in gi.chunks_exact_mut(d).zip(mask) {
                        if m {
                            for (a, gv) in row.iter_mut().zip(g) {
                                *a += gv * scale;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, target } => {
                let p = self.value(*probs).data();
                let scale = g[0] / target.len() as f64;
                if let Some(gp) = self.slot(grads, *probs) {
                    for (i, &t) in target.iter().enumerate() {
                        let j = 2 * i + usize::from(t);
                        if p[j] > PROB_FLOOR {
                            gp[j] -= scale / p[j];
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(gi) = self.slot(grads, *input) {
                    gi.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Scale { input, factor } => {
                if let Some(gi) = self.slot(grads, *input) {
                    for (a, gv) in gi.iter_mut().zip(g) {
                        *a += factor * gv;
                    }
                }
            }
        }
    }
}

/// Clamps to [`PROB_FLOOR`] from below; NaN passes through.
fn floor_prob(p: f64) -> f64 {
    if p < PROB_FLOOR {
        PROB_FLOOR
    } else {
        p
    }
}

/// `max(x, 0)` that keeps NaN visible instead of mapping it to zero.
pub(crate) fn relu_scalar(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`]: gradients of leaves and parameters.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node. `None` when the loss
    /// does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter reached by the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_deref().map(|g| (id, g)))
    }
}
