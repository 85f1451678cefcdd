//! Tape-style computation graph.
//!
//! Nodes are appended in topological order; `forward` caches every
//! activation, `backward` walks the tape in reverse and accumulates
//! parameter and input gradients. One forward pass licenses exactly one
//! backward pass.

use super::{NnError, ParamStore, Real, SlotId, Tensor};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Smoothing constant of the soft Dice coefficient.
pub const DICE_EPSILON: f64 = 1.0;

const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub enum Op<T> {
    /// Leaf fed externally before each forward pass.
    Input,
    /// Same-padding stride-1 cross-correlation plus bias.
    Conv2d { weight: SlotId, bias: SlotId },
    /// 2x2 non-overlapping max; ties route to the first cell in row-major order.
    MaxPool2,
    /// Nearest-neighbor 2x upsampling.
    Upsample2,
    /// Channel concatenation of two tensors with equal spatial dims.
    ConcatChannels,
    /// Flattens any number of inputs into one vector, in input order.
    ConcatFlat,
    Relu,
    Sigmoid,
    /// Scalar projection `sum_i coeffs[i] * x[i]`.
    WeightedSum { coeffs: Vec<T> },
    /// Mean binary cross entropy over masked pixels (0 on an empty mask).
    MaskedBce { truth: Vec<T>, mask: Vec<bool> },
    /// Soft Dice coefficient over masked pixels.
    MaskedDice { truth: Vec<T>, mask: Vec<bool> },
    /// `w_bce * x0 + w_dice * (1 - x1)` with x1 the Dice coefficient.
    CoupleLoss { w_bce: T, w_dice: T },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    shape: (usize, usize, usize),
}

/// Per-node scratch retained from forward for backward.
enum Aux {
    None,
    /// Flat input index of each pooling window's argmax.
    ArgMax(Vec<u32>),
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    activations: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux>,
    forward_fresh: bool,
}

/// Gradients produced by one backward pass: one store mirroring the
/// parameters, plus the adjoint of every input node.
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    input_grads: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of an `Input` node, if it was reachable from the sink.
    pub fn input_grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.input_grads.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }
}

/// Mean masked binary cross entropy; the boolean reports an empty mask.
/// Predictions are clamped to `[1e-7, 1 - 1e-7]` before the logs.
pub fn masked_bce_value<T: Real>(pred: &[T], truth: &[T], mask: &[bool]) -> (T, bool) {
    debug_assert_eq!(pred.len(), truth.len());
    debug_assert_eq!(pred.len(), mask.len());
    let lo = T::from_f64_lossy(BCE_CLAMP);
    let hi = T::one() - lo;
    let mut sum = T::zero();
    let mut count = 0usize;
    for ((&p, &g), &m) in pred.iter().zip(truth).zip(mask) {
        if !m {
            continue;
        }
        let p = p.max(lo).min(hi);
        sum -= g * p.ln() + (T::one() - g) * (T::one() - p).ln();
        count += 1;
    }
    if count == 0 {
        (T::zero(), true)
    } else {
        (sum / T::from_usize(count).unwrap(), false)
    }
}

/// Soft Dice coefficient `(2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)` over
/// masked pixels; an empty mask yields 1 (empty agreement).
pub fn masked_dice_value<T: Real>(pred: &[T], truth: &[T], mask: &[bool]) -> (T, bool) {
    debug_assert_eq!(pred.len(), truth.len());
    debug_assert_eq!(pred.len(), mask.len());
    let eps = T::from_f64_lossy(DICE_EPSILON);
    let mut inter = T::zero();
    let mut p_sum = T::zero();
    let mut g_sum = T::zero();
    let mut count = 0usize;
    for ((&p, &g), &m) in pred.iter().zip(truth).zip(mask) {
        if !m {
            continue;
        }
        inter += p * g;
        p_sum += p;
        g_sum += g;
        count += 1;
    }
    let two = T::from_f64_lossy(2.0);
    ((two * inter + eps) / (p_sum + g_sum + eps), count == 0)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), activations: Vec::new(), aux: Vec::new(), forward_fresh: false }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// The sink: last node on the tape.
    pub fn last_node(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize, usize) {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, shape: (usize, usize, usize)) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape });
        self.activations.push(None);
        self.aux.push(Aux::None);
        self.forward_fresh = false;
        id
    }

    pub fn input(&mut self, channels: usize, height: usize, width: usize) -> NodeId {
        self.push(Op::Input, vec![], (channels, height, width))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        params: &ParamStore<T>,
        weight: SlotId,
        bias: SlotId,
    ) -> Result<NodeId, NnError> {
        let (c_in, h, w) = self.shape(x);
        let wdims = &params.slot(weight).dims;
        if wdims.len() != 4 || wdims[2] != wdims[3] {
            return Err(NnError::InvalidOp(format!(
                "conv weight {} must have dims [c_out, c_in, k, k], got {wdims:?}",
                params.slot(weight).name
            )));
        }
        let (c_out, kc_in, k) = (wdims[0], wdims[1], wdims[2]);
        if k % 2 == 0 {
            return Err(NnError::InvalidOp(format!("kernel size {k} must be odd")));
        }
        if kc_in != c_in {
            return Err(NnError::ChannelMismatch { expected: kc_in, got: c_in });
        }
        if params.slot(bias).dims != vec![c_out] {
            return Err(NnError::ShapeMismatch(format!(
                "bias {} must have dims [{c_out}]",
                params.slot(bias).name
            )));
        }
        Ok(self.push(Op::Conv2d { weight, bias }, vec![x], (c_out, h, w)))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let (c, h, w) = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::ShapeMismatch(format!("maxpool2 needs even dims, got {h}x{w}")));
        }
        Ok(self.push(Op::MaxPool2, vec![x], (c, h / 2, w / 2)))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.shape(x);
        self.push(Op::Upsample2, vec![x], (c, h * 2, w * 2))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ca, ha, wa) = self.shape(a);
        let (cb, hb, wb) = self.shape(b);
        if (ha, wa) != (hb, wb) {
            return Err(NnError::ShapeMismatch(format!(
                "concat spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        Ok(self.push(Op::ConcatChannels, vec![a, b], (ca + cb, ha, wa)))
    }

    pub fn concat_flat(&mut self, inputs: &[NodeId]) -> Result<NodeId, NnError> {
        if inputs.is_empty() {
            return Err(NnError::InvalidOp("concat_flat needs at least one input".into()));
        }
        let total: usize = inputs
            .iter()
            .map(|&i| {
                let (c, h, w) = self.shape(i);
                c * h * w
            })
            .sum();
        Ok(self.push(Op::ConcatFlat, inputs.to_vec(), (1, 1, total)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Relu, vec![x], shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Sigmoid, vec![x], shape)
    }

    pub fn weighted_sum(&mut self, x: NodeId, coeffs: Vec<T>) -> Result<NodeId, NnError> {
        let (c, h, w) = self.shape(x);
        if coeffs.len() != c * h * w {
            return Err(NnError::ShapeMismatch(format!(
                "weighted_sum needs {} coefficients, got {}",
                c * h * w,
                coeffs.len()
            )));
        }
        Ok(self.push(Op::WeightedSum { coeffs }, vec![x], (1, 1, 1)))
    }

    fn check_mask_op(&self, x: NodeId, truth: &[T], mask: &[bool]) -> Result<(), NnError> {
        let (c, h, w) = self.shape(x);
        if truth.len() != c * h * w || mask.len() != c * h * w {
            return Err(NnError::ShapeMismatch(format!(
                "loss target length {} / mask length {} vs prediction size {}",
                truth.len(),
                mask.len(),
                c * h * w
            )));
        }
        Ok(())
    }

    pub fn masked_bce(&mut self, x: NodeId, truth: Vec<T>, mask: Vec<bool>) -> Result<NodeId, NnError> {
        self.check_mask_op(x, &truth, &mask)?;
        Ok(self.push(Op::MaskedBce { truth, mask }, vec![x], (1, 1, 1)))
    }

    pub fn masked_dice(&mut self, x: NodeId, truth: Vec<T>, mask: Vec<bool>) -> Result<NodeId, NnError> {
        self.check_mask_op(x, &truth, &mask)?;
        Ok(self.push(Op::MaskedDice { truth, mask }, vec![x], (1, 1, 1)))
    }

    pub fn couple_loss(&mut self, bce: NodeId, dice: NodeId, w_bce: T, w_dice: T) -> Result<NodeId, NnError> {
        for &n in &[bce, dice] {
            if self.shape(n) != (1, 1, 1) {
                return Err(NnError::ShapeMismatch("couple_loss inputs must be scalars".into()));
            }
        }
        Ok(self.push(Op::CoupleLoss { w_bce, w_dice }, vec![bce, dice], (1, 1, 1)))
    }

    pub fn activation(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.activations[id.0].as_ref()
    }

    /// Runs the tape in order. `inputs` must bind every `Input` node.
    pub fn forward(
        &mut self,
        params: &ParamStore<T>,
        inputs: &[(NodeId, &Tensor<T>)],
    ) -> Result<(), NnError> {
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Input => {
                    let bound = inputs
                        .iter()
                        .find(|(id, _)| id.0 == i)
                        .ok_or_else(|| NnError::GraphState(format!("input node {i} not bound")))?;
                    let t = bound.1;
                    if t.shape() != self.nodes[i].shape {
                        return Err(NnError::ShapeMismatch(format!(
                            "input node {i}: expected {:?}, got {:?}",
                            self.nodes[i].shape,
                            t.shape()
                        )));
                    }
                    self.activations[i] = Some(t.clone());
                }
                Op::MaxPool2 => self.run_maxpool(i)?,
                _ => {
                    let node = &self.nodes[i];
                    let out = self.eval_op(&node.op, node, params)?;
                    self.activations[i] = Some(out);
                }
            }
        }
        self.forward_fresh = true;
        Ok(())
    }

    fn act(&self, id: NodeId) -> &Tensor<T> {
        self.activations[id.0].as_ref().expect("activation cached by forward")
    }

    fn eval_op(&self, op: &Op<T>, node: &Node<T>, params: &ParamStore<T>) -> Result<Tensor<T>, NnError> {
        Ok(match op {
            Op::Input | Op::MaxPool2 => unreachable!("handled directly by forward"),
            Op::Conv2d { weight, bias } => {
                let x = self.act(node.inputs[0]);
                conv2d_forward(x, &params.slot(*weight).data, &params.slot(*bias).data, node.shape)
            }
            Op::Upsample2 => upsample2_forward(self.act(node.inputs[0])),
            Op::ConcatChannels => {
                let a = self.act(node.inputs[0]);
                let b = self.act(node.inputs[1]);
                let mut data = Vec::with_capacity(a.len() + b.len());
                data.extend_from_slice(a.data());
                data.extend_from_slice(b.data());
                Tensor::new(node.shape.0, node.shape.1, node.shape.2, data)?
            }
            Op::ConcatFlat => {
                let mut data = Vec::with_capacity(node.shape.2);
                for &i in &node.inputs {
                    data.extend_from_slice(self.act(i).data());
                }
                Tensor::flat(data)?
            }
            Op::Relu => {
                let x = self.act(node.inputs[0]);
                let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
                Tensor::new(node.shape.0, node.shape.1, node.shape.2, data)?
            }
            Op::Sigmoid => {
                let x = self.act(node.inputs[0]);
                let data = x.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
                Tensor::new(node.shape.0, node.shape.1, node.shape.2, data)?
            }
            Op::WeightedSum { coeffs } => {
                let x = self.act(node.inputs[0]);
                let mut sum = T::zero();
                for (&v, &c) in x.data().iter().zip(coeffs) {
                    sum += v * c;
                }
                Tensor::scalar(sum)
            }
            Op::MaskedBce { truth, mask } => {
                let x = self.act(node.inputs[0]);
                Tensor::scalar(masked_bce_value(x.data(), truth, mask).0)
            }
            Op::MaskedDice { truth, mask } => {
                let x = self.act(node.inputs[0]);
                Tensor::scalar(masked_dice_value(x.data(), truth, mask).0)
            }
            Op::CoupleLoss { w_bce, w_dice } => {
                let bce = self.act(node.inputs[0]).item();
                let dice = self.act(node.inputs[1]).item();
                Tensor::scalar(*w_bce * bce + *w_dice * (T::one() - dice))
            }
        })
    }

    // MaxPool is the one op with per-forward state (the argmax cache), so it
    // runs with the mutable borrow forward() holds.
    fn run_maxpool(&mut self, index: usize) -> Result<(), NnError> {
        let input_id = self.nodes[index].inputs[0];
        let x = self.activations[input_id.0]
            .as_ref()
            .ok_or_else(|| NnError::GraphState("maxpool input not evaluated".into()))?;
        let (out, argmax) = maxpool2_forward(x);
        self.aux[index] = Aux::ArgMax(argmax);
        self.activations[index] = Some(out);
        Ok(())
    }

    /// Reverse-mode pass from the last node, which must be scalar. Consumes
    /// the cached forward pass: a second call without a new forward fails.
    pub fn backward(&mut self, params: &ParamStore<T>) -> Result<Gradients<T>, NnError> {
        if !self.forward_fresh {
            return Err(NnError::GraphState(
                "backward requires a fresh forward pass (none cached or already consumed)".into(),
            ));
        }
        self.forward_fresh = false;
        let sink = self
            .nodes
            .len()
            .checked_sub(1)
            .ok_or_else(|| NnError::GraphState("empty graph".into()))?;
        if self.nodes[sink].shape != (1, 1, 1) {
            return Err(NnError::GraphState("sink node is not a scalar".into()));
        }

        let mut adjoints: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adjoints[sink] = Some(Tensor::scalar(T::one()));
        let mut grads = params.zeros_like();

        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = adjoints[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    adjoints[i] = Some(gout); // keep for the caller
                    continue;
                }
                Op::Conv2d { weight, bias } => {
                    let x = self.act(node.inputs[0]);
                    let mut gin = Tensor::zeros(x.channels(), x.height(), x.width());
                    let (gw, gb) = grads.pair_mut(*weight, *bias);
                    conv2d_backward(
                        x,
                        &params.slot(*weight).data,
                        &gout,
                        &mut gin,
                        &mut gw.data,
                        &mut gb.data,
                    );
                    accumulate(&mut adjoints, node.inputs[0], gin);
                }
                Op::MaxPool2 => {
                    let x = self.act(node.inputs[0]);
                    let argmax = match &self.aux[i] {
                        Aux::ArgMax(a) => a,
                        Aux::None => {
                            return Err(NnError::GraphState("maxpool argmax cache missing".into()))
                        }
                    };
                    let mut gin = Tensor::zeros(x.channels(), x.height(), x.width());
                    for (cell, &src) in argmax.iter().enumerate() {
                        gin.data_mut()[src as usize] += gout.data()[cell];
                    }
                    accumulate(&mut adjoints, node.inputs[0], gin);
                }
                Op::Upsample2 => {
                    let x = self.act(node.inputs[0]);
                    let (c, h, w) = x.shape();
                    let (oh, ow) = (h * 2, w * 2);
                    let mut gin = Tensor::zeros(c, h, w);
                    for ch in 0..c {
                        let gp = &gout.data()[ch * oh * ow..(ch + 1) * oh * ow];
                        let ip = gin.plane_mut(ch);
                        for y in 0..h {
                            for x_ in 0..w {
                                let mut s = gp[(2 * y) * ow + 2 * x_];
                                s += gp[(2 * y) * ow + 2 * x_ + 1];
                                s += gp[(2 * y + 1) * ow + 2 * x_];
                                s += gp[(2 * y + 1) * ow + 2 * x_ + 1];
                                ip[y * w + x_] = s;
                            }
                        }
                    }
                    accumulate(&mut adjoints, node.inputs[0], gin);
                }
                Op::ConcatChannels => {
                    let a = self.act(node.inputs[0]);
                    let b = self.act(node.inputs[1]);
                    let (ca, h, w) = a.shape();
                    let ga = Tensor::new(ca, h, w, gout.data()[..a.len()].to_vec())?;
                    let gb = Tensor::new(b.channels(), h, w, gout.data()[a.len()..].to_vec())?;
                    accumulate(&mut adjoints, node.inputs[0], ga);
                    accumulate(&mut adjoints, node.inputs[1], gb);
                }
                Op::ConcatFlat => {
                    let mut offset = 0usize;
                    for &inp in &node.inputs {
                        let t = self.act(inp);
                        let (c, h, w) = t.shape();
                        let part =
                            Tensor::new(c, h, w, gout.data()[offset..offset + t.len()].to_vec())?;
                        offset += t.len();
                        accumulate(&mut adjoints, inp, part);
                    }
                }
                Op::Relu => {
                    let x = self.act(node.inputs[0]);
                    let (c, h, w) = x.shape();
                    let data = x
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut adjoints, node.inputs[0], Tensor::new(c, h, w, data)?);
                }
                Op::Sigmoid => {
                    let s = self.act(NodeId(i));
                    let (c, h, w) = s.shape();
                    let data = s
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect();
                    accumulate(&mut adjoints, node.inputs[0], Tensor::new(c, h, w, data)?);
                }
                Op::WeightedSum { coeffs } => {
                    let x = self.act(node.inputs[0]);
                    let (c, h, w) = x.shape();
                    let g = gout.item();
                    let data = coeffs.iter().map(|&cf| cf * g).collect();
                    accumulate(&mut adjoints, node.inputs[0], Tensor::new(c, h, w, data)?);
                }
                Op::MaskedBce { truth, mask } => {
                    let x = self.act(node.inputs[0]);
                    let gin = masked_bce_backward(x, truth, mask, gout.item());
                    accumulate(&mut adjoints, node.inputs[0], gin);
                }
                Op::MaskedDice { truth, mask } => {
                    let x = self.act(node.inputs[0]);
                    let gin = masked_dice_backward(x, truth, mask, gout.item());
                    accumulate(&mut adjoints, node.inputs[0], gin);
                }
                Op::CoupleLoss { w_bce, w_dice } => {
                    let g = gout.item();
                    accumulate(&mut adjoints, node.inputs[0], Tensor::scalar(*w_bce * g));
                    accumulate(&mut adjoints, node.inputs[1], Tensor::scalar(-*w_dice * g));
                }
            }
        }

        let input_grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .filter_map(|(i, _)| adjoints[i].take().map(|t| (NodeId(i), t)))
            .collect();
        Ok(Gradients { params: grads, input_grads })
    }
}

fn accumulate<T: Real>(adjoints: &mut [Option<Tensor<T>>], id: NodeId, grad: Tensor<T>) {
    match &mut adjoints[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

/// Valid row-major y/x ranges for a kernel offset, so inner loops run on
/// plain slices without per-pixel bounds tests.
#[inline]
fn shift_range(extent: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = ((extent as isize - delta).min(extent as isize)).max(0) as usize;
    (lo, hi)
}

fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_shape: (usize, usize, usize),
) -> Tensor<T> {
    let (c_in, h, w) = input.shape();
    let (c_out, _, _) = out_shape;
    let k = kernel_size(weight.len(), c_out, c_in);
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(c_out, h, w);
    for o in 0..c_out {
        let plane = out.plane_mut(o);
        plane.fill(bias[o]);
        for c in 0..c_in {
            let src_plane = input.plane(c);
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = shift_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let (x0, x1) = shift_range(w, dx);
                    if x0 >= x1 || y0 >= y1 {
                        continue;
                    }
                    let wv = weight[((o * c_in + c) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &src_plane[sy * w + (x0 as isize + dx) as usize..];
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn kernel_size(weight_len: usize, c_out: usize, c_in: usize) -> usize {
    let k2 = weight_len / (c_out * c_in);
    let k = (k2 as f64).sqrt().round() as usize;
    debug_assert_eq!(k * k * c_out * c_in, weight_len);
    k
}

fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    gout: &Tensor<T>,
    gin: &mut Tensor<T>,
    gweight: &mut [T],
    gbias: &mut [T],
) {
    let (c_in, h, w) = input.shape();
    let c_out = gout.channels();
    let k = kernel_size(weight.len(), c_out, c_in);
    let r = (k / 2) as isize;
    for o in 0..c_out {
        let gplane = gout.plane(o);
        let mut bsum = T::zero();
        for &g in gplane {
            bsum += g;
        }
        gbias[o] += bsum;
        for c in 0..c_in {
            let src_plane = input.plane(c);
            let gin_plane = gin.plane_mut(c);
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = shift_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let (x0, x1) = shift_range(w, dx);
                    if x0 >= x1 || y0 >= y1 {
                        continue;
                    }
                    let widx = ((o * c_in + c) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut wsum = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        let src = &src_plane[sy * w + sx..sy * w + sx + (x1 - x0)];
                        let gsrc = &gplane[y * w + x0..y * w + x1];
                        // d/d w: correlate grad-out with the shifted input
                        for (s, g) in src.iter().zip(gsrc) {
                            wsum += *s * *g;
                        }
                        // d/d input: scatter grad-out through the weight
                        let gdst = &mut gin_plane[sy * w + sx..sy * w + sx + (x1 - x0)];
                        for (d, g) in gdst.iter_mut().zip(gsrc) {
                            *d += wv * *g;
                        }
                    }
                    gweight[widx] += wsum;
                }
            }
        }
    }
}

fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut argmax = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let base = (2 * y) * w + 2 * x;
                // strict > keeps the first row-major cell on ties
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                let mut best_v = src[best];
                for &i in &candidates[1..] {
                    if src[i] > best_v {
                        best = i;
                        best_v = src[i];
                    }
                }
                dst[y * ow + x] = best_v;
                argmax[(ch * oh + y) * ow + x] = (ch * h * w + best) as u32;
            }
        }
    }
    (out, argmax)
}

fn upsample2_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                dst[(2 * y) * ow + 2 * x] = v;
                dst[(2 * y) * ow + 2 * x + 1] = v;
                dst[(2 * y + 1) * ow + 2 * x] = v;
                dst[(2 * y + 1) * ow + 2 * x + 1] = v;
            }
        }
    }
    out
}

fn masked_bce_backward<T: Real>(pred: &Tensor<T>, truth: &[T], mask: &[bool], gout: T) -> Tensor<T> {
    let lo = T::from_f64_lossy(BCE_CLAMP);
    let hi = T::one() - lo;
    let count = mask.iter().filter(|m| **m).count();
    let (c, h, w) = pred.shape();
    let mut gin = Tensor::zeros(c, h, w);
    if count == 0 {
        return gin;
    }
    let scale = gout / T::from_usize(count).unwrap();
    for (i, ((&p, &g), &m)) in pred.data().iter().zip(truth).zip(mask).enumerate() {
        if !m {
            continue;
        }
        // outside the clamp band the loss is locally constant in p
        if p < lo || p > hi {
            continue;
        }
        gin.data_mut()[i] = scale * (-g / p + (T::one() - g) / (T::one() - p));
    }
    gin
}

fn masked_dice_backward<T: Real>(pred: &Tensor<T>, truth: &[T], mask: &[bool], gout: T) -> Tensor<T> {
    let eps = T::from_f64_lossy(DICE_EPSILON);
    let two = T::from_f64_lossy(2.0);
    let mut inter = T::zero();
    let mut p_sum = T::zero();
    let mut g_sum = T::zero();
    for ((&p, &g), &m) in pred.data().iter().zip(truth).zip(mask) {
        if m {
            inter += p * g;
            p_sum += p;
            g_sum += g;
        }
    }
    let numer = two * inter + eps;
    let denom = p_sum + g_sum + eps;
    let (c, h, w) = pred.shape();
    let mut gin = Tensor::zeros(c, h, w);
    let inv_d2 = gout / (denom * denom);
    for (i, (&g, &m)) in truth.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        gin.data_mut()[i] = (two * g * denom - numer) * inv_d2;
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        crate::rng::stream(99, "nncore-tests", 0)
    }

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f64> {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(c, h, w, data).unwrap()
    }

    fn conv_params(
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> (ParamStore<f64>, SlotId, SlotId) {
        let mut params = ParamStore::new();
        let wdata = (0..c_out * c_in * k * k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w = params.add_slot("w", vec![c_out, c_in, k, k], wdata).unwrap();
        let bdata = (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b = params.add_slot("b", vec![c_out], bdata).unwrap();
        (params, w, b)
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut params = ParamStore::new();
        let w = params.add_slot("w", vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = params.add_slot("b", vec![1], vec![0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.input(1, 3, 4);
        let y = g.conv2d(x, &params, w, b).unwrap();
        let t = random_tensor(1, 3, 4, &mut rng());
        g.forward(&params, &[(x, &t)]).unwrap();
        assert_eq!(g.activation(y).unwrap().data(), t.data());
    }

    #[test]
    fn conv_zero_kernel_yields_bias() {
        let mut params = ParamStore::new();
        let w = params.add_slot("w", vec![2, 1, 3, 3], vec![0.0; 18]).unwrap();
        let b = params.add_slot("b", vec![2], vec![0.25, -0.5]).unwrap();
        let mut g = Graph::new();
        let x = g.input(1, 4, 4);
        let y = g.conv2d(x, &params, w, b).unwrap();
        let t = random_tensor(1, 4, 4, &mut rng());
        g.forward(&params, &[(x, &t)]).unwrap();
        let out = g.activation(y).unwrap();
        assert!(out.plane(0).iter().all(|&v| v == 0.25));
        assert!(out.plane(1).iter().all(|&v| v == -0.5));
    }

    /// Brute-force sliding-window cross-correlation, the conv oracle.
    fn conv_oracle(
        input: &Tensor<f64>,
        weight: &[f64],
        bias: &[f64],
        c_out: usize,
        k: usize,
    ) -> Tensor<f64> {
        let (c_in, h, w) = input.shape();
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(c_out, h, w);
        for o in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let sy = y + ky - r;
                                let sx = x + kx - r;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += input.plane(c)[sy as usize * w + sx as usize]
                                    * weight[((o * c_in + c) * k + ky as usize) * k + kx as usize];
                            }
                        }
                    }
                    out.plane_mut(o)[y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_brute_force_oracle() {
        let mut r = rng();
        for &(c_in, c_out, k, h, w) in &[(1usize, 1usize, 3usize, 3usize, 3usize), (3, 2, 3, 5, 4), (2, 3, 5, 6, 7), (1, 1, 1, 4, 4)] {
            let (params, ws, bs) = conv_params(c_out, c_in, k, &mut r);
            let mut g = Graph::new();
            let x = g.input(c_in, h, w);
            let y = g.conv2d(x, &params, ws, bs).unwrap();
            let t = random_tensor(c_in, h, w, &mut r);
            g.forward(&params, &[(x, &t)]).unwrap();
            let expect = conv_oracle(&t, &params.slot(ws).data, &params.slot(bs).data, c_out, k);
            for (a, b) in g.activation(y).unwrap().data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut r = rng();
        let (params, ws, bs0) = conv_params(2, 2, 3, &mut r);
        // linearity holds with zero bias
        let mut params = params;
        params.slot_mut(bs0).data.fill(0.0);
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.input(2, 4, 4);
            let y = g.conv2d(x, &params, ws, bs0).unwrap();
            g.forward(&params, &[(x, t)]).unwrap();
            g.activation(y).unwrap().clone()
        };
        let a = random_tensor(2, 4, 4, &mut r);
        let b = random_tensor(2, 4, 4, &mut r);
        let (ca, cb) = (0.7, -1.3);
        let mixed = Tensor::new(
            2,
            4,
            4,
            a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect(),
        )
        .unwrap();
        let lhs = run(&mixed);
        let ra = run(&a);
        let rb = run(&b);
        for ((l, x), y) in lhs.data().iter().zip(ra.data()).zip(rb.data()) {
            let expect = ca * x + cb * y;
            assert!((l - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn maxpool_matches_window_scan_and_routes_ties() {
        let mut r = rng();
        let t = random_tensor(2, 6, 4, &mut r);
        let (out, _) = maxpool2_forward(&t);
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..2 {
                    let window = [
                        t.plane(c)[(2 * y) * 4 + 2 * x],
                        t.plane(c)[(2 * y) * 4 + 2 * x + 1],
                        t.plane(c)[(2 * y + 1) * 4 + 2 * x],
                        t.plane(c)[(2 * y + 1) * 4 + 2 * x + 1],
                    ];
                    let m = window.iter().cloned().fold(f64::MIN, f64::max);
                    assert_eq!(out.plane(c)[y * 2 + x], m);
                }
            }
        }

        // constant input: gradient concentrates on the first cell of each window
        let c = Tensor::new(1, 2, 2, vec![0.5; 4]).unwrap();
        let (pooled, argmax) = maxpool2_forward(&c);
        assert_eq!(pooled.shape(), (1, 1, 1));
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 3, 4);
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn upsample_duplicates() {
        let t = Tensor::new(1, 1, 1, vec![0.3]).unwrap();
        let out = upsample2_forward(&t);
        assert_eq!(out.shape(), (1, 2, 2));
        assert!(out.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn concat_orders_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.input(1, 2, 2);
        let b = g.input(2, 2, 2);
        let cat = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(cat), (3, 2, 2));
        let ta = Tensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let tb = Tensor::new(2, 2, 2, vec![2.0; 8]).unwrap();
        g.forward(&ParamStore::new(), &[(a, &ta), (b, &tb)]).unwrap();
        let out = g.activation(cat).unwrap();
        assert!(out.plane(0).iter().all(|&v| v == 1.0));
        assert!(out.plane(1).iter().all(|&v| v == 2.0));
        assert!(out.plane(2).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input(1, 2, 2);
        let b = g.input(1, 3, 2);
        assert!(g.concat_channels(a, b).is_err());
    }

    #[test]
    fn relu_and_sigmoid_pointwise_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 1, 3);
        let r = g.relu(x);
        let s = g.sigmoid(x);
        let t = Tensor::new(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        g.forward(&ParamStore::new(), &[(x, &t)]).unwrap();
        assert_eq!(g.activation(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let sv = g.activation(s).unwrap().data().to_vec();
        assert!((sv[1] - 0.5).abs() < 1e-15);
        assert!(sv[0] < 0.5 && sv[2] > 0.5);
    }

    #[test]
    fn backward_of_linear_sink_is_coefficients() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 2, 2);
        let coeffs = vec![1.0, 1.0, 1.0, 1.0];
        let _ = g.weighted_sum(x, coeffs).unwrap();
        let t = random_tensor(1, 2, 2, &mut rng());
        g.forward(&ParamStore::new(), &[(x, &t)]).unwrap();
        let grads = g.backward(&ParamStore::new()).unwrap();
        assert_eq!(grads.input_grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_twice_without_forward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 1, 1);
        let _ = g.weighted_sum(x, vec![1.0]).unwrap();
        let t = Tensor::scalar(0.5);
        g.forward(&ParamStore::new(), &[(x, &t)]).unwrap();
        g.backward(&ParamStore::new()).unwrap();
        assert!(matches!(g.backward(&ParamStore::new()), Err(NnError::GraphState(_))));
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 1, 1);
        let _ = g.weighted_sum(x, vec![1.0]).unwrap();
        assert!(matches!(g.backward(&ParamStore::new()), Err(NnError::GraphState(_))));
    }

    #[test]
    fn ops_stay_finite_on_large_inputs() {
        let mut r = rng();
        let data: Vec<f64> = (0..4 * 8 * 8).map(|_| r.gen_range(-1e3..1e3)).collect();
        let t = Tensor::new(4, 8, 8, data).unwrap();
        let mut params = ParamStore::new();
        let wdata: Vec<f64> = (0..2 * 4 * 9).map(|_| r.gen_range(-1e3..1e3)).collect();
        let w = params.add_slot("w", vec![2, 4, 3, 3], wdata).unwrap();
        let b = params.add_slot("b", vec![2], vec![1e3, -1e3]).unwrap();
        let mut g = Graph::new();
        let x = g.input(4, 8, 8);
        let c = g.conv2d(x, &params, w, b).unwrap();
        let rl = g.relu(c);
        let p = g.maxpool2(rl).unwrap();
        let u = g.upsample2(p);
        let s = g.sigmoid(u);
        g.forward(&params, &[(x, &t)]).unwrap();
        assert!(g.activation(s).unwrap().data().iter().all(|v| v.is_finite()));
    }
}
