//! Reverse-mode autodiff tape.
//!
//! The tape is a recorded program: every primitive application appends a node
//! holding its op, input ids, and the produced value. Backward walks the
//! nodes in reverse exactly once, accumulating f64 gradient buffers that are
//! rounded to f32 only for the leaves that asked for gradients.
//!
//! Because the node list is a complete description of the forward pass, it
//! can also be replayed in f64 with perturbed leaf values — that shadow path
//! is what the finite-difference gradient checks evaluate.

use super::kernels;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) u32);

impl ValueId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        stride: (usize, usize),
        padding: (usize, usize),
    },
    BilinearUpsample {
        ratio: usize,
    },
    ChannelMaxSqueeze {
        argmax: Vec<u32>,
    },
    GlobalAvgPool,
    Add,
    Mul,
    ConcatChannels,
    Relu,
    Sigmoid,
    SoftmaxChannels,
    BatchNormTrain {
        eps: f64,
    },
    BatchNormEval {
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Sum,
    Scale {
        alpha: f64,
    },
    CropSpatial,
    MaskedCrossEntropy {
        targets: Vec<u8>,
        weights: Vec<f32>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<ValueId>,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf value id.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&[f32]> {
        self.grads
            .get(id.idx())
            .and_then(|g| g.as_ref().map(|v| v.as_slice()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.idx()]
    }

    pub fn shape(&self, id: ValueId) -> Shape {
        self.values[id.idx()].shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len() as u32);
        self.nodes.push(Node { op, inputs });
        self.values.push(value);
        id
    }

    /// Record an input value. Only leaves with `requires_grad` receive an
    /// entry in the [`Gradients`] result.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.push(Op::Leaf { requires_grad }, vec![], value)
    }

    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.leaf(value, false)
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        matches!(
            self.nodes[id.idx()].op,
            Op::Leaf {
                requires_grad: true
            }
        )
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `weight` has shape (c_out, c_in, k_h, k_w); `bias`, when present, is a
    /// (1, c_out, 1, 1) value.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if xs.c != ws.c {
            return Err(Error::shape(
                "conv2d input channels",
                format!("{} (kernel c_in)", ws.c),
                format!("{} (input c)", xs.c),
            ));
        }
        if ws.h > xs.h + 2 * padding.0 {
            return Err(Error::shape(
                "conv2d kernel height",
                format!("<= {} (h + 2*pad_h)", xs.h + 2 * padding.0),
                ws.h.to_string(),
            ));
        }
        if ws.w > xs.w + 2 * padding.1 {
            return Err(Error::shape(
                "conv2d kernel width",
                format!("<= {} (w + 2*pad_w)", xs.w + 2 * padding.1),
                ws.w.to_string(),
            ));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::shape(
                    "conv2d bias",
                    format!("1x{}x1x1", ws.n),
                    bs.to_string(),
                ));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data());
        let (out, os) = kernels::conv2d_fwd(
            self.value(x).data(),
            xs,
            self.value(weight).data(),
            ws,
            bias_data,
            stride,
            padding,
        );
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(
            Op::Conv2d { stride, padding },
            inputs,
            Tensor::new(os, out)?,
        ))
    }

    /// Integer-ratio bilinear upsampling with half-pixel-center alignment.
    pub fn bilinear_upsample(&mut self, x: ValueId, ratio: usize) -> Result<ValueId> {
        if ratio == 0 {
            return Err(Error::InvalidArgument(
                "bilinear upsample ratio must be >= 1".into(),
            ));
        }
        let xs = self.shape(x);
        let (out, os) = kernels::bilinear_upsample_fwd(self.value(x).data(), xs, ratio);
        Ok(self.push(
            Op::BilinearUpsample { ratio },
            vec![x],
            Tensor::new(os, out)?,
        ))
    }

    /// Max over the channel axis; gradient routes to the argmax channel
    /// (lowest index on ties).
    pub fn channel_max_squeeze(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        let (out, argmax, os) = kernels::channel_max_squeeze_fwd(self.value(x).data(), xs);
        Ok(self.push(
            Op::ChannelMaxSqueeze { argmax },
            vec![x],
            Tensor::new(os, out)?,
        ))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        let (out, os) = kernels::global_avg_pool_fwd(self.value(x).data(), xs);
        Ok(self.push(Op::GlobalAvgPool, vec![x], Tensor::new(os, out)?))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add operands", sa.to_string(), sb.to_string()));
        }
        let out = kernels::add_fwd(self.value(a).data(), self.value(b).data());
        Ok(self.push(Op::Add, vec![a, b], Tensor::new(sa, out)?))
    }

    /// Elementwise product. Either operand may have extent 1 on any of the
    /// c/h/w axes (or n), in which case it broadcasts against the other.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (da, db, name) in [
            (sa.n, sb.n, "n"),
            (sa.c, sb.c, "c"),
            (sa.h, sb.h, "h"),
            (sa.w, sb.w, "w"),
        ] {
            if da != db && da != 1 && db != 1 {
                return Err(Error::shape(
                    format!("mul operand axis {name}"),
                    sa.to_string(),
                    sb.to_string(),
                ));
            }
        }
        let (out, os) = kernels::mul_fwd(self.value(a).data(), sa, self.value(b).data(), sb);
        Ok(self.push(Op::Mul, vec![a, b], Tensor::new(os, out)?))
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]);
        for &p in &parts[1..] {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(
                    "concat_channels operand (n, h, w)",
                    first.to_string(),
                    s.to_string(),
                ));
            }
        }
        let slices: Vec<(&[f32], Shape)> = parts
            .iter()
            .map(|&p| (self.values[p.idx()].data(), self.values[p.idx()].shape()))
            .collect();
        let (out, os) = kernels::concat_channels_fwd(&slices);
        Ok(self.push(Op::ConcatChannels, parts.to_vec(), Tensor::new(os, out)?))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let xs = self.shape(x);
        let out = kernels::relu_fwd(self.value(x).data());
        self.push(Op::Relu, vec![x], Tensor::new(xs, out).expect("same shape"))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let xs = self.shape(x);
        let out = kernels::sigmoid_fwd(self.value(x).data());
        self.push(
            Op::Sigmoid,
            vec![x],
            Tensor::new(xs, out).expect("same shape"),
        )
    }

    /// Softmax over the channel axis, independently per spatial site.
    pub fn softmax_channels(&mut self, x: ValueId) -> ValueId {
        let xs = self.shape(x);
        let out = kernels::softmax_channels_fwd(self.value(x).data(), xs);
        self.push(
            Op::SoftmaxChannels,
            vec![x],
            Tensor::new(xs, out).expect("same shape"),
        )
    }

    /// Train-mode batch norm: moments computed from the batch, gradients flow
    /// through them. `gamma`/`beta` are (1, c, 1, 1) values.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let xs = self.shape(x);
        self.check_bn_params(xs, gamma, beta)?;
        let (mean, var) = kernels::batch_moments(self.value(x).data(), xs);
        let out = kernels::batch_norm_apply(
            self.value(x).data(),
            xs,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            eps,
        );
        Ok(self.push(
            Op::BatchNormTrain { eps },
            vec![x, gamma, beta],
            Tensor::new(xs, out)?,
        ))
    }

    /// Eval-mode batch norm: supplied moments are captured as constants.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &[f32],
        var: &[f32],
        eps: f64,
    ) -> Result<ValueId> {
        let xs = self.shape(x);
        self.check_bn_params(xs, gamma, beta)?;
        if mean.len() != xs.c || var.len() != xs.c {
            return Err(Error::shape(
                "batch norm running stats",
                xs.c.to_string(),
                format!("{}/{}", mean.len(), var.len()),
            ));
        }
        let mean: Vec<f64> = mean.iter().map(|&v| v as f64).collect();
        let var: Vec<f64> = var.iter().map(|&v| v as f64).collect();
        let out = kernels::batch_norm_apply(
            self.value(x).data(),
            xs,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            eps,
        );
        Ok(self.push(
            Op::BatchNormEval { eps, mean, var },
            vec![x, gamma, beta],
            Tensor::new(xs, out)?,
        ))
    }

    fn check_bn_params(&self, xs: Shape, gamma: ValueId, beta: ValueId) -> Result<()> {
        let want = Shape::new(1, xs.c, 1, 1);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(id);
            if s != want {
                return Err(Error::shape(
                    format!("batch norm {name}"),
                    want.to_string(),
                    s.to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Sum of all entries, as a 1x1x1x1 scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let v = kernels::sum_fwd(self.value(x).data());
        self.push(
            Op::Sum,
            vec![x],
            Tensor::new(Shape::new(1, 1, 1, 1), vec![v]).expect("scalar"),
        )
    }

    pub fn scale(&mut self, x: ValueId, alpha: f64) -> ValueId {
        let xs = self.shape(x);
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| (v as f64 * alpha) as f32)
            .collect();
        self.push(
            Op::Scale { alpha },
            vec![x],
            Tensor::new(xs, out).expect("same shape"),
        )
    }

    /// Keep the top-left (out_h, out_w) spatial window.
    pub fn crop_spatial(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let xs = self.shape(x);
        if out_h > xs.h || out_w > xs.w || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {out_h}x{out_w} invalid for input {xs}"
            )));
        }
        let (out, os) = kernels::crop_spatial_fwd(self.value(x).data(), xs, out_h, out_w);
        Ok(self.push(Op::CropSpatial, vec![x], Tensor::new(os, out)?))
    }

    /// Weighted pixel-wise softmax cross-entropy against integer targets.
    ///
    /// `targets` and `weights` are flat (n, h, w) maps. A pixel contributes
    /// `weight * -log p(target)`; ignore pixels must carry zero weight.
    pub fn masked_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: Vec<u8>,
        weights: Vec<f32>,
    ) -> Result<ValueId> {
        let ls = self.shape(logits);
        let pixels = ls.n * ls.h * ls.w;
        if targets.len() != pixels || weights.len() != pixels {
            return Err(Error::shape(
                "cross entropy target map",
                pixels.to_string(),
                format!("{}/{}", targets.len(), weights.len()),
            ));
        }
        for (p, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if t == kernels::IGNORE_LABEL {
                if w != 0.0 {
                    return Err(Error::Logic(format!(
                        "ignore pixel {p} carries nonzero loss weight"
                    )));
                }
            } else if (t as usize) >= ls.c {
                return Err(Error::Data(format!(
                    "label {t} at pixel {p} out of range for {} classes",
                    ls.c
                )));
            }
        }
        let loss =
            kernels::masked_cross_entropy_fwd(self.value(logits).data(), ls, &targets, &weights);
        Ok(self.push(
            Op::MaskedCrossEntropy { targets, weights },
            vec![logits],
            Tensor::new(Shape::new(1, 1, 1, 1), vec![loss as f32])?,
        ))
    }

    /// Reverse pass from a scalar loss. Returns f32 gradients for every leaf
    /// recorded with `requires_grad`.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        if self.shape(loss).count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        acc[loss.idx()] = Some(vec![1.0]);

        for k in (0..=loss.idx()).rev() {
            let Some(g) = acc[k].take() else { continue };
            let node = &self.nodes[k];
            let out_val = &self.values[k];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        acc[k] = Some(g);
                    }
                    continue;
                }
                Op::Conv2d { stride, padding } => {
                    let x = node.inputs[0];
                    let w = node.inputs[1];
                    let (dx, dw, db) = kernels::conv2d_bwd(
                        self.values[x.idx()].data(),
                        self.values[x.idx()].shape(),
                        self.values[w.idx()].data(),
                        self.values[w.idx()].shape(),
                        node.inputs.len() == 3,
                        *stride,
                        *padding,
                        &g,
                    );
                    accumulate(&mut acc, x, dx);
                    accumulate(&mut acc, w, dw);
                    if let Some(db) = db {
                        accumulate(&mut acc, node.inputs[2], db);
                    }
                }
                Op::BilinearUpsample { ratio } => {
                    let x = node.inputs[0];
                    let dx =
                        kernels::bilinear_upsample_bwd(self.values[x.idx()].shape(), *ratio, &g);
                    accumulate(&mut acc, x, dx);
                }
                Op::ChannelMaxSqueeze { argmax } => {
                    let x = node.inputs[0];
                    let dx =
                        kernels::channel_max_squeeze_bwd(self.values[x.idx()].shape(), argmax, &g);
                    accumulate(&mut acc, x, dx);
                }
                Op::GlobalAvgPool => {
                    let x = node.inputs[0];
                    let dx = kernels::global_avg_pool_bwd(self.values[x.idx()].shape(), &g);
                    accumulate(&mut acc, x, dx);
                }
                Op::Add => {
                    accumulate(&mut acc, node.inputs[0], g.clone());
                    accumulate(&mut acc, node.inputs[1], g);
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (da, db) = kernels::mul_bwd(
                        self.values[a.idx()].data(),
                        self.values[a.idx()].shape(),
                        self.values[b.idx()].data(),
                        self.values[b.idx()].shape(),
                        &g,
                    );
                    accumulate(&mut acc, a, da);
                    accumulate(&mut acc, b, db);
                }
                Op::ConcatChannels => {
                    let shapes: Vec<Shape> = node
                        .inputs
                        .iter()
                        .map(|&i| self.values[i.idx()].shape())
                        .collect();
                    let grads = kernels::concat_channels_bwd(&shapes, &g);
                    for (&input, dg) in node.inputs.iter().zip(grads) {
                        accumulate(&mut acc, input, dg);
                    }
                }
                Op::Relu => {
                    let x = node.inputs[0];
                    let dx = kernels::relu_bwd(self.values[x.idx()].data(), &g);
                    accumulate(&mut acc, x, dx);
                }
                Op::Sigmoid => {
                    let dx = kernels::sigmoid_bwd(out_val.data(), &g);
                    accumulate(&mut acc, node.inputs[0], dx);
                }
                Op::SoftmaxChannels => {
                    let dx = kernels::softmax_channels_bwd(out_val.data(), out_val.shape(), &g);
                    accumulate(&mut acc, node.inputs[0], dx);
                }
                Op::BatchNormTrain { eps } => {
                    let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let (dx, dgamma, dbeta) = kernels::batch_norm_train_bwd(
                        self.values[x.idx()].data(),
                        self.values[x.idx()].shape(),
                        self.values[gamma.idx()].data(),
                        *eps,
                        &g,
                    );
                    accumulate(&mut acc, x, dx);
                    accumulate(&mut acc, gamma, dgamma);
                    accumulate(&mut acc, beta, dbeta);
                }
                Op::BatchNormEval { eps, mean, var } => {
                    let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let (dx, dgamma, dbeta) = kernels::batch_norm_eval_bwd(
                        self.values[x.idx()].data(),
                        self.values[x.idx()].shape(),
                        self.values[gamma.idx()].data(),
                        mean,
                        var,
                        *eps,
                        &g,
                    );
                    accumulate(&mut acc, x, dx);
                    accumulate(&mut acc, gamma, dgamma);
                    accumulate(&mut acc, beta, dbeta);
                }
                Op::Sum => {
                    let x = node.inputs[0];
                    let n = self.values[x.idx()].shape().count();
                    accumulate(&mut acc, x, vec![g[0]; n]);
                }
                Op::Scale { alpha } => {
                    let dx: Vec<f64> = g.iter().map(|&v| v * alpha).collect();
                    accumulate(&mut acc, node.inputs[0], dx);
                }
                Op::CropSpatial => {
                    let x = node.inputs[0];
                    let os = out_val.shape();
                    let dx =
                        kernels::crop_spatial_bwd(self.values[x.idx()].shape(), os.h, os.w, &g);
                    accumulate(&mut acc, x, dx);
                }
                Op::MaskedCrossEntropy { targets, weights } => {
                    let x = node.inputs[0];
                    let dx = kernels::masked_cross_entropy_bwd(
                        self.values[x.idx()].data(),
                        self.values[x.idx()].shape(),
                        targets,
                        weights,
                        g[0],
                    );
                    accumulate(&mut acc, x, dx);
                }
            }
        }

        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(k, g)| match (&self.nodes[k].op, g) {
                (
                    Op::Leaf {
                        requires_grad: true,
                    },
                    Some(g),
                ) => Some(g.iter().map(|&v| v as f32).collect()),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Re-execute the recorded program in f64, with leaf values optionally
    /// overridden, and return the value of `target`.
    ///
    /// Discrete branch choices (relu masks, channel-max argmax) are replayed
    /// as recorded, so the replay evaluates exactly the piecewise branch the
    /// backward pass differentiates; finite differences of it are therefore
    /// meaningful even when a perturbation would otherwise cross a kink.
    pub fn replay_f64(&self, overrides: &[(ValueId, &[f64])], target: ValueId) -> Vec<f64> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(target.idx() + 1);
        for k in 0..=target.idx() {
            let node = &self.nodes[k];
            let v = match &node.op {
                Op::Leaf { .. } => {
                    match overrides.iter().find(|(id, _)| id.idx() == k) {
                        Some((_, data)) => data.to_vec(),
                        None => self.values[k].to_f64(),
                    }
                }
                Op::Conv2d { stride, padding } => {
                    let x = node.inputs[0].idx();
                    let w = node.inputs[1].idx();
                    let bias = node.inputs.get(2).map(|b| vals[b.idx()].as_slice());
                    kernels::conv2d_fwd(
                        &vals[x],
                        self.values[x].shape(),
                        &vals[w],
                        self.values[w].shape(),
                        bias,
                        *stride,
                        *padding,
                    )
                    .0
                }
                Op::BilinearUpsample { ratio } => {
                    let x = node.inputs[0].idx();
                    kernels::bilinear_upsample_fwd(&vals[x], self.values[x].shape(), *ratio).0
                }
                Op::ChannelMaxSqueeze { argmax } => {
                    // Replay the branch chosen at record time so the replayed
                    // function matches the one backward differentiates.
                    let x = node.inputs[0].idx();
                    let xs = self.values[x].shape();
                    let os = Shape::new(xs.n, 1, xs.h, xs.w);
                    let mut out = Vec::with_capacity(os.count());
                    for n in 0..xs.n {
                        for y in 0..xs.h {
                            for xx in 0..xs.w {
                                let c = argmax[os.at(n, 0, y, xx)] as usize;
                                out.push(vals[x][xs.at(n, c, y, xx)]);
                            }
                        }
                    }
                    out
                }
                Op::GlobalAvgPool => {
                    let x = node.inputs[0].idx();
                    kernels::global_avg_pool_fwd(&vals[x], self.values[x].shape()).0
                }
                Op::Add => kernels::add_fwd(&vals[node.inputs[0].idx()], &vals[node.inputs[1].idx()]),
                Op::Mul => {
                    let (a, b) = (node.inputs[0].idx(), node.inputs[1].idx());
                    kernels::mul_fwd(
                        &vals[a],
                        self.values[a].shape(),
                        &vals[b],
                        self.values[b].shape(),
                    )
                    .0
                }
                Op::ConcatChannels => {
                    let parts: Vec<(&[f64], Shape)> = node
                        .inputs
                        .iter()
                        .map(|&i| (vals[i.idx()].as_slice(), self.values[i.idx()].shape()))
                        .collect();
                    kernels::concat_channels_fwd(&parts).0
                }
                Op::Relu => {
                    // Frozen activation mask from the recorded forward, for
                    // the same reason as the max squeeze above.
                    let x = node.inputs[0].idx();
                    self.values[x]
                        .data()
                        .iter()
                        .zip(&vals[x])
                        .map(|(&orig, &v)| if orig > 0.0 { v } else { 0.0 })
                        .collect()
                }
                Op::Sigmoid => kernels::sigmoid_fwd(&vals[node.inputs[0].idx()]),
                Op::SoftmaxChannels => {
                    let x = node.inputs[0].idx();
                    kernels::softmax_channels_fwd(&vals[x], self.values[x].shape())
                }
                Op::BatchNormTrain { eps } => {
                    let (x, gamma, beta) =
                        (node.inputs[0].idx(), node.inputs[1].idx(), node.inputs[2].idx());
                    let xs = self.values[x].shape();
                    let (mean, var) = kernels::batch_moments(&vals[x], xs);
                    kernels::batch_norm_apply(
                        &vals[x], xs, &vals[gamma], &vals[beta], &mean, &var, *eps,
                    )
                }
                Op::BatchNormEval { eps, mean, var } => {
                    let (x, gamma, beta) =
                        (node.inputs[0].idx(), node.inputs[1].idx(), node.inputs[2].idx());
                    kernels::batch_norm_apply(
                        &vals[x],
                        self.values[x].shape(),
                        &vals[gamma],
                        &vals[beta],
                        mean,
                        var,
                        *eps,
                    )
                }
                Op::Sum => vec![kernels::sum_fwd(&vals[node.inputs[0].idx()])],
                Op::Scale { alpha } => vals[node.inputs[0].idx()]
                    .iter()
                    .map(|&v| v * alpha)
                    .collect(),
                Op::CropSpatial => {
                    let x = node.inputs[0].idx();
                    let os = self.values[k].shape();
                    kernels::crop_spatial_fwd(&vals[x], self.values[x].shape(), os.h, os.w).0
                }
                Op::MaskedCrossEntropy { targets, weights } => {
                    let x = node.inputs[0].idx();
                    vec![kernels::masked_cross_entropy_fwd(
                        &vals[x],
                        self.values[x].shape(),
                        targets,
                        weights,
                    )]
                }
            };
            vals.push(v);
        }
        vals.pop().expect("target computed")
    }
}

fn accumulate(acc: &mut [Option<Vec<f64>>], id: ValueId, grad: Vec<f64>) {
    match &mut acc[id.idx()] {
        Some(buf) => {
            for (dst, src) in buf.iter_mut().zip(grad) {
                *dst += src;
            }
        }
        slot => *slot = Some(grad),
    }
}
