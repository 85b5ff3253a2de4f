//! Parameterized layers: named parameter registry, conv + batch-norm + relu
//! stacks, and the squeeze-excite channel attention block.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::{batch_moments, Shape, Tape, Tensor, ValueId};

/// Momentum for the batch-norm running statistics update.
const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution weight; initialized He-normal with std = sqrt(2 / fan_in).
    ConvWeight { fan_in: usize },
    /// Bias vector; initialized to zero.
    Bias,
    /// Batch-norm scale; initialized to one, exempt from weight decay.
    BnScale,
    /// Batch-norm shift; initialized to zero, exempt from weight decay.
    BnShift,
    /// Running mean buffer; not learnable.
    BnRunningMean,
    /// Running variance buffer; not learnable.
    BnRunningVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn weight_decay_applies(self) -> bool {
        match self {
            ParamKind::ConvWeight { .. } | ParamKind::Bias => true,
            ParamKind::BnScale | ParamKind::BnShift => false,
            ParamKind::BnRunningMean | ParamKind::BnRunningVar => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct ParamEntry {
    name: String,
    kind: ParamKind,
    value: Tensor,
    grad: Option<Vec<f32>>,
    velocity: Vec<f32>,
    updates: u64,
}

/// Ordered registry of named tensors: learnable parameters plus batch-norm
/// buffers. Registration order is the canonical iteration and initialization
/// order, so identical construction + seed gives identical bytes.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    initialized: bool,
    warned_uninit_bn: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Shape, kind: ParamKind) -> Result<ParamId> {
        if self.initialized {
            return Err(Error::Config(format!(
                "cannot register `{name}` after initialization"
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value: Tensor::zeros(shape),
            grad: None,
            velocity: vec![0.0; shape.count()],
            updates: 0,
        });
        Ok(id)
    }

    /// Fill every registered tensor from its kind's initialization scheme,
    /// fully determined by `seed`.
    pub fn initialize(&mut self, seed: u64) -> Result<()> {
        if self.initialized {
            return Err(Error::Config("parameter store already initialized".into()));
        }
        let mut rng = Rng64::new(seed);
        for entry in &mut self.entries {
            let data = entry.value.data_mut();
            match entry.kind {
                ParamKind::ConvWeight { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in data.iter_mut() {
                        *v = (rng.normal() * std) as f32;
                    }
                }
                ParamKind::Bias | ParamKind::BnShift | ParamKind::BnRunningMean => {
                    data.fill(0.0);
                }
                ParamKind::BnScale | ParamKind::BnRunningVar => {
                    data.fill(1.0);
                }
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Mark the store initialized without drawing values (checkpoint load).
    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if value.shape() != entry.value.shape() {
            return Err(Error::shape(
                format!("set_value for `{}`", entry.name),
                entry.value.shape().to_string(),
                value.shape().to_string(),
            ));
        }
        entry.value = value;
        entry.updates += 1;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f32]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Vec<f32>) {
        self.entries[id.0].grad = Some(grad);
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn velocity_mut(&mut self, id: ParamId) -> &mut Vec<f32> {
        &mut self.entries[id.0].velocity
    }

    pub fn velocity(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].velocity
    }

    pub(crate) fn set_velocity(&mut self, id: ParamId, v: Vec<f32>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if v.len() != entry.velocity.len() {
            return Err(Error::shape(
                format!("velocity for `{}`", entry.name),
                entry.velocity.len().to_string(),
                v.len().to_string(),
            ));
        }
        entry.velocity = v;
        Ok(())
    }

    pub(crate) fn value_mut_raw(&mut self, id: ParamId) -> &mut [f32] {
        self.entries[id.0].value.data_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of learnable scalar values in the store.
    pub fn learnable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.learnable())
            .map(|e| e.value.shape().count())
            .sum()
    }

    fn updates(&self, id: ParamId) -> u64 {
        self.entries[id.0].updates
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated as a side effect.
    Train,
    /// Running statistics; a pure function of (params, stats, input).
    Eval,
    /// Batch statistics without the running-stat update: the small-batch
    /// fallback used when frozen statistics would misrepresent single
    /// samples.
    EvalBatchStats,
}

/// One forward pass: the tape being recorded, the parameter store backing it,
/// and the param-to-leaf binding the optimizer will need.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    bound: HashMap<ParamId, ValueId>,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        Fwd {
            tape,
            store,
            mode,
            bound: HashMap::new(),
        }
    }

    /// Leaf value for a parameter; memoized so a parameter shared between
    /// call sites maps to a single tape leaf.
    pub fn param(&mut self, id: ParamId) -> ValueId {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let requires_grad = self.store.kind(id).learnable();
        let v = self.tape.leaf(self.store.value(id).clone(), requires_grad);
        self.bound.insert(id, v);
        v
    }

    pub fn bindings(&self) -> Vec<(ParamId, ValueId)> {
        let mut b: Vec<(ParamId, ValueId)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        b.sort_by_key(|(p, _)| p.index());
        b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// Construction recipe for a [`ConvLayer`].
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub norm: bool,
    pub activation: Activation,
    pub bias: bool,
}

impl ConvSpec {
    /// Conv -> BatchNorm -> ReLU with a square kernel and same-resolution
    /// padding; bias off because the norm absorbs it.
    pub fn bn_relu(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            norm: true,
            activation: Activation::Relu,
            bias: false,
        }
    }

    /// Raw linear convolution with bias, no norm, no activation.
    pub fn linear(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            norm: false,
            activation: Activation::None,
            bias: true,
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_kernel(mut self, kernel: (usize, usize), padding: (usize, usize)) -> Self {
        self.kernel = kernel;
        self.padding = padding;
        self
    }

    pub fn with_norm(mut self, norm: bool) -> Self {
        self.norm = norm;
        if !norm {
            self.bias = true;
        }
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }
}

struct BnParams {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

/// Convolution with optional batch norm and relu.
pub struct ConvLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    bn: Option<BnParams>,
    spec: ConvSpec,
}

impl ConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        if spec.c_in == 0 || spec.c_out == 0 || spec.kernel.0 == 0 || spec.kernel.1 == 0 {
            return Err(Error::Config(format!(
                "conv layer `{name}` has a zero extent"
            )));
        }
        let fan_in = spec.c_in * spec.kernel.0 * spec.kernel.1;
        let weight = store.register(
            &format!("{name}.weight"),
            Shape::new(spec.c_out, spec.c_in, spec.kernel.0, spec.kernel.1),
            ParamKind::ConvWeight { fan_in },
        )?;
        let vec_shape = Shape::new(1, spec.c_out, 1, 1);
        let bias = if spec.bias {
            Some(store.register(&format!("{name}.bias"), vec_shape, ParamKind::Bias)?)
        } else {
            None
        };
        let bn = if spec.norm {
            Some(BnParams {
                gamma: store.register(&format!("{name}.bn.scale"), vec_shape, ParamKind::BnScale)?,
                beta: store.register(&format!("{name}.bn.shift"), vec_shape, ParamKind::BnShift)?,
                run_mean: store.register(
                    &format!("{name}.bn.running_mean"),
                    vec_shape,
                    ParamKind::BnRunningMean,
                )?,
                run_var: store.register(
                    &format!("{name}.bn.running_var"),
                    vec_shape,
                    ParamKind::BnRunningVar,
                )?,
            })
        } else {
            None
        };
        Ok(ConvLayer { weight, bias, bn, spec })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    /// Batch-norm scale parameter, when the layer carries a norm.
    pub fn bn_scale_id(&self) -> Option<ParamId> {
        self.bn.as_ref().map(|bn| bn.gamma)
    }

    pub fn forward(&self, fwd: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let w = fwd.param(self.weight);
        let b = self.bias.map(|id| fwd.param(id));
        let mut y = fwd
            .tape
            .conv2d(x, w, b, self.spec.stride, self.spec.padding)?;
        if let Some(bn) = &self.bn {
            let gamma = fwd.param(bn.gamma);
            let beta = fwd.param(bn.beta);
            match fwd.mode {
                Mode::Train => {
                    let (mean, var) = batch_moments(fwd.tape.value(y));
                    y = fwd.tape.batch_norm_train(y, gamma, beta, BN_EPS)?;
                    self.update_running_stats(fwd.store, bn, &mean, &var)?;
                }
                Mode::EvalBatchStats => {
                    y = fwd.tape.batch_norm_train(y, gamma, beta, BN_EPS)?;
                }
                Mode::Eval => {
                    if fwd.store.updates(bn.run_mean) == 0 && !fwd.store.warned_uninit_bn {
                        fwd.store.warned_uninit_bn = true;
                        eprintln!(
                            "warning: eval before any training step; batch norm uses \
                             initialization statistics (mean 0, var 1)"
                        );
                    }
                    let mean = fwd.store.value(bn.run_mean).data().to_vec();
                    let var = fwd.store.value(bn.run_var).data().to_vec();
                    y = fwd.tape.batch_norm_eval(y, gamma, beta, &mean, &var, BN_EPS)?;
                }
            }
        }
        Ok(match self.spec.activation {
            Activation::None => y,
            Activation::Relu => fwd.tape.relu(y),
        })
    }

    fn update_running_stats(
        &self,
        store: &mut ParamStore,
        bn: &BnParams,
        mean: &[f64],
        var: &[f64],
    ) -> Result<()> {
        let c = mean.len();
        let blend = |old: &[f32], new: &[f64]| -> Vec<f32> {
            old.iter()
                .zip(new)
                .map(|(&o, &n)| ((1.0 - BN_MOMENTUM) * o as f64 + BN_MOMENTUM * n) as f32)
                .collect()
        };
        let new_mean = blend(store.value(bn.run_mean).data(), mean);
        let new_var = blend(store.value(bn.run_var).data(), var);
        store.set_value(bn.run_mean, Tensor::new(Shape::new(1, c, 1, 1), new_mean)?)?;
        store.set_value(bn.run_var, Tensor::new(Shape::new(1, c, 1, 1), new_var)?)?;
        Ok(())
    }
}

/// Squeeze-excite channel attention: global average pool, two 1x1 convs with
/// a relu bottleneck, sigmoid gate, broadcast multiply.
pub struct ChannelAttention {
    reduce: ConvLayer,
    expand: ConvLayer,
    channels: usize,
}

impl ChannelAttention {
    pub const DEFAULT_REDUCTION: usize = 4;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("attention reduction ratio must be >= 1".into()));
        }
        let bottleneck = (channels / reduction).max(1);
        let reduce = ConvLayer::new(
            store,
            &format!("{name}.reduce"),
            ConvSpec::linear(channels, bottleneck, 1).with_activation(Activation::Relu),
        )?;
        let expand = ConvLayer::new(
            store,
            &format!("{name}.expand"),
            ConvSpec::linear(bottleneck, channels, 1),
        )?;
        Ok(ChannelAttention {
            reduce,
            expand,
            channels,
        })
    }

    /// The (n, c, 1, 1) gate s = sigmoid(conv(relu(conv(gap(x))))).
    pub fn gate(&self, fwd: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let pooled = fwd.tape.global_avg_pool(x)?;
        let squeezed = self.reduce.forward(fwd, pooled)?;
        let expanded = self.expand.forward(fwd, squeezed)?;
        Ok(fwd.tape.sigmoid(expanded))
    }

    /// x reweighted per channel by the gate.
    pub fn forward(&self, fwd: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let xs = fwd.tape.shape(x);
        if xs.c != self.channels {
            return Err(Error::shape(
                "channel attention input",
                self.channels.to_string(),
                xs.c.to_string(),
            ));
        }
        let s = self.gate(fwd, x)?;
        fwd.tape.mul(x, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;
    use crate::tensor::check_gradient;

    fn rand_tensor(shape: Shape, rng: &mut Rng64) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32)
    }

    #[test]
    fn plain_layer_reduces_to_conv2d() {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(
            &mut store,
            "c",
            ConvSpec {
                c_in: 3,
                c_out: 2,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                norm: false,
                activation: Activation::None,
                bias: false,
            },
        )
        .unwrap();
        store.initialize(11).unwrap();

        let mut rng = Rng64::new(1);
        let x = rand_tensor(Shape::new(1, 3, 5, 5), &mut rng);

        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let xi = fwd.tape.leaf(x.clone(), false);
        let y = layer.forward(&mut fwd, xi).unwrap();
        let layered = fwd.tape.value(y).clone();

        let mut tape2 = Tape::new();
        let xi2 = tape2.leaf(x, false);
        let wi = tape2.leaf(store.value(layer.weight_id()).clone(), false);
        let raw = tape2.conv2d(xi2, wi, None, (1, 1), (1, 1)).unwrap();
        assert_eq!(&layered, tape2.value(raw));
    }

    #[test]
    fn relu_zeroes_all_negative_preactivation() {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(
            &mut store,
            "c",
            ConvSpec {
                c_in: 1,
                c_out: 1,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
                norm: false,
                activation: Activation::Relu,
                bias: false,
            },
        )
        .unwrap();
        store.initialize(1).unwrap();
        // Force a negative-output map: weight -1, positive input.
        let wid = layer.weight_id();
        store
            .set_value(wid, Tensor::filled(Shape::new(1, 1, 1, 1), -1.0))
            .unwrap();

        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let x = fwd.tape.leaf(Tensor::filled(Shape::new(1, 1, 4, 4), 2.0), false);
        let y = layer.forward(&mut fwd, x).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn train_mode_batch_norm_output_has_zero_mean_unit_var() {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(&mut store, "c", ConvSpec::bn_relu(3, 8, 3).with_activation(Activation::None)).unwrap();
        store.initialize(5).unwrap();

        let mut rng = Rng64::new(77);
        let x = rand_tensor(Shape::new(4, 3, 8, 8), &mut rng);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
        let xi = fwd.tape.leaf(x, false);
        let y = layer.forward(&mut fwd, xi).unwrap();

        // Moment oracle over the normalized output (gamma=1, beta=0 at init).
        let out = tape.value(y);
        let s = out.shape();
        let m = (s.n * s.h * s.w) as f64;
        for c in 0..s.c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for n in 0..s.n {
                for yy in 0..s.h {
                    for xx in 0..s.w {
                        let v = out.at(n, c, yy, xx) as f64;
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn eval_mode_is_a_pure_function() {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(&mut store, "c", ConvSpec::bn_relu(2, 4, 3)).unwrap();
        store.initialize(9).unwrap();
        let mut rng = Rng64::new(3);
        let x = rand_tensor(Shape::new(1, 2, 6, 6), &mut rng);

        let run = |store: &mut ParamStore| {
            let mut tape = Tape::new();
            let mut fwd = Fwd::new(&mut tape, store, Mode::Eval);
            let xi = fwd.tape.leaf(x.clone(), false);
            let y = layer.forward(&mut fwd, xi).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(&mut store), run(&mut store));
    }

    #[test]
    fn eval_before_training_uses_init_stats() {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(
            &mut store,
            "c",
            ConvSpec::bn_relu(1, 1, 1).with_activation(Activation::None),
        )
        .unwrap();
        store.initialize(2).unwrap();
        let w = store.value(layer.weight_id()).data()[0];

        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let xi = fwd.tape.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0), false);
        let y = layer.forward(&mut fwd, xi).unwrap();
        // Running stats are mean 0, var 1, so BN is (x*w) / sqrt(1 + eps).
        let expected = (w as f64) / (1.0 + BN_EPS).sqrt();
        for &v in tape.value(y).data() {
            assert!((v as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(&mut store, "c", ConvSpec::bn_relu(2, 4, 3)).unwrap();
        store.initialize(9).unwrap();
        let rm = store.lookup("c.bn.running_mean").unwrap();
        let before = store.value(rm).clone();

        let mut rng = Rng64::new(3);
        let x = rand_tensor(Shape::new(2, 2, 6, 6), &mut rng);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
        let xi = fwd.tape.leaf(x, false);
        layer.forward(&mut fwd, xi).unwrap();
        assert_ne!(store.value(rm), &before);
    }

    #[test]
    fn attention_with_unit_gate_is_identity() {
        let mut store = ParamStore::new();
        let att = ChannelAttention::new(&mut store, "att", 8, 4).unwrap();
        store.initialize(21).unwrap();
        // Zero both conv weights and drive the expand bias high enough that
        // sigmoid saturates to exactly 1.0 in f32.
        for name in ["att.reduce.weight", "att.expand.weight"] {
            let id = store.lookup(name).unwrap();
            let shape = store.value(id).shape();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let b = store.lookup("att.expand.bias").unwrap();
        let shape = store.value(b).shape();
        store.set_value(b, Tensor::filled(shape, 100.0)).unwrap();

        let mut rng = Rng64::new(8);
        let x = rand_tensor(Shape::new(2, 8, 4, 4), &mut rng);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let xi = fwd.tape.leaf(x.clone(), false);
        let y = att.forward(&mut fwd, xi).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn attention_weights_lie_in_unit_interval_and_shape_is_preserved() {
        let mut store = ParamStore::new();
        let att = ChannelAttention::new(&mut store, "att", 6, 4).unwrap();
        store.initialize(31).unwrap();
        let mut rng = Rng64::new(4);
        let x = rand_tensor(Shape::new(2, 6, 5, 5), &mut rng);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let xi = fwd.tape.leaf(x.clone(), false);
        let g = att.gate(&mut fwd, xi).unwrap();
        let y = att.forward(&mut fwd, xi).unwrap();
        assert_eq!(tape.shape(g), Shape::new(2, 6, 1, 1));
        assert_eq!(tape.shape(y), x.shape());
        for &v in tape.value(g).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let att = ChannelAttention::new(&mut store, "att", 4, 4).unwrap();
        store.initialize(41).unwrap();
        let mut rng = Rng64::new(14);
        let x = rand_tensor(Shape::new(1, 4, 4, 4), &mut rng);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let xi = fwd.tape.leaf(x, true);
        let y = att.forward(&mut fwd, xi).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let report = check_gradient(&tape, loss, xi, &grads, 1e-3, None).unwrap();
        assert!(report.passes(1e-3), "rel err {:.3e}", report.max_rel_err);
    }

    #[test]
    fn init_is_seed_deterministic_and_biases_are_zero() {
        let build = |seed: u64| {
            let mut store = ParamStore::new();
            ConvLayer::new(&mut store, "a", ConvSpec::bn_relu(4, 8, 3)).unwrap();
            ConvLayer::new(&mut store, "b", ConvSpec::linear(8, 4, 1)).unwrap();
            store.initialize(seed).unwrap();
            store
        };
        let s1 = build(99);
        let s2 = build(99);
        for id in s1.ids() {
            assert_eq!(s1.value(id).data(), s2.value(id).data());
        }
        let s3 = build(100);
        let w = s1.lookup("a.weight").unwrap();
        assert_ne!(s1.value(w).data(), s3.value(w).data());

        let bias = s1.lookup("b.bias").unwrap();
        assert!(s1.value(bias).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_std_matches_fan_in() {
        let mut store = ParamStore::new();
        store
            .register(
                "w",
                Shape::new(64, 64, 3, 3),
                ParamKind::ConvWeight { fan_in: 64 * 9 },
            )
            .unwrap();
        store.initialize(7).unwrap();
        let data = store.value(store.lookup("w").unwrap()).data();
        let n = data.len() as f64;
        let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = (2.0 / 576.0_f64).sqrt();
        let std = var.sqrt();
        assert!(
            (std - expected).abs() / expected < 0.10,
            "std {std} vs {expected}"
        );
    }

    #[test]
    fn double_initialization_is_rejected() {
        let mut store = ParamStore::new();
        store
            .register("w", Shape::new(1, 1, 1, 1), ParamKind::Bias)
            .unwrap();
        store.initialize(1).unwrap();
        assert!(store.initialize(1).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store
            .register("w", Shape::new(1, 1, 1, 1), ParamKind::Bias)
            .unwrap();
        assert!(store
            .register("w", Shape::new(1, 1, 1, 1), ParamKind::Bias)
            .is_err());
    }
}
