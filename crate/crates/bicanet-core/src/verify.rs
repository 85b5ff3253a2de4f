//! Named finite-difference checks over every differentiable primitive and
//! each context block, shared by the `gradcheck` CLI subcommand and the
//! acceptance suite.

use crate::blocks::{BcibBlock, CcpbBlock, McfbBlock};
use crate::error::Result;
use crate::layers::{ChannelAttention, Fwd, Mode, ParamStore};
use crate::network::{compute_loss, BiCaNet, NetworkConfig, OhemConfig};
use crate::rng::Rng64;
use crate::tensor::{check_gradient, GradCheckReport, Shape, Tape, Tensor, ValueId, DEFAULT_EPSILON};

pub struct CheckOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn rand_tensor(shape: Shape, rng: &mut Rng64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32)
}

fn rand_tensor_no_kink(shape: Shape, rng: &mut Rng64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let mag = rng.uniform_in(0.1, 1.0);
        let sign = if rng.coin() { 1.0 } else { -1.0 };
        (mag * sign) as f32
    })
}

const PRIMITIVE_TOL: f64 = 1e-3;
const MODEL_TOL: f64 = 2e-3;

fn check_op(
    name: &'static str,
    seed: u64,
    kink: bool,
    build: impl Fn(&mut Tape, ValueId) -> Result<ValueId>,
) -> Result<CheckOutcome> {
    let mut rng = Rng64::new(seed);
    let shape = Shape::new(2, 3, 5, 5);
    let xt = if kink {
        rand_tensor_no_kink(shape, &mut rng)
    } else {
        rand_tensor(shape, &mut rng)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(xt, true);
    let loss = build(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let report = check_gradient(&tape, loss, x, &grads, DEFAULT_EPSILON, None)?;
    Ok(CheckOutcome {
        name,
        tolerance: PRIMITIVE_TOL,
        report,
    })
}

fn sum_of_squares(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let sq = tape.mul(x, x)?;
    Ok(tape.sum(sq))
}

fn primitive_checks() -> Vec<(&'static str, Result<CheckOutcome>)> {
    let mut out = Vec::new();

    out.push((
        "conv2d",
        check_op("conv2d", 101, false, |t, x| {
            let mut rng = Rng64::new(7);
            let w = t.leaf(rand_tensor(Shape::new(4, 3, 3, 3), &mut rng), false);
            let b = t.leaf(rand_tensor(Shape::new(1, 4, 1, 1), &mut rng), false);
            let y = t.conv2d(x, w, Some(b), (2, 2), (1, 1))?;
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "bilinear_upsample",
        check_op("bilinear_upsample", 102, false, |t, x| {
            let y = t.bilinear_upsample(x, 2)?;
            let mut rng = Rng64::new(3);
            let w = t.leaf(rand_tensor(Shape::new(2, 3, 10, 10), &mut rng), false);
            let m = t.mul(y, w)?;
            Ok(t.sum(m))
        }),
    ));
    out.push((
        "channel_max_squeeze",
        check_op("channel_max_squeeze", 103, true, |t, x| {
            let y = t.channel_max_squeeze(x)?;
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "global_avg_pool",
        check_op("global_avg_pool", 104, false, |t, x| {
            let y = t.global_avg_pool(x)?;
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "add",
        check_op("add", 105, false, |t, x| {
            let mut rng = Rng64::new(9);
            let b = t.leaf(rand_tensor(Shape::new(2, 3, 5, 5), &mut rng), false);
            let y = t.add(x, b)?;
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "mul",
        check_op("mul", 106, false, |t, x| {
            let mut rng = Rng64::new(11);
            let m = t.leaf(rand_tensor(Shape::new(2, 1, 5, 5), &mut rng), false);
            let y = t.mul(x, m)?;
            Ok(t.sum(y))
        }),
    ));
    out.push((
        "concat_channels",
        check_op("concat_channels", 107, false, |t, x| {
            let mut rng = Rng64::new(13);
            let other = t.leaf(rand_tensor(Shape::new(2, 2, 5, 5), &mut rng), false);
            let y = t.concat_channels(&[x, other])?;
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "relu",
        check_op("relu", 108, true, |t, x| {
            let y = t.relu(x);
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "sigmoid",
        check_op("sigmoid", 109, false, |t, x| {
            let y = t.sigmoid(x);
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "softmax_channels",
        check_op("softmax_channels", 110, false, |t, x| {
            let y = t.softmax_channels(x);
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "batch_norm",
        check_op("batch_norm", 111, false, |t, x| {
            let mut rng = Rng64::new(19);
            let gamma = t.leaf(rand_tensor(Shape::new(1, 3, 1, 1), &mut rng), false);
            let beta = t.leaf(rand_tensor(Shape::new(1, 3, 1, 1), &mut rng), false);
            let y = t.batch_norm_train(x, gamma, beta, 1e-5)?;
            sum_of_squares(t, y)
        }),
    ));
    out.push((
        "cross_entropy",
        check_op("cross_entropy", 112, false, |t, x| {
            let mut rng = Rng64::new(29);
            let pixels = 2 * 5 * 5;
            let targets: Vec<u8> = (0..pixels)
                .map(|p| if p % 7 == 0 { 255 } else { rng.below(3) as u8 })
                .collect();
            let kept = targets.iter().filter(|&&t| t != 255).count() as f32;
            let weights: Vec<f32> = targets
                .iter()
                .map(|&t| if t == 255 { 0.0 } else { 1.0 / kept })
                .collect();
            t.masked_cross_entropy(x, targets, weights)
        }),
    ));
    out
}

fn block_check(
    name: &'static str,
    build_and_run: impl FnOnce() -> Result<(Tape, ValueId, ValueId)>,
) -> Result<CheckOutcome> {
    let (mut tape, loss, leaf) = build_and_run()?;
    let grads = tape.backward(loss)?;
    let report = check_gradient(&tape, loss, leaf, &grads, DEFAULT_EPSILON, None)?;
    Ok(CheckOutcome {
        name,
        tolerance: PRIMITIVE_TOL,
        report,
    })
}

fn ccpb_check() -> Result<CheckOutcome> {
    block_check("ccpb", || {
        let mut store = ParamStore::new();
        let block = CcpbBlock::new(&mut store, "ccpb", 8, Some(6), 3, 3)?;
        store.initialize(211)?;
        let mut rng = Rng64::new(5);
        let xt = rand_tensor(Shape::new(1, 8, 6, 6), &mut rng);
        let mut tape = Tape::new();
        let loss = {
            let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
            let x = fwd.tape.leaf(xt, true);
            let y = block.forward(&mut fwd, x)?;
            let sq = fwd.tape.mul(y, y)?;
            (fwd.tape.sum(sq), x)
        };
        Ok((tape, loss.0, loss.1))
    })
}

fn bcib_check() -> Result<CheckOutcome> {
    block_check("bcib", || {
        let mut store = ParamStore::new();
        let block = BcibBlock::new(&mut store, "bcib", 2, true)?;
        store.initialize(223)?;
        let mut rng = Rng64::new(8);
        let mut tape = Tape::new();
        let (loss, leaf) = {
            let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
            let paths = [8usize, 4, 2, 1].map(|res| {
                let t = rand_tensor(Shape::new(1, 2, res, res), &mut rng);
                fwd.tape.leaf(t, true)
            });
            let outs = block.forward(&mut fwd, paths)?;
            let mut loss = None;
            for o in outs {
                let sq = fwd.tape.mul(o, o)?;
                let s = fwd.tape.sum(sq);
                loss = Some(match loss {
                    None => s,
                    Some(acc) => fwd.tape.add(acc, s)?,
                });
            }
            (loss.unwrap(), paths[0])
        };
        Ok((tape, loss, leaf))
    })
}

fn mcfb_check() -> Result<CheckOutcome> {
    block_check("mcfb", || {
        let mut store = ParamStore::new();
        let block = McfbBlock::new(&mut store, "mcfb", 4, 5, 6, true)?;
        store.initialize(227)?;
        let mut rng = Rng64::new(12);
        let xt = rand_tensor(Shape::new(1, 4, 6, 6), &mut rng);
        let mut tape = Tape::new();
        let (loss, leaf) = {
            let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
            let x = fwd.tape.leaf(xt, true);
            let y = block.forward(&mut fwd, x)?;
            let sq = fwd.tape.mul(y, y)?;
            (fwd.tape.sum(sq), x)
        };
        Ok((tape, loss, leaf))
    })
}

fn attention_check() -> Result<CheckOutcome> {
    block_check("channel_attention", || {
        let mut store = ParamStore::new();
        let att = ChannelAttention::new(&mut store, "att", 4, 4)?;
        store.initialize(229)?;
        let mut rng = Rng64::new(14);
        let xt = rand_tensor(Shape::new(1, 4, 4, 4), &mut rng);
        let mut tape = Tape::new();
        let (loss, leaf) = {
            let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Eval);
            let x = fwd.tape.leaf(xt, true);
            let y = att.forward(&mut fwd, x)?;
            let sq = fwd.tape.mul(y, y)?;
            (fwd.tape.sum(sq), x)
        };
        Ok((tape, loss, leaf))
    })
}

/// Sampled-parameter check of the assembled model under the full objective.
fn full_model_check() -> Result<CheckOutcome> {
    let cfg = NetworkConfig::new(3, 32).with_widths([4, 4, 8, 8]);
    let mut store = ParamStore::new();
    let model = BiCaNet::new(&mut store, &cfg)?;
    store.initialize(233)?;
    let mut rng = Rng64::new(5);
    let x = rand_tensor(Shape::new(1, 3, 32, 32), &mut rng);
    let labels: Vec<u8> = (0..32 * 32)
        .map(|p| if p % 11 == 0 { 255 } else { rng.below(3) as u8 })
        .collect();

    let mut tape = Tape::new();
    let (out, bindings) = {
        let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
        let xi = fwd.tape.leaf(x, false);
        let out = model.forward(&mut fwd, xi)?;
        (out, fwd.bindings())
    };
    let (total, _) = compute_loss(
        &mut tape,
        out.logits,
        &out.aux,
        &labels,
        0.1,
        &OhemConfig::default(),
    )?;
    let grads = tape.backward(total)?;

    let learnable: Vec<_> = bindings
        .iter()
        .filter(|(p, _)| store.kind(*p).learnable())
        .collect();
    let mut worst = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
    };
    for k in 0..20 {
        let (pid, vid) = learnable[(k * 7919) % learnable.len()];
        let count = store.value(*pid).shape().count();
        let entry = (k * 104729) % count;
        let report = check_gradient(&tape, total, *vid, &grads, DEFAULT_EPSILON, Some(&[entry]))?;
        worst.checked += report.checked;
        if report.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = report.max_rel_err;
            worst.worst_index = entry;
        }
        worst.max_abs_err = worst.max_abs_err.max(report.max_abs_err);
    }
    Ok(CheckOutcome {
        name: "full_model",
        tolerance: MODEL_TOL,
        report: worst,
    })
}

/// Run the named check, or all of them, returning one outcome per check.
pub fn gradient_suite(filter: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for (name, outcome) in primitive_checks() {
        if filter.is_none_or(|f| f == name) {
            outcomes.push(outcome?);
        }
    }
    type CompositeCheck = fn() -> Result<CheckOutcome>;
    let composites: [(&str, CompositeCheck); 5] = [
        ("ccpb", ccpb_check),
        ("bcib", bcib_check),
        ("mcfb", mcfb_check),
        ("channel_attention", attention_check),
        ("full_model", full_model_check),
    ];
    for (name, f) in composites {
        if filter.is_none_or(|f2| f2 == name) {
            outcomes.push(f()?);
        }
    }
    if outcomes.is_empty() {
        return Err(crate::error::Error::InvalidArgument(format!(
            "no gradient check named `{}`",
            filter.unwrap_or("")
        )));
    }
    Ok(outcomes)
}
