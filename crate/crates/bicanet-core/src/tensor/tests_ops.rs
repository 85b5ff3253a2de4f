//! Tensor-core op tests. Every DERIVED expectation is computed by an
//! independent oracle written here (naive loops, per-site formula
//! evaluation), never by the kernels under test.

use super::*;
use crate::rng::Rng64;

fn rand_tensor(shape: Shape, rng: &mut Rng64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32)
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn rand_tensor_no_kink(shape: Shape, rng: &mut Rng64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let mag = rng.uniform_in(0.1, 1.0);
        let sign = if rng.coin() { 1.0 } else { -1.0 };
        (mag * sign) as f32
    })
}

// --- independent oracles -------------------------------------------------

/// Direct-summation convolution oracle: seven nested loops, bounds checked
/// per tap, f64 accumulation.
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.h + 2 * pad.0 - ws.h) / stride.0 + 1;
    let ow = (xs.w + 2 * pad.1 - ws.w) / stride.1 + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, oc, oy, ox| {
        let mut acc: f64 = bias.map_or(0.0, |b| b[oc] as f64);
        for ic in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                    let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += x.at(n, ic, iy as usize, ix as usize) as f64
                            * w.at(oc, ic, ky, kx) as f64;
                    }
                }
            }
        }
        acc as f32
    })
}

/// Scalar evaluation of the half-pixel-center bilinear formula at one output
/// site: src = (dst + 0.5) / ratio - 0.5, clamped to the source extent.
fn bilinear_site_oracle(src: &Tensor, n: usize, c: usize, oy: usize, ox: usize, ratio: usize) -> f64 {
    let s = src.shape();
    let coord = |d: usize, len: usize| -> f64 {
        ((d as f64 + 0.5) / ratio as f64 - 0.5).clamp(0.0, (len - 1) as f64)
    };
    let sy = coord(oy, s.h);
    let sx = coord(ox, s.w);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(s.h - 1);
    let x1 = (x0 + 1).min(s.w - 1);
    let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
    let v = |y: usize, x: usize| src.at(n, c, y, x) as f64;
    (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1))
        + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1))
}

fn assert_close(actual: &Tensor, expected: &Tensor, tol: f64, what: &str) {
    assert_eq!(actual.shape(), expected.shape(), "{what}: shape");
    for (i, (&a, &e)) in actual.data().iter().zip(expected.data()).enumerate() {
        assert!(
            (a as f64 - e as f64).abs() <= tol,
            "{what}: entry {i}: {a} vs {e}"
        );
    }
}

// --- conv2d ---------------------------------------------------------------

#[test]
fn conv_all_ones_sums_nine() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0), false);
    let w = tape.leaf(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0), false);
    let y = tape.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 1, 1));
    assert_eq!(tape.value(y).data()[0], 9.0);
}

#[test]
fn conv_channel_identity_kernel() {
    let mut rng = Rng64::new(5);
    let mut tape = Tape::new();
    let c = 4;
    let x = tape.leaf(rand_tensor(Shape::new(2, c, 5, 6), &mut rng), false);
    // c x c x 1 x 1 kernel holding the identity matrix across channels.
    let ident = Tensor::from_fn(Shape::new(c, c, 1, 1), |oc, ic, _, _| {
        if oc == ic {
            1.0
        } else {
            0.0
        }
    });
    let w = tape.leaf(ident, false);
    let y = tape.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn conv_matches_direct_summation_oracle() {
    let mut rng = Rng64::new(17);
    let x = rand_tensor(Shape::new(2, 3, 8, 8), &mut rng);
    let w = rand_tensor(Shape::new(4, 3, 3, 3), &mut rng);
    let expected = conv_oracle(&x, &w, None, (2, 2), (1, 1));
    assert_eq!(expected.shape(), Shape::new(2, 4, 4, 4));

    let mut tape = Tape::new();
    let xi = tape.leaf(x, false);
    let wi = tape.leaf(w, false);
    let y = tape.conv2d(xi, wi, None, (2, 2), (1, 1)).unwrap();
    assert_close(tape.value(y), &expected, 1e-5, "conv vs oracle");
}

#[test]
fn conv_matches_oracle_over_randomized_shapes() {
    let mut rng = Rng64::new(99);
    for case in 0..60 {
        let n = rng.range_inclusive(1, 2);
        let c = rng.range_inclusive(1, 4);
        let h = rng.range_inclusive(1, 9);
        let w = rng.range_inclusive(1, 9);
        let pad = (rng.below(3), rng.below(3));
        let kh = rng.range_inclusive(1, (h + 2 * pad.0).min(4));
        let kw = rng.range_inclusive(1, (w + 2 * pad.1).min(4));
        let stride = (rng.range_inclusive(1, 3), rng.range_inclusive(1, 3));
        let oc = rng.range_inclusive(1, 3);
        let x = rand_tensor(Shape::new(n, c, h, w), &mut rng);
        let k = rand_tensor(Shape::new(oc, c, kh, kw), &mut rng);
        let bias: Vec<f32> = (0..oc).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
        let bias_t = Tensor::new(Shape::new(1, oc, 1, 1), bias.clone()).unwrap();
        let expected = conv_oracle(&x, &k, Some(&bias), stride, pad);

        let mut tape = Tape::new();
        let xi = tape.leaf(x, false);
        let wi = tape.leaf(k, false);
        let bi = tape.leaf(bias_t, false);
        let y = tape.conv2d(xi, wi, Some(bi), stride, pad).unwrap();
        // Output-shape formula.
        let os = tape.shape(y);
        assert_eq!(os.h, (h + 2 * pad.0 - kh) / stride.0 + 1, "case {case}");
        assert_eq!(os.w, (w + 2 * pad.1 - kw) / stride.1 + 1, "case {case}");
        assert_close(tape.value(y), &expected, 1e-5, "randomized conv");
    }
}

#[test]
fn conv_rejects_bad_arguments() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)), false);
    let w_badc = tape.leaf(Tensor::zeros(Shape::new(2, 4, 3, 3)), false);
    let err = tape.conv2d(x, w_badc, None, (1, 1), (0, 0)).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");

    let w = tape.leaf(Tensor::zeros(Shape::new(2, 3, 3, 3)), false);
    let err = tape.conv2d(x, w, None, (0, 1), (0, 0)).unwrap_err();
    assert!(err.to_string().contains("stride"), "{err}");

    let w_big = tape.leaf(Tensor::zeros(Shape::new(2, 3, 7, 3)), false);
    let err = tape.conv2d(x, w_big, None, (1, 1), (1, 1)).unwrap_err();
    assert!(err.to_string().contains("kernel height"), "{err}");
}

// --- bilinear upsample -----------------------------------------------------

#[test]
fn upsample_ratio_one_is_identity() {
    let mut rng = Rng64::new(2);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(Shape::new(2, 3, 4, 5), &mut rng), false);
    let y = tape.bilinear_upsample(x, 1).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn upsample_of_constant_is_constant() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(Shape::new(1, 2, 3, 3), 2.5), false);
    let y = tape.bilinear_upsample(x, 3).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 2, 9, 9));
    for &v in tape.value(y).data() {
        assert_eq!(v, 2.5);
    }
}

#[test]
fn upsample_matches_per_pixel_formula_oracle() {
    let src = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(src.clone(), false);
    let y = tape.bilinear_upsample(x, 2).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 4, 4));
    for oy in 0..4 {
        for ox in 0..4 {
            let expected = bilinear_site_oracle(&src, 0, 0, oy, ox, 2);
            let actual = tape.value(y).at(0, 0, oy, ox) as f64;
            assert!(
                (actual - expected).abs() < 1e-6,
                "site ({oy},{ox}): {actual} vs {expected}"
            );
        }
    }
}

#[test]
fn upsample_rejects_zero_ratio() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), false);
    assert!(tape.bilinear_upsample(x, 0).is_err());
}

// --- channel max squeeze ----------------------------------------------------

#[test]
fn max_squeeze_single_channel_is_identity() {
    let mut rng = Rng64::new(8);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(Shape::new(2, 1, 3, 4), &mut rng), false);
    let y = tape.channel_max_squeeze(x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn max_squeeze_dominated_channel() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::from_fn(Shape::new(1, 4, 3, 3), |_, c, _, _| {
            if c == 2 {
                5.0
            } else {
                -1.0
            }
        }),
        false,
    );
    let y = tape.channel_max_squeeze(x).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 3, 3));
    for &v in tape.value(y).data() {
        assert_eq!(v, 5.0);
    }
}

#[test]
fn max_squeeze_matches_loop_oracle() {
    let mut rng = Rng64::new(21);
    let x = rand_tensor(Shape::new(2, 6, 4, 4), &mut rng);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let y = tape.channel_max_squeeze(xi).unwrap();
    for n in 0..2 {
        for yy in 0..4 {
            for xx in 0..4 {
                let mut best = f32::NEG_INFINITY;
                for c in 0..6 {
                    best = best.max(x.at(n, c, yy, xx));
                }
                assert_eq!(tape.value(y).at(n, 0, yy, xx), best);
            }
        }
    }
}

#[test]
fn max_squeeze_tie_routes_gradient_to_first_channel() {
    let mut tape = Tape::new();
    // Channels 0 and 1 tie everywhere.
    let x = tape.leaf(Tensor::filled(Shape::new(1, 2, 2, 2), 3.0), true);
    let y = tape.channel_max_squeeze(x).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(x).unwrap();
    let s = Shape::new(1, 2, 2, 2);
    for yy in 0..2 {
        for xx in 0..2 {
            assert_eq!(g[s.at(0, 0, yy, xx)], 1.0);
            assert_eq!(g[s.at(0, 1, yy, xx)], 0.0);
        }
    }
}

// --- global average pool -----------------------------------------------------

#[test]
fn gap_constant_input() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(Shape::new(2, 3, 4, 4), 0.75), false);
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(y), Shape::new(2, 3, 1, 1));
    for &v in tape.value(y).data() {
        assert_eq!(v, 0.75);
    }
}

#[test]
fn gap_two_by_two_mean() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        false,
    );
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 2.5);
}

#[test]
fn gap_matches_loop_oracle() {
    let mut rng = Rng64::new(33);
    let x = rand_tensor(Shape::new(2, 3, 5, 7), &mut rng);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let y = tape.global_avg_pool(xi).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            let mut acc = 0.0f64;
            for yy in 0..5 {
                for xx in 0..7 {
                    acc += x.at(n, c, yy, xx) as f64;
                }
            }
            let expected = acc / 35.0;
            let actual = tape.value(y).at(n, c, 0, 0) as f64;
            assert!((actual - expected).abs() < 1e-6);
        }
    }
}

// --- elementwise / concat / activations --------------------------------------

#[test]
fn sigmoid_of_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 3, 3)), false);
    let y = tape.sigmoid(x);
    for &v in tape.value(y).data() {
        assert_eq!(v, 0.5);
    }
}

#[test]
fn concat_of_four_21_channel_tensors() {
    let mut rng = Rng64::new(4);
    let mut tape = Tape::new();
    let parts: Vec<ValueId> = (0..4)
        .map(|_| tape.leaf(rand_tensor(Shape::new(1, 21, 3, 3), &mut rng), false))
        .collect();
    let y = tape.concat_channels(&parts).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 84, 3, 3));
    for (k, &p) in parts.iter().enumerate() {
        for c in 0..21 {
            for yy in 0..3 {
                for xx in 0..3 {
                    assert_eq!(
                        tape.value(y).at(0, k * 21 + c, yy, xx),
                        tape.value(p).at(0, c, yy, xx)
                    );
                }
            }
        }
    }
}

#[test]
fn softmax_sums_to_one_and_sigmoid_in_unit_interval() {
    let mut rng = Rng64::new(12);
    let x = rand_tensor(Shape::new(2, 5, 4, 4), &mut rng);
    let mut tape = Tape::new();
    let xi = tape.leaf(x, false);
    let sm = tape.softmax_channels(xi);
    let sg = tape.sigmoid(xi);
    for n in 0..2 {
        for yy in 0..4 {
            for xx in 0..4 {
                let total: f64 = (0..5).map(|c| tape.value(sm).at(n, c, yy, xx) as f64).sum();
                assert!((total - 1.0).abs() < 1e-6, "softmax sum {total}");
            }
        }
    }
    for &v in tape.value(sg).data() {
        assert!(v > 0.0 && v < 1.0);
    }
}

#[test]
fn add_rejects_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(Shape::new(1, 2, 3, 3)), false);
    let b = tape.leaf(Tensor::zeros(Shape::new(1, 3, 3, 3)), false);
    assert!(tape.add(a, b).is_err());
}

#[test]
fn mul_broadcasts_single_channel_map() {
    let mut rng = Rng64::new(6);
    let a = rand_tensor(Shape::new(2, 4, 3, 3), &mut rng);
    let m = rand_tensor(Shape::new(2, 1, 3, 3), &mut rng);
    let mut tape = Tape::new();
    let ai = tape.leaf(a.clone(), false);
    let mi = tape.leaf(m.clone(), false);
    let y = tape.mul(ai, mi).unwrap();
    assert_eq!(tape.shape(y), Shape::new(2, 4, 3, 3));
    for n in 0..2 {
        for c in 0..4 {
            for yy in 0..3 {
                for xx in 0..3 {
                    let expected = a.at(n, c, yy, xx) as f64 * m.at(n, 0, yy, xx) as f64;
                    assert!((tape.value(y).at(n, c, yy, xx) as f64 - expected).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn mul_rejects_incompatible_axes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(Shape::new(1, 4, 3, 3)), false);
    let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 3, 3)), false);
    assert!(tape.mul(a, b).is_err());
}

// --- backward -----------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = Rng64::new(14);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(Shape::new(2, 3, 4, 4), &mut rng), true);
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    for &g in grads.get(x).unwrap() {
        assert_eq!(g, 1.0);
    }
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let mut rng = Rng64::new(15);
    let xt = rand_tensor(Shape::new(2, 3, 4, 4), &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(xt.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    for (&g, &v) in grads.get(x).unwrap().iter().zip(xt.data()) {
        assert!((g - 2.0 * v).abs() < 1e-5, "{g} vs {}", 2.0 * v);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)), true);
    let y = tape.relu(x);
    assert!(tape.backward(y).is_err());
}

/// Finite-difference checks for every differentiable primitive, each rel err
/// < 1e-3 at eps = 1e-3 on the f64 shadow path.
#[test]
fn finite_difference_every_primitive() {
    let tol = 1e-3;
    let eps = DEFAULT_EPSILON;
    let shape = Shape::new(2, 3, 5, 5);
    let mut failures = Vec::new();

    let mut check = |name: &str, build: &dyn Fn(&mut Tape, ValueId) -> ValueId, kink: bool| {
        let mut rng = Rng64::new(0xBEEF ^ name.len() as u64);
        let xt = if kink {
            rand_tensor_no_kink(shape, &mut rng)
        } else {
            rand_tensor(shape, &mut rng)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(xt, true);
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let report = check_gradient(&tape, loss, x, &grads, eps, None).unwrap();
        if !report.passes(tol) {
            failures.push(format!("{name}: max rel err {:.3e}", report.max_rel_err));
        }
    };

    check(
        "conv2d",
        &|t, x| {
            let mut rng = Rng64::new(7);
            let w = t.leaf(rand_tensor(Shape::new(4, 3, 3, 3), &mut rng), false);
            let b = t.leaf(rand_tensor(Shape::new(1, 4, 1, 1), &mut rng), false);
            let y = t.conv2d(x, w, Some(b), (2, 2), (1, 1)).unwrap();
            t.sum(y)
        },
        false,
    );
    check(
        "bilinear_upsample",
        &|t, x| {
            let y = t.bilinear_upsample(x, 2).unwrap();
            // Weight output sites unevenly so the gradient is not constant.
            let mut rng = Rng64::new(3);
            let w = t.leaf(rand_tensor(Shape::new(2, 3, 10, 10), &mut rng), false);
            let y = t.mul(y, w).unwrap();
            t.sum(y)
        },
        false,
    );
    check(
        "channel_max_squeeze",
        &|t, x| {
            let y = t.channel_max_squeeze(x).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        true, // widely spaced magnitudes avoid argmax flips under +-eps
    );
    check(
        "global_avg_pool",
        &|t, x| {
            let y = t.global_avg_pool(x).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "add",
        &|t, x| {
            let mut rng = Rng64::new(9);
            let b = t.leaf(rand_tensor(Shape::new(2, 3, 5, 5), &mut rng), false);
            let y = t.add(x, b).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "mul_broadcast",
        &|t, x| {
            let mut rng = Rng64::new(11);
            let m = t.leaf(rand_tensor(Shape::new(2, 1, 5, 5), &mut rng), false);
            let y = t.mul(x, m).unwrap();
            t.sum(y)
        },
        false,
    );
    check(
        "concat_channels",
        &|t, x| {
            let mut rng = Rng64::new(13);
            let other = t.leaf(rand_tensor(Shape::new(2, 2, 5, 5), &mut rng), false);
            let y = t.concat_channels(&[x, other]).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "relu",
        &|t, x| {
            let y = t.relu(x);
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        true,
    );
    check(
        "sigmoid",
        &|t, x| {
            let y = t.sigmoid(x);
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "softmax_channels",
        &|t, x| {
            let y = t.softmax_channels(x);
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "batch_norm_train",
        &|t, x| {
            let mut rng = Rng64::new(19);
            let gamma = t.leaf(rand_tensor(Shape::new(1, 3, 1, 1), &mut rng), false);
            let beta = t.leaf(rand_tensor(Shape::new(1, 3, 1, 1), &mut rng), false);
            let y = t.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "batch_norm_eval",
        &|t, x| {
            let mut rng = Rng64::new(23);
            let gamma = t.leaf(rand_tensor(Shape::new(1, 3, 1, 1), &mut rng), false);
            let beta = t.leaf(rand_tensor(Shape::new(1, 3, 1, 1), &mut rng), false);
            let y = t
                .batch_norm_eval(x, gamma, beta, &[0.1, -0.2, 0.3], &[1.1, 0.9, 1.3], 1e-5)
                .unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "crop_spatial",
        &|t, x| {
            let y = t.crop_spatial(x, 4, 3).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "scale",
        &|t, x| {
            let y = t.scale(x, 0.37);
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        false,
    );
    check(
        "masked_cross_entropy",
        &|t, x| {
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
            t.masked_cross_entropy(x, targets, weights).unwrap()
        },
        false,
    );

    assert!(failures.is_empty(), "gradient check failures: {failures:?}");
}

#[test]
fn tape_replay_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng64::new(1234);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(Shape::new(1, 3, 6, 6), &mut rng), true);
        let w = tape.leaf(rand_tensor(Shape::new(2, 3, 3, 3), &mut rng), true);
        let c = tape.conv2d(x, w, None, (1, 1), (1, 1)).unwrap();
        let r = tape.relu(c);
        let u = tape.bilinear_upsample(r, 2).unwrap();
        let s = tape.sigmoid(u);
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).data().to_vec(),
            grads.get(x).unwrap().to_vec(),
            grads.get(w).unwrap().to_vec(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn masked_cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 2, 2)), false);
    let targets = vec![0u8, 1, 7, 2];
    let weights = vec![0.25; 4];
    let err = tape.masked_cross_entropy(x, targets, weights).unwrap_err();
    assert!(err.to_string().contains("pixel 2"), "{err}");
}
