//! Central finite differences against reverse-mode gradients.

use std::time::Instant;

use chanmap::autograd::{BatchNormState, Conv2dParams, ParamStore, Tape, Var};
use chanmap::hwmodel::{relaxed_layer_cost, CuProfile, OpKind, OperatorSupport, PlatformProfile, RelaxedUnit, Tau};
use chanmap::mapping::{blend_outputs, blend_weights, ThetaBank, ThetaMode};
use chanmap::netspec::LayerGeometry;
use chanmap::quant::{ActivationQuantizer, Precision, WeightQuantizer};
use chanmap::rng::{self, Rng};
use chanmap::{Result, Tensor};
use rand::Rng as _;

use crate::Outcome;

const H: f32 = 1e-2;
const TOL: f64 = 1e-3;
const INSTANCES: usize = 20;
const TIME_LIMIT_S: f64 = 120.0;

type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn project(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors.
fn rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(&a, &n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-9 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error of the gradient of `sum(f(x) * r)`, for a random `r`, with
/// respect to all inputs at once.
/// `numeric` evaluates the function whose differences are taken; it is
/// `analytic` itself except for straight-through estimators.
fn check_with(inputs: &[Tensor], analytic: Build<'_>, numeric: Build<'_>, rng: &mut Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = analytic(&mut tape, &vars)?;
    let r = Tensor::normal(tape.value(out).shape().to_vec(), 1.0, rng);
    let rv = tape.constant(r.clone());
    let weighted = tape.mul(out, rv)?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss, &mut store)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = numeric(&mut t, &v)?;
        Ok(project(t.value(o), &r))
    };
    // one gradient vector over all inputs
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut xs = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        match grads.get(vars[i]) {
            Some(g) => a.extend_from_slice(g.data()),
            None => a.extend(std::iter::repeat_n(0.0, x.numel())),
        }
        for e in 0..x.numel() {
            let orig = x.data()[e];
            let mut at = |step: f32| -> Result<f64> {
                xs[i].data_mut()[e] = orig + step;
                eval(&xs)
            };
            // five-point central stencil, truncation error O(h^4)
            let (p1, m1, p2, m2) = (at(H)?, at(-H)?, at(2.0 * H)?, at(-2.0 * H)?);
            xs[i].data_mut()[e] = orig;
            n.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * H as f64));
        }
    }
    Ok(rel_error(&a, &n))
}

fn check(inputs: &[Tensor], f: Build<'_>, rng: &mut Rng) -> Result<f64> {
    check_with(inputs, f, f, rng)
}

/// Values bounded away from zero so that relu kinks are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::normal(shape.to_vec(), 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.2, 1.0, rng)
}

fn small_image(rng: &mut Rng) -> [usize; 4] {
    [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..6), rng.random_range(3..6)]
}

/// One family of random instances: a generator of inputs plus the checked result.
struct Family {
    name: &'static str,
    run: fn(&mut Rng) -> Result<f64>,
}

fn families() -> Vec<Family> {
    vec![
        Family {
            name: "add",
            run: |r| {
                let s = small_image(r);
                check(&[normal(&s, r), normal(&s, r)], &|t, v| t.add(v[0], v[1]), r)
            },
        },
        Family {
            name: "sub",
            run: |r| {
                let s = small_image(r);
                check(&[normal(&s, r), normal(&s, r)], &|t, v| t.sub(v[0], v[1]), r)
            },
        },
        Family {
            name: "mul",
            run: |r| {
                let s = small_image(r);
                check(&[normal(&s, r), normal(&s, r)], &|t, v| t.mul(v[0], v[1]), r)
            },
        },
        Family {
            name: "scale",
            run: |r| {
                let c: f32 = r.random_range(-3.0..3.0);
                let x = normal(&small_image(r), r);
                check(&[x], &move |t, v| Ok(t.scale(v[0], c)), r)
            },
        },
        Family {
            name: "add_scalar",
            run: |r| {
                let c: f32 = r.random_range(-3.0..3.0);
                let x = normal(&small_image(r), r);
                check(&[x], &move |t, v| Ok(t.add_scalar(v[0], c)), r)
            },
        },
        Family {
            name: "one_minus",
            run: |r| check(&[normal(&[r.random_range(1..9)], r)], &|t, v| Ok(t.one_minus(v[0])), r),
        },
        Family {
            name: "relu",
            run: |r| check(&[away_from_zero(&small_image(r), r)], &|t, v| Ok(t.relu(v[0])), r),
        },
        Family {
            name: "reshape",
            run: |r| {
                let s = small_image(r);
                let flat = [s[0], s[1] * s[2] * s[3]];
                check(&[normal(&s, r)], &move |t, v| t.reshape(v[0], &flat), r)
            },
        },
        Family {
            name: "conv2d",
            run: |r| {
                let [n, c, h, w] = small_image(r);
                let (k, stride, pad) = (r.random_range(1..4), r.random_range(1..3), r.random_range(0..2));
                let (k, o) = (k.min(h + 2 * pad).min(w + 2 * pad), r.random_range(1..4));
                let bias = r.random_bool(0.5);
                let mut inputs = vec![normal(&[n, c, h, w], r), normal(&[o, c, k, k], r)];
                if bias {
                    inputs.push(normal(&[o], r));
                }
                check(
                    &inputs,
                    &move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), Conv2dParams::new(stride, pad, 1)),
                    r,
                )
            },
        },
        Family {
            name: "conv2d (depthwise)",
            run: |r| {
                let [n, c, h, w] = small_image(r);
                let stride = r.random_range(1..3);
                let inputs = [normal(&[n, c, h, w], r), normal(&[c, 1, 3, 3], r), normal(&[c], r)];
                check(&inputs, &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dParams::new(stride, 1, c)), r)
            },
        },
        Family {
            name: "linear",
            run: |r| {
                let (b, i, o) = (r.random_range(1..5), r.random_range(1..8), r.random_range(1..6));
                let inputs = [normal(&[b, i], r), normal(&[o, i], r), normal(&[o], r)];
                check(&inputs, &|t, v| t.linear(v[0], v[1], Some(v[2])), r)
            },
        },
        Family {
            name: "batch_norm",
            run: |r| {
                let [_, c, h, w] = small_image(r);
                let n = r.random_range(2..4);
                let train = r.random_bool(0.7);
                let inputs = [normal(&[n, c, h, w], r), positive(&[c], r), normal(&[c], r)];
                let (mean, var) = (normal(&[c], r), positive(&[c], r));
                check(
                    &inputs,
                    &move |t, v| {
                        let (mut m, mut s) = (mean.clone(), var.clone());
                        let state = BatchNormState {
                            running_mean: &mut m,
                            running_var: &mut s,
                            momentum: 0.1,
                            eps: 1e-5,
                            train,
                        };
                        t.batch_norm(v[0], v[1], v[2], state)
                    },
                    r,
                )
            },
        },
        Family {
            name: "avg_pool2d",
            run: |r| {
                let s = small_image(r);
                let (k, stride) = (r.random_range(1..4), r.random_range(1..3));
                check(&[normal(&s, r)], &move |t, v| t.avg_pool2d(v[0], k, stride), r)
            },
        },
        Family {
            name: "global_avg_pool",
            run: |r| check(&[normal(&small_image(r), r)], &|t, v| t.global_avg_pool(v[0]), r),
        },
        Family {
            name: "concat_channels",
            run: |r| {
                let [n, _, h, w] = small_image(r);
                let parts: Vec<Tensor> = (0..r.random_range(1..4))
                    .map(|_| normal(&[n, r.random_range(1..4), h, w], r))
                    .collect();
                check(&parts, &|t, v| t.concat_channels(v), r)
            },
        },
        Family {
            name: "softmax",
            run: |r| {
                let s = [r.random_range(1..5), r.random_range(2..7)];
                check(&[normal(&s, r)], &|t, v| Ok(t.softmax(v[0])), r)
            },
        },
        Family {
            name: "cross_entropy",
            run: |r| {
                let (b, k) = (r.random_range(1..6), r.random_range(2..7));
                let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
                check(&[normal(&[b, k], r)], &move |t, v| t.cross_entropy(v[0], &labels), r)
            },
        },
        Family {
            name: "sum",
            run: |r| check(&[normal(&small_image(r), r)], &|t, v| Ok(t.sum(v[0])), r),
        },
        Family {
            name: "sum_rows",
            run: |r| {
                let s = [r.random_range(1..7), r.random_range(1..5)];
                check(&[normal(&s, r)], &|t, v| t.sum_rows(v[0]), r)
            },
        },
        Family {
            name: "scale_axis",
            run: |r| {
                let s = small_image(r);
                let axis = r.random_range(0..4);
                check(&[normal(&s, r), normal(&[s[axis]], r)], &move |t, v| t.scale_axis(v[0], v[1], axis), r)
            },
        },
        Family {
            name: "column",
            run: |r| {
                let s = [r.random_range(1..7), r.random_range(1..5)];
                let j = r.random_range(0..s[1]);
                check(&[normal(&s, r)], &move |t, v| t.column(v[0], j), r)
            },
        },
        Family {
            name: "stack_columns",
            run: |r| {
                let len = r.random_range(1..7);
                let cols: Vec<Tensor> = (0..r.random_range(1..4)).map(|_| normal(&[len], r)).collect();
                check(&cols, &|t, v| t.stack_columns(v), r)
            },
        },
        Family {
            name: "suffix_sum",
            run: |r| check(&[normal(&[r.random_range(2..10)], r)], &|t, v| t.suffix_sum(v[0]), r),
        },
        Family {
            name: "index",
            run: |r| {
                let n = r.random_range(1..9);
                let i = r.random_range(0..n);
                check(&[normal(&[n], r)], &move |t, v| t.index(v[0], i), r)
            },
        },
        Family {
            name: "stack",
            run: |r| {
                let parts: Vec<Tensor> = (0..r.random_range(1..5)).map(|_| Tensor::scalar(r.random_range(-2.0..2.0))).collect();
                check(&parts, &|t, v| t.stack(v), r)
            },
        },
        Family {
            name: "smooth_max",
            run: |r| {
                let tau: f32 = r.random_range(0.3..2.0);
                check(&[normal(&[r.random_range(1..8)], r)], &move |t, v| t.smooth_max(v[0], tau), r)
            },
        },
        Family {
            name: "ternary weight STE",
            run: |r| weight_ste(WeightQuantizer::for_precision(Precision::Ternary, 0.05), r),
        },
        Family {
            name: "int8 weight STE",
            run: |r| weight_ste(WeightQuantizer::for_precision(Precision::Int8, 0.05), r),
        },
        Family {
            name: "activation STE",
            run: activation_ste,
        },
        Family {
            name: "blend_outputs",
            run: |r| {
                let [n, c, h, w] = small_image(r);
                let branches = r.random_range(2..4);
                let mut inputs: Vec<Tensor> = (0..branches).map(|_| normal(&[n, c, h, w], r)).collect();
                inputs.push(positive(&[c, branches], r));
                check(&inputs, &move |t, v| blend_outputs(t, &v[..branches], v[branches]), r)
            },
        },
        Family {
            name: "blend_weights",
            run: |r| {
                let (o, c, k) = (r.random_range(1..6), r.random_range(1..4), r.random_range(1..4));
                let branches = r.random_range(2..4);
                let mut inputs: Vec<Tensor> = (0..branches).map(|_| normal(&[o, c, k, k], r)).collect();
                inputs.push(positive(&[o, branches], r));
                check(&inputs, &move |t, v| blend_weights(t, &v[..branches], v[branches]), r)
            },
        },
        Family {
            name: "contiguous theta",
            run: contiguous_theta,
        },
        Family {
            name: "relaxed latency",
            run: |r| relaxed_cost(false, r),
        },
        Family {
            name: "relaxed energy",
            run: |r| relaxed_cost(true, r),
        },
    ]
}

/// Loss downstream of a weight quantizer: cross-entropy of a linear layer.
fn downstream(t: &mut Tape, x: Var, w: Var, labels: &[usize]) -> Result<Var> {
    let y = t.linear(x, w, None)?;
    t.cross_entropy(y, labels)
}

/// The straight-through path is checked against differences of
/// `v -> g(Q(w0) + (v - w0))`, the function whose gradient it claims to be.
fn weight_ste(mut quant: WeightQuantizer, r: &mut Rng) -> Result<f64> {
    let (b, i, o) = (r.random_range(1..5), r.random_range(2..8), r.random_range(2..6));
    let x = normal(&[b, i], r);
    let w0 = normal(&[o, i], r);
    if r.random_bool(0.5) {
        quant.freeze(&w0);
    }
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..o)).collect();
    let q0 = quant.quantize(&w0)?;
    let analytic = |t: &mut Tape, v: &[Var]| {
        let xv = t.constant(x.clone());
        let q = quant.apply(t, v[0])?;
        downstream(t, xv, q, &labels)
    };
    let numeric = |t: &mut Tape, v: &[Var]| {
        let xv = t.constant(x.clone());
        let (base, anchor) = (t.constant(q0.clone()), t.constant(w0.clone()));
        let delta = t.sub(v[0], anchor)?;
        let q = t.add(base, delta)?;
        downstream(t, xv, q, &labels)
    };
    check_with(&[w0.clone()], &analytic, &numeric, r)
}

fn activation_ste(r: &mut Rng) -> Result<f64> {
    let (b, i, o) = (r.random_range(1..5), r.random_range(2..8), r.random_range(2..6));
    let x0 = normal(&[b, i], r);
    let w = normal(&[o, i], r);
    let quant = ActivationQuantizer {
        frozen_range: r.random_bool(0.5).then(|| r.random_range(0.5..3.0)),
    };
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..o)).collect();
    let q0 = quant.quantize(&x0)?;
    let analytic = |t: &mut Tape, v: &[Var]| {
        let wv = t.constant(w.clone());
        let q = quant.apply(t, v[0])?;
        downstream(t, q, wv, &labels)
    };
    let numeric = |t: &mut Tape, v: &[Var]| {
        let wv = t.constant(w.clone());
        let (base, anchor) = (t.constant(q0.clone()), t.constant(x0.clone()));
        let delta = t.sub(v[0], anchor)?;
        let q = t.add(base, delta)?;
        downstream(t, q, wv, &labels)
    };
    check_with(&[x0.clone()], &analytic, &numeric, r)
}

/// Gradient of the contiguous theta with respect to the stored split logits.
fn contiguous_theta(r: &mut Rng) -> Result<f64> {
    let channels = r.random_range(1..12);
    let mut store = ParamStore::new();
    let mut bank = ThetaBank::new(&mut store, "b", ThetaMode::Contiguous { channels })?;
    bank.tau = r.random_range(0.5..2.0);
    *store.value_mut(bank.logits) = normal(&[channels + 1], r);
    let weights = normal(&[channels, 2], r);

    let mut tape = Tape::new();
    let theta = bank.theta(&mut tape, &store)?;
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(theta, wv)?;
    let loss = tape.sum(prod);
    tape.backward(loss, &mut store)?;
    let analytic = store.get(bank.logits).grad.clone().expect("logits receive a gradient");

    let mut numeric = vec![0.0f64; channels + 1];
    for (e, n) in numeric.iter_mut().enumerate() {
        let orig = store.value(bank.logits).data()[e];
        let at = |v: f32, store: &mut ParamStore| -> Result<f64> {
            store.value_mut(bank.logits).data_mut()[e] = v;
            let mut t = Tape::new();
            let th = bank.theta(&mut t, store)?;
            Ok(project(t.value(th), &weights))
        };
        let (p1, m1) = (at(orig + H, &mut store)?, at(orig - H, &mut store)?);
        let (p2, m2) = (at(orig + 2.0 * H, &mut store)?, at(orig - 2.0 * H, &mut store)?);
        *n = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * H as f64);
        store.value_mut(bank.logits).data_mut()[e] = orig;
    }
    Ok(rel_error(analytic.data(), &numeric))
}

fn random_cu(name: &str, operator: OperatorSupport, r: &mut Rng) -> CuProfile {
    CuProfile {
        name: name.into(),
        operator,
        precision: Precision::Int8,
        p_out: 1 << r.random_range(0..5),
        p_in: 1 << r.random_range(0..5),
        cycles_per_step: r.random_range(0.5..4.0),
        overhead_cycles: r.random_range(0.0..5.0),
        active_power_mw: r.random_range(0.0..3.0),
        max_kernel_rows: None,
    }
}

/// Relaxed layer latency or energy with respect to the effective channel
/// counts, at a fixed temperature. Counts stay away from zero, where the
/// fixed overhead switches on, and the per-step cost dominates the overhead
/// so that f32 differences resolve the slope.
fn relaxed_cost(energy: bool, r: &mut Rng) -> Result<f64> {
    let n_cu = r.random_range(2..4);
    let mut platform = PlatformProfile::diana_like();
    platform.cus = (0..n_cu).map(|i| random_cu(&format!("cu{i}"), OperatorSupport::Any, r)).collect();
    platform.idle_power_mw = r.random_range(0.0..2.0);
    let o = r.random_range(1..5);
    let geometry = LayerGeometry {
        c_in: r.random_range(1..9),
        c_out: 16,
        kernel: r.random_range(1..4),
        stride: 1,
        padding: 0,
        in_h: o,
        in_w: o,
        out_h: o,
        out_w: o,
    };
    let op = if r.random_bool(0.5) { OpKind::StdConv } else { OpKind::DwConv };
    let counts: Vec<Tensor> = (0..n_cu).map(|_| Tensor::scalar(r.random_range(0.5..16.0))).collect();
    // temperature fixed from the latencies at the base point
    let lats: Vec<f32> = {
        let mut t = Tape::new();
        let units: Vec<RelaxedUnit> = counts
            .iter()
            .enumerate()
            .map(|(cu, c)| RelaxedUnit { cu, op, channels: t.constant(c.clone()) })
            .collect();
        units
            .iter()
            .map(|u| {
                let cu = &platform.cus[u.cu];
                let n = t.value(u.channels).item() as f64;
                chanmap::hwmodel::cu_latency(cu, op, &geometry, n, chanmap::hwmodel::Rounding::Linear).unwrap() as f32
            })
            .collect()
    };
    let tau = 0.1 * lats.iter().sum::<f32>() / lats.len() as f32;
    let f = |t: &mut Tape, v: &[Var]| {
        let units: Vec<RelaxedUnit> = v.iter().enumerate().map(|(cu, &channels)| RelaxedUnit { cu, op, channels }).collect();
        let (m, e) = relaxed_layer_cost(t, &platform, &geometry, &units, Tau::Fixed(tau))?;
        Ok(if energy { e } else { m })
    };
    check(&counts, &f, r)
}

pub fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let fams = families();
    for (fi, fam) in fams.iter().enumerate() {
        let mut r = rng::derive(0x6772, fi as u64);
        for inst in 0..INSTANCES {
            match (fam.run)(&mut r) {
                Ok(e) if e < TOL => worst = worst.max(e),
                Ok(e) => failures.push(format!("{} #{inst}: {e:.2e}", fam.name)),
                Err(e) => failures.push(format!("{} #{inst}: {e}", fam.name)),
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let mut detail = format!(
        "{} families x {INSTANCES} instances, worst rel. error {worst:.2e} (< {TOL:e}), {secs:.1}s (< {TIME_LIMIT_S}s)",
        fams.len()
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failures: {}", failures.join(", ")));
    }
    Outcome::new(failures.is_empty() && secs < TIME_LIMIT_S, detail)
}

/// Blending quantized weights and running one convolution equals running
/// every quantized copy and blending the outputs.
pub fn blend_equivalence() -> Outcome {
    let mut r = rng::seeded(0x626c);
    let precisions = [Precision::Ternary, Precision::Int8, Precision::Float];
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let (n, c_in, c_out) = (r.random_range(1..4), r.random_range(1..17), r.random_range(1..33));
        let k = [1, 3, 5][r.random_range(0..3)];
        let (stride, size) = (r.random_range(1..3), r.random_range(k.max(4)..13));
        let branches = r.random_range(2..4);
        let x = Tensor::normal([n, c_in, size, size], 1.0, &mut r);
        let w = Tensor::normal([c_out, c_in, k, k], 0.3, &mut r);
        let bias = Tensor::normal([c_out], 0.1, &mut r);
        let mut probs = Tensor::uniform([c_out, branches], 0.0, 1.0, &mut r);
        for row in probs.data_mut().chunks_mut(branches) {
            let s: f32 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        let quantized: Vec<Tensor> = (0..branches)
            .map(|j| WeightQuantizer::for_precision(precisions[j], 0.05).quantize(&w).unwrap())
            .collect();
        let p = Conv2dParams::new(stride, k / 2, 1);
        let mut t = Tape::new();
        let (xv, bv, th) = (t.constant(x), t.constant(bias), t.constant(probs));
        let qs: Vec<Var> = quantized.into_iter().map(|q| t.constant(q)).collect();
        let outs: Vec<Var> = qs.iter().map(|&q| t.conv2d(xv, q, Some(bv), p).unwrap()).collect();
        let by_outputs = blend_outputs(&mut t, &outs, th).unwrap();
        let w_eff = blend_weights(&mut t, &qs, th).unwrap();
        let by_weights = t.conv2d(xv, w_eff, Some(bv), p).unwrap();
        worst = worst.max(t.value(by_outputs).max_abs_diff(t.value(by_weights)));
    }
    Outcome::new(worst < 1e-4, format!("50 layers, max abs difference {worst:.2e} (< 1e-4)"))
}
