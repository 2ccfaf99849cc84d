//! Independent reference implementations and a finite-difference harness.
//!
//! Nothing here calls into the crate's kernels; each oracle is a direct
//! transcription of the textbook formula with explicit loops.
#![allow(dead_code)]

use tgdd::rng::Stream;
use tgdd::Tensor;

pub fn random_tensor(shape: &[usize], stream: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| stream.normal()).collect()).unwrap()
}

/// Relative error with an absolute floor of 1e-6 on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Relative error of whole vectors, scaled by the larger max-magnitude.
pub fn max_rel_err_scaled(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn naive_conv2d(x: &Tensor, k: &Tensor, bias: &[f64]) -> Tensor {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = k.shape()[0];
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * cout * h * w];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    s += kd[((o * cin + c) * 3 + ky) * 3 + kx]
                                        * xd[((n * cin + c) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, h, w], out).unwrap()
}

pub fn naive_avgpool(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let y = 2 * oy as isize + dy;
                        let xx = 2 * ox as isize + dx;
                        if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                            s += x.data()[(p * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(p * oh + oy) * ow + ox] = s / 9.0;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).unwrap()
}

pub fn naive_instance_norm(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let (b, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut out = vec![0.0; x.numel()];
    for n in 0..b {
        for ch in 0..c {
            let plane = &x.data()[(n * c + ch) * hw..][..hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            for i in 0..hw {
                out[(n * c + ch) * hw + i] = scale[ch] * (plane[i] - mean) / (var + 1e-5).sqrt() + shift[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn naive_linear(x: &Tensor, w: &Tensor, bias: &[f64]) -> Tensor {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut out = vec![0.0; b * k];
    for n in 0..b {
        for o in 0..k {
            let mut s = bias[o];
            for i in 0..f {
                s += x.data()[n * f + i] * w.data()[o * f + i];
            }
            out[n * k + o] = s;
        }
    }
    Tensor::new(vec![b, k], out).unwrap()
}

/// Cross-entropy of one logit row via log-sum-exp.
pub fn naive_ce_row(row: &[f64], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[label]
}

pub fn naive_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(n, &y)| naive_ce_row(&logits.data()[n * c..(n + 1) * c], y))
        .sum::<f64>()
        / labels.len() as f64
}

pub const FD_STEP: f64 = 1e-4;

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, i: usize) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += FD_STEP;
    let mut minus = x.clone();
    minus.data_mut()[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// Checks `analytic` against central differences at `probes` random
/// coordinates and returns the worst relative error.
pub fn fd_probe(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    probes: usize,
    stream: &mut Stream,
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = stream.below(x.numel());
        let numeric = central_difference(f, x, i);
        worst = worst.max(rel_err(numeric, analytic.data()[i]));
    }
    worst
}

use tgdd::{Tape, Var};

pub type OpBuilder<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

/// Builds `loss = ||op(inputs) - target||^2` for a fixed random target.
fn op_loss(inputs: &[Tensor], build: OpBuilder, target_seed: u64, grads: bool) -> (f64, Vec<Option<Tensor>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let target = random_tensor(tape.shape(out), &mut Stream::new(target_seed, "target"));
    let t = tape.constant(target);
    let d = tape.sub(out, t).unwrap();
    let loss = tape.sum_squares(d).unwrap();
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| tape.grad(v).cloned()).collect())
}

/// Finite-difference check of one operation over all its inputs.
///
/// `skip(input, coord)` lets callers exclude probes sitting on a kink.
/// Returns `(worst relative error, probes evaluated)`.
pub fn check_op_gradients(
    inputs: &[Tensor],
    build: OpBuilder,
    probes: usize,
    seed: u64,
    skip: &dyn Fn(usize, usize) -> bool,
) -> (f64, usize) {
    let (_, grads) = op_loss(inputs, build, seed, true);
    let mut stream = Stream::new(seed, "probes");
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < probes {
        attempts += 1;
        assert!(attempts < probes * 50, "too many skipped probes");
        let which = stream.below(inputs.len());
        let i = stream.below(inputs[which].numel());
        if skip(which, i) {
            continue;
        }
        let mut f = |x: &Tensor| {
            let mut xs = inputs.to_vec();
            xs[which] = x.clone();
            op_loss(&xs, build, seed, false).0
        };
        let numeric = central_difference(&mut f, &inputs[which], i);
        let analytic = grads[which].as_ref().map(|g| g.data()[i]).unwrap_or(0.0);
        worst = worst.max(rel_err(numeric, analytic));
        done += 1;
    }
    (worst, done)
}

use tgdd::models::ModelSnapshot;

/// ConvNet embedding computed with the loop references above.
pub fn naive_embed(model: &ModelSnapshot, x: &Tensor) -> Tensor {
    let mut h = x.clone();
    for i in 0..model.config().depth {
        let w = model.param(&format!("conv{i}.weight")).unwrap();
        let b = model.param(&format!("conv{i}.bias")).unwrap();
        let s = model.param(&format!("norm{i}.scale")).unwrap();
        let t = model.param(&format!("norm{i}.shift")).unwrap();
        h = naive_conv2d(&h, w, b.data());
        h = naive_instance_norm(&h, s.data(), t.data());
        h = h.map(|v| v.max(0.0));
        h = naive_avgpool(&h);
    }
    let n = h.shape()[0];
    let f = h.numel() / n;
    h.reshape(&[n, f]).unwrap()
}

pub fn naive_logits(model: &ModelSnapshot, x: &Tensor) -> Tensor {
    let e = naive_embed(model, x);
    naive_linear(&e, model.param("head.weight").unwrap(), model.param("head.bias").unwrap().data())
}

fn naive_row_mean(e: &Tensor) -> Vec<f64> {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let mut m = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            m[j] += e.data()[r * d + j];
        }
    }
    m.iter().map(|v| v / n as f64).collect()
}

/// Class-wise squared distance between mean embeddings, summed.
pub fn naive_mmd(model: &ModelSnapshot, real: &[Tensor], syn: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (r, s) in real.iter().zip(syn) {
        let mr = naive_row_mean(&naive_embed(model, r));
        let ms = naive_row_mean(&naive_embed(model, s));
        total += mr.iter().zip(&ms).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total
}

/// Cross-entropy over class batches, as a global mean or a per-class mean summed.
pub fn naive_sdc(model: &ModelSnapshot, syn: &[Tensor], per_class: bool) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (c, s) in syn.iter().enumerate() {
        let logits = naive_logits(model, s);
        let k = logits.shape()[1];
        let n = logits.shape()[0];
        let ce: f64 = (0..n).map(|i| naive_ce_row(&logits.data()[i * k..(i + 1) * k], c)).sum();
        if per_class {
            sum += ce / n as f64;
        } else {
            sum += ce;
            count += n;
        }
    }
    if per_class {
        sum
    } else {
        sum / count as f64
    }
}

use std::rc::Rc;
use tgdd::models::ConvNetConfig;
use tgdd::tensor::SpatialMap;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
pub type Skip = Box<dyn Fn(usize, usize) -> bool>;

/// One differentiable operation with inputs and a kink filter.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
    pub skip: Skip,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: Build) -> GradCase {
    GradCase {
        name,
        inputs,
        build,
        skip: Box::new(|_, _| false),
    }
}

/// Every differentiable tape operation on random inputs.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut s = Stream::new(10, "fd");
    let x4 = random_tensor(&[2, 3, 5, 4], &mut s);
    let k = random_tensor(&[2, 3, 3, 3], &mut s);
    let b2 = random_tensor(&[2], &mut s);
    let c3a = random_tensor(&[3], &mut s).map(|v| 1.0 + 0.3 * v);
    let c3b = random_tensor(&[3], &mut s);
    let x2 = random_tensor(&[4, 6], &mut s);
    let w = random_tensor(&[3, 6], &mut s);
    let b3 = random_tensor(&[3], &mut s);
    let warp = Rc::new(SpatialMap::from_fn((5, 4), (3, 3), 2, |g, y, x| {
        vec![((y + g) % 5, x, 0.75), ((y + 2) % 5, (x + 1) % 4, -0.5)]
    }));
    let shifted = x2.map(|v| v * 0.5 + 1.0);
    let xr = x2.clone();
    vec![
        case("conv2d", vec![x4.clone(), k, b2], Box::new(|tp, v| tp.conv2d(v[0], v[1], v[2]).unwrap())),
        case("avgpool2d", vec![x4.clone()], Box::new(|tp, v| tp.avgpool2d(v[0]).unwrap())),
        case(
            "instance_norm",
            vec![x4.clone(), c3a, c3b],
            Box::new(|tp, v| tp.instance_norm(v[0], v[1], v[2]).unwrap()),
        ),
        GradCase {
            name: "relu",
            inputs: vec![x2.clone()],
            build: Box::new(|tp, v| tp.relu(v[0]).unwrap()),
            skip: Box::new(move |_, i| xr.data()[i].abs() < 1e-2),
        },
        case("linear", vec![x2.clone(), w.clone(), b3], Box::new(|tp, v| tp.linear(v[0], v[1], v[2]).unwrap())),
        case(
            "cross_entropy",
            vec![x2.clone()],
            Box::new(|tp, v| tp.cross_entropy(v[0], &[0, 5, 2, 2]).unwrap()),
        ),
        case("mean_rows", vec![x2.clone()], Box::new(|tp, v| tp.mean_rows(v[0]).unwrap())),
        case("slice_rows", vec![x2.clone()], Box::new(|tp, v| tp.slice_rows(v[0], 1, 2).unwrap())),
        case("concat_rows", vec![x2.clone(), w], Box::new(|tp, v| tp.concat_rows(&[v[0], v[1]]).unwrap())),
        case("add", vec![x2.clone(), shifted.clone()], Box::new(|tp, v| tp.add(v[0], v[1]).unwrap())),
        case("sub", vec![x2.clone(), shifted], Box::new(|tp, v| tp.sub(v[0], v[1]).unwrap())),
        case("scale", vec![x2.clone()], Box::new(|tp, v| tp.scale(v[0], -1.7).unwrap())),
        case("add_scalar", vec![x2.clone()], Box::new(|tp, v| tp.add_scalar(v[0], 0.3).unwrap())),
        case("sum", vec![x2.clone()], Box::new(|tp, v| tp.sum(v[0]).unwrap())),
        case("sum_squares", vec![x2], Box::new(|tp, v| tp.sum_squares(v[0]).unwrap())),
        case("reshape", vec![x4.clone()], Box::new(|tp, v| tp.reshape(v[0], &[6, 20]).unwrap())),
        case("flatten", vec![x4.clone()], Box::new(|tp, v| tp.flatten(v[0]).unwrap())),
        case("spatial_map", vec![x4.clone()], Box::new(move |tp, v| tp.spatial_map(v[0], warp.clone()).unwrap())),
        case("saturation", vec![x4.clone()], Box::new(|tp, v| tp.saturation(v[0], 0.6).unwrap())),
        case("contrast", vec![x4], Box::new(|tp, v| tp.contrast(v[0], 1.4).unwrap())),
    ]
}

/// Cross-entropy of a ConvNet on `x` together with its ReLU on/off pattern.
fn convnet_loss(model: &ModelSnapshot, x: &Tensor, labels: &[usize]) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let trace = bound.trace(&mut tape, xv).unwrap();
    let logits = bound.head(&mut tape, trace.embedding).unwrap();
    let loss = tape.cross_entropy(logits, labels).unwrap();
    let mask = trace
        .activations
        .iter()
        .flat_map(|a| tape.value(*a).data().iter().map(|v| *v > 0.0).collect::<Vec<_>>())
        .collect();
    (tape.value(loss).item(), mask)
}

/// Finite-difference check of a whole ConvNet of the given depth, over its
/// parameters and its input. Probes whose perturbation flips a ReLU are skipped.
/// Returns `(worst relative error, probes evaluated)`.
pub fn convnet_gradient_check(depth: usize, probes: usize, seed: u64) -> (f64, usize) {
    let config = ConvNetConfig::new(depth, 3, 2, (8, 8)).with_width(4);
    let model = ModelSnapshot::build(config, &mut Stream::new(seed, "convnet")).unwrap();
    let mut s = Stream::new(seed, "convnet/probes");
    let x = random_tensor(&[2, 2, 8, 8], &mut s);
    let labels = [1, 2];

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.leaf(x.clone());
    let logits = bound.logits(&mut tape, xv).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let mut analytic: Vec<Tensor> = bound.take_grads(&mut tape).into_iter().map(|g| g.unwrap()).collect();
    analytic.push(tape.take_grad(xv).unwrap());

    let n_params = model.params().len();
    let mut worst = 0.0f64;
    let (mut done, mut attempts) = (0, 0);
    while done < probes {
        attempts += 1;
        assert!(attempts < probes * 50, "too many skipped probes");
        let which = s.below(n_params + 1);
        let numel = if which < n_params { model.params()[which].numel() } else { x.numel() };
        let i = s.below(numel);
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut xi = x.clone();
            if which < n_params {
                m.params_mut()[which].data_mut()[i] += delta;
            } else {
                xi.data_mut()[i] += delta;
            }
            convnet_loss(&m, &xi, &labels)
        };
        let (plus, mp) = eval(FD_STEP);
        let (minus, mm) = eval(-FD_STEP);
        if mp != mm {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(numeric, analytic[which].data()[i]));
        done += 1;
    }
    (worst, done)
}
