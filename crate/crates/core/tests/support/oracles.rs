//! Independent reference implementations and the property checks built on
//! them. Shared by the core integration tests and the acceptance suite.
//!
//! Every check returns `Ok(summary)` or `Err(first failure)`.

#![allow(dead_code)]

use std::collections::HashMap;

use dissect_core::dataset::{label_patch, LesionMask, Patch, PatchRect};
use dissect_core::dissect::{compute_threshold, probe, ProbeConfig, ThresholdSource};
use dissect_core::model::{Layer, LayerOp, Model};
use dissect_core::ops::{self, BatchNormParams, ConvSpec};
use dissect_core::trainer::evaluate_auc;
use dissect_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

/// Finite-difference step and tolerance for gradient checks (the loss head
/// is held to 1e-5).
pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;
/// Random tensors drawn per backward kernel.
pub const GRAD_TRIALS: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

// ---------------------------------------------------------------------------
// f64 reference forwards
// ---------------------------------------------------------------------------

pub fn conv_ref64(x: &[f64], shape: [usize; 3], w: &[f64], b: &[f64], s: &ConvSpec) -> Vec<f64> {
    let [c, h, wd] = shape;
    let oh = (h + 2 * s.padding - s.kernel_h) / s.stride + 1;
    let ow = (wd + 2 * s.padding - s.kernel_w) / s.stride + 1;
    let mut out = vec![0.0; s.out_channels * oh * ow];
    for co in 0..s.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..s.kernel_h {
                        for kx in 0..s.kernel_w {
                            let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                            let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * wd + ix as usize;
                            let wi = ((co * c + ci) * s.kernel_h + ky) * s.kernel_w + kx;
                            acc += w[wi] * x[xi];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc + b[co];
            }
        }
    }
    out
}

/// Plain quadruple loop in `f32`, accumulating channel, then kernel row, then
/// kernel column, with the bias added last.
pub fn conv_ref32(x: &Tensor, w: &Tensor, b: &Tensor, s: &ConvSpec) -> Vec<f32> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * s.padding - s.kernel_h) / s.stride + 1;
    let ow = (wd + 2 * s.padding - s.kernel_w) / s.stride + 1;
    let (x, w, b) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0f32; s.out_channels * oh * ow];
    for co in 0..s.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ci in 0..c {
                    for ky in 0..s.kernel_h {
                        for kx in 0..s.kernel_w {
                            let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                            let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w[((co * c + ci) * s.kernel_h + ky) * s.kernel_w + kx]
                                * x[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc + b[co];
            }
        }
    }
    out
}

fn maxpool_ref64(x: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn fc_ref64(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>() + bi)
        .collect()
}

fn xent_ref64(l: &[f64], label: usize) -> f64 {
    let m = l[0].max(l[1]);
    m + ((l[0] - m).exp() + (l[1] - m).exp()).ln() - l[label]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compares every component of `analytic` against a central difference of
/// the scalar `loss` around `at`.
fn fd_compare(what: &str, analytic: &Tensor, at: &[f64], loss: impl FnMut(&[f64]) -> f64) -> Result<usize, String> {
    fd_compare_tol(what, analytic, at, FD_TOL, loss)
}

fn fd_compare_tol(
    what: &str,
    analytic: &Tensor,
    at: &[f64],
    tol: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> Result<usize, String> {
    if analytic.len() != at.len() {
        return Err(format!("{what}: gradient has {} entries, expected {}", analytic.len(), at.len()));
    }
    let mut p = at.to_vec();
    for i in 0..at.len() {
        p[i] = at[i] + FD_EPS;
        let up = loss(&p);
        p[i] = at[i] - FD_EPS;
        let down = loss(&p);
        p[i] = at[i];
        let numeric = (up - down) / (2.0 * FD_EPS);
        let a = analytic.data()[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
        if !(rel <= tol) {
            return Err(format!(
                "{what}[{i}]: analytic {a:.8} vs numeric {numeric:.8} (relative error {rel:.2e})"
            ));
        }
    }
    Ok(at.len())
}

/// Redraws entries that sit within `2 * FD_EPS` of zero.
fn away_from_zero(rng: &mut impl Rng, t: &mut Tensor) {
    for v in t.data_mut() {
        while v.abs() < 2.0 * FD_EPS as f32 {
            *v = rng.gen_range(-1.0f32..1.0);
        }
    }
}

/// Whether every 2x2 window has a unique maximum by a clear margin.
fn pool_windows_separated(x: &Tensor) -> bool {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let d = x.data();
    for ch in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut vals: Vec<f32> = (0..4)
                    .map(|k| d[(ch * h + 2 * oy + k / 2) * w + 2 * ox + k % 2])
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if ((vals[0] - vals[1]) as f64) < 4.0 * FD_EPS {
                    return false;
                }
            }
        }
    }
    true
}

fn grad_conv(rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for trial in 0..GRAD_TRIALS {
        let k = [1, 2, 3, 5][trial % 4];
        let stride = 1 + trial % 3;
        let padding = trial % 3;
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let h = rng.gen_range(k.max(2)..=7);
        let w = rng.gen_range(k.max(2)..=7);
        let spec = ConvSpec {
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
            in_channels: c_in,
            out_channels: c_out,
        };
        let x = random_tensor(rng, &[c_in, h, w]);
        let wt = random_tensor(rng, &spec.weight_shape());
        let b = random_tensor(rng, &[c_out]);
        let y = ops::conv2d_forward(&x, &wt, &b, &spec).map_err(|e| e.to_string())?;
        let r = random_tensor(rng, y.shape());
        let g = ops::conv2d_backward(&r, &x, &wt, &spec).map_err(|e| e.to_string())?;
        let (x64, w64, b64, r64) = (to64(&x), to64(&wt), to64(&b), to64(&r));
        let shape = [c_in, h, w];
        let tag = format!("conv k{k} s{stride} p{padding}");
        checked += fd_compare(&format!("{tag} input"), &g.input, &x64, |p| {
            dot(&conv_ref64(p, shape, &w64, &b64, &spec), &r64)
        })?;
        checked += fd_compare(&format!("{tag} weights"), &g.weights, &w64, |p| {
            dot(&conv_ref64(&x64, shape, p, &b64, &spec), &r64)
        })?;
        checked += fd_compare(&format!("{tag} bias"), &g.bias, &b64, |p| {
            dot(&conv_ref64(&x64, shape, &w64, p, &spec), &r64)
        })?;
    }
    Ok(checked)
}

fn grad_relu(rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for _ in 0..GRAD_TRIALS {
        let shape = [rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6)];
        let mut x = random_tensor(rng, &shape);
        away_from_zero(rng, &mut x);
        let r = random_tensor(rng, &shape);
        let g = ops::relu_backward(&r, &x).map_err(|e| e.to_string())?;
        let r64 = to64(&r);
        checked += fd_compare("relu", &g, &to64(&x), |p| {
            p.iter().zip(&r64).map(|(&v, &ri)| v.max(0.0) * ri).sum()
        })?;
    }
    Ok(checked)
}

fn grad_maxpool(rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for _ in 0..GRAD_TRIALS {
        let shape = [rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3)];
        let x = loop {
            let x = random_tensor(rng, &shape);
            if pool_windows_separated(&x) {
                break x;
            }
        };
        let (y, idx) = ops::maxpool2(&x).map_err(|e| e.to_string())?;
        let r = random_tensor(rng, y.shape());
        let g = ops::maxpool2_backward(&r, &idx).map_err(|e| e.to_string())?;
        let r64 = to64(&r);
        checked += fd_compare("maxpool2", &g, &to64(&x), |p| dot(&maxpool_ref64(p, shape), &r64))?;
    }
    Ok(checked)
}

fn grad_fc(rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for _ in 0..GRAD_TRIALS {
        let (m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
        let x = random_tensor(rng, &[n]);
        let w = random_tensor(rng, &[m, n]);
        let b = random_tensor(rng, &[m]);
        let r = random_tensor(rng, &[m]);
        let g = ops::fc_backward(&r, &x, &w).map_err(|e| e.to_string())?;
        let (x64, w64, b64, r64) = (to64(&x), to64(&w), to64(&b), to64(&r));
        checked += fd_compare("fc input", &g.input, &x64, |p| dot(&fc_ref64(p, &w64, &b64), &r64))?;
        checked += fd_compare("fc weights", &g.weights, &w64, |p| dot(&fc_ref64(&x64, p, &b64), &r64))?;
        checked += fd_compare("fc bias", &g.bias, &b64, |p| dot(&fc_ref64(&x64, &w64, p), &r64))?;
    }
    Ok(checked)
}

fn grad_gap(rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for _ in 0..GRAD_TRIALS {
        let shape = [rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let x = random_tensor(rng, &shape);
        let r = random_tensor(rng, &[shape[0]]);
        let g = ops::global_avgpool_backward(&r, &shape).map_err(|e| e.to_string())?;
        let r64 = to64(&r);
        let plane = shape[1] * shape[2];
        checked += fd_compare("global_avgpool", &g, &to64(&x), |p| {
            p.chunks(plane)
                .zip(&r64)
                .map(|(c, &ri)| c.iter().sum::<f64>() / plane as f64 * ri)
                .sum()
        })?;
    }
    Ok(checked)
}

fn grad_xent(rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for trial in 0..GRAD_TRIALS {
        let l = Tensor::new(vec![2], vec![rng.gen_range(-4.0f32..4.0), rng.gen_range(-4.0f32..4.0)]).unwrap();
        let label = trial % 2;
        let (_, g) = ops::softmax_xent(&l, label).map_err(|e| e.to_string())?;
        checked += fd_compare_tol("softmax_xent", &g, &to64(&l), 1e-5, |p| xent_ref64(p, label))?;
    }
    Ok(checked)
}

fn grad_batchnorm(rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for _ in 0..GRAD_TRIALS {
        let c = rng.gen_range(1..=4);
        let shape = [c, rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let params = BatchNormParams {
            mean: random_tensor(rng, &[c]),
            var: Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(0.2f32..2.0)).collect()).unwrap(),
            gamma: random_tensor(rng, &[c]),
            beta: random_tensor(rng, &[c]),
            eps: 1e-5,
        };
        let x = random_tensor(rng, &shape);
        let r = random_tensor(rng, &shape);
        let g = ops::batchnorm_backward(&r, &params).map_err(|e| e.to_string())?;
        let r64 = to64(&r);
        let plane = shape[1] * shape[2];
        let (m, v, ga, be) = (to64(&params.mean), to64(&params.var), to64(&params.gamma), to64(&params.beta));
        let eps = params.eps as f64;
        checked += fd_compare("batchnorm", &g, &to64(&x), |p| {
            p.iter()
                .enumerate()
                .map(|(i, &xi)| {
                    let ch = i / plane;
                    ((xi - m[ch]) / (v[ch] + eps).sqrt() * ga[ch] + be[ch]) * r64[i]
                })
                .sum()
        })?;
    }
    Ok(checked)
}

/// Every backward kernel against central differences of an `f64` reference
/// forward, `GRAD_TRIALS` random tensors each.
pub fn gradient_correctness(seed: u64) -> Check {
    let mut rng = rng(seed);
    let kernels: [(&str, fn(&mut ChaCha8Rng) -> Result<usize, String>); 7] = [
        ("conv2d", grad_conv),
        ("relu", grad_relu),
        ("maxpool2", grad_maxpool),
        ("fc", grad_fc),
        ("global_avgpool", grad_gap),
        ("softmax_xent", grad_xent),
        ("batchnorm", grad_batchnorm),
    ];
    let mut total = 0;
    for (name, check) in kernels {
        total += check(&mut rng).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!(
        "{} kernels x {GRAD_TRIALS} tensors, {total} partial derivatives within {FD_TOL:e}",
        kernels.len()
    ))
}

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

pub fn conv_matches_reference(seed: u64, cases: usize) -> Check {
    let mut rng = rng(seed);
    for case in 0..cases {
        let kernel_h = rng.gen_range(1..=5);
        let kernel_w = if case % 3 == 0 { rng.gen_range(1..=5) } else { kernel_h };
        let padding = rng.gen_range(0..=2);
        let spec = ConvSpec {
            kernel_h,
            kernel_w,
            stride: rng.gen_range(1..=3),
            padding,
            in_channels: rng.gen_range(1..=5),
            out_channels: rng.gen_range(1..=7),
        };
        let h = rng.gen_range(kernel_h.saturating_sub(2 * padding).max(1)..=24);
        let w = rng.gen_range(kernel_w.saturating_sub(2 * padding).max(1)..=70);
        let x = random_tensor(&mut rng, &[spec.in_channels, h, w]);
        let wt = random_tensor(&mut rng, &spec.weight_shape());
        let b = random_tensor(&mut rng, &[spec.out_channels]);
        let got = ops::conv2d_forward(&x, &wt, &b, &spec).map_err(|e| format!("{spec:?} on {h}x{w}: {e}"))?;
        let want = conv_ref32(&x, &wt, &b, &spec);
        if got.data().len() != want.len() {
            return Err(format!("{spec:?} on {h}x{w}: {} outputs, expected {}", got.len(), want.len()));
        }
        if let Some(i) = got.data().iter().zip(&want).position(|(a, b)| a != b) {
            return Err(format!(
                "{spec:?} on {h}x{w}: output {i} is {} but the loop gives {}",
                got.data()[i],
                want[i]
            ));
        }
    }
    Ok(format!("{cases} random convolutions bit-identical to the quadruple loop"))
}

/// 4-connected components by explicit-stack flood fill.
pub fn components_ref(mask: &LesionMask) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (mask.height(), mask.width());
    let mut comp = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if !mask.as_slice()[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        let mut stack = vec![start];
        comp[start] = id;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.as_slice()[j] && comp[j] == usize::MAX {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Pixel-count form of the labeling rule, in integer arithmetic.
pub fn label_ref(rect: &PatchRect, mask: &LesionMask) -> bool {
    let (comp, sizes) = components_ref(mask);
    let w = mask.width();
    let mut inside = vec![0usize; sizes.len()];
    let mut covered = 0;
    for y in rect.y0..rect.y0 + rect.h {
        for x in rect.x0..rect.x0 + rect.w {
            let c = comp[y * w + x];
            if c != usize::MAX {
                inside[c] += 1;
                covered += 1;
            }
        }
    }
    inside.iter().zip(&sizes).any(|(&n, &s)| 10 * n >= 3 * s) || 10 * covered >= 3 * rect.w * rect.h
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> LesionMask {
    let mut data = vec![false; h * w];
    for _ in 0..rng.gen_range(0..=4) {
        let (cy, cx) = (rng.gen_range(0..h) as f32, rng.gen_range(0..w) as f32);
        let (ry, rx) = (rng.gen_range(0.5f32..8.0), rng.gen_range(0.5f32..8.0));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    data[y * w + x] = true;
                }
            }
        }
    }
    // Occasional speckle adds tiny lesions and holes.
    if rng.gen_bool(0.3) {
        for v in data.iter_mut() {
            if rng.gen_bool(0.004) {
                *v = !*v;
            }
        }
    }
    LesionMask::from_vec(h, w, data).unwrap()
}

pub fn label_patch_matches_oracle(seed: u64, pairs: usize) -> Check {
    let mut rng = rng(seed);
    let mut positives = 0;
    for i in 0..pairs {
        let (h, w) = (rng.gen_range(4..=40), rng.gen_range(4..=40));
        let mask = random_mask(&mut rng, h, w);
        let rh = rng.gen_range(1..=h);
        let rw = rng.gen_range(1..=w);
        let rect = PatchRect {
            x0: rng.gen_range(0..=w - rw),
            y0: rng.gen_range(0..=h - rh),
            w: rw,
            h: rh,
        };
        let got = label_patch(&rect, &mask).map_err(|e| format!("pair {i}: {e}"))?;
        let want = label_ref(&rect, &mask);
        if got != want {
            return Err(format!("pair {i}: {rect:?} on {h}x{w} mask labeled {got}, oracle says {want}"));
        }
        positives += usize::from(want);
    }
    Ok(format!("{pairs} mask/rect pairs agree ({positives} positive)"))
}

pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn auc_matches_pair_count(seed: u64, sets: usize) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for s in 0..sets {
        let n = rng.gen_range(2..=300);
        let levels = [3u32, 10, 1000, 1 << 20][s % 4];
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let got = evaluate_auc(&scores, &labels).map_err(|e| format!("set {s}: {e}"))?;
        let want = auc_pairs(&scores, &labels);
        let diff = (got - want).abs();
        worst = worst.max(diff);
        if diff > 1e-12 {
            return Err(format!("set {s} (n={n}): AUC {got} vs pair count {want}"));
        }
    }
    Ok(format!("{sets} random sets agree with pair counting (max difference {worst:.1e})"))
}

/// A two-stage model small enough to probe quickly.
pub fn tiny_model(seed: u64) -> Model {
    let mut rng = rng(seed);
    let spec = ConvSpec::square(3, 1, 1, 1, 6);
    let layers = vec![
        Layer::new(
            "conv1",
            LayerOp::Conv {
                spec,
                weight: random_tensor(&mut rng, &spec.weight_shape()),
                bias: random_tensor(&mut rng, &[6]),
            },
        ),
        Layer::new("relu1", LayerOp::Relu),
        Layer::new("pool1", LayerOp::MaxPool2),
        Layer::new("gap", LayerOp::GlobalAvgPool),
        Layer::new(
            "fc",
            LayerOp::Fc {
                weight: random_tensor(&mut rng, &[2, 6]),
                bias: random_tensor(&mut rng, &[2]),
            },
        ),
    ];
    Model::new([1, 12, 12], layers).unwrap()
}

/// Probes random patches, some of them pixel-identical so that scores tie,
/// and compares every unit's top-k with a full sort of all scores.
pub fn topk_matches_full_sort(seed: u64, patch_count: usize, k: usize) -> Check {
    let mut rng = rng(seed);
    let model = tiny_model(seed ^ 0x5eed);
    let mut patches: Vec<Patch> = Vec::with_capacity(patch_count);
    for i in 0..patch_count {
        let pixels = if i > 0 && rng.gen_bool(0.25) {
            patches[rng.gen_range(0..i)].pixels.clone()
        } else {
            let n = 144;
            Tensor::new(vec![1, 12, 12], (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
        };
        patches.push(Patch {
            patch_id: format!("p{:04}", rng.gen_range(0..100_000)) + &format!("-{i}"),
            source_case_id: "c".into(),
            rect: PatchRect { x0: 0, y0: 0, w: 12, h: 12 },
            pixels,
            label: rng.gen_bool(0.5),
        });
    }
    let cfg = ProbeConfig {
        k,
        quantile: 0.05,
        threshold_source: ThresholdSource::MaxScores,
    };
    let catalog = probe(&model, "tiny", "conv1", &patches, &cfg).map_err(|e| e.to_string())?;
    let maps: Vec<Tensor> = patches
        .iter()
        .map(|p| model.forward(&p.pixels, &["conv1"]).unwrap().captures.remove(0).tensor)
        .collect();
    for (u, rec) in catalog.units.iter().enumerate() {
        let mut all: Vec<(f32, &str, usize)> = maps
            .iter()
            .zip(&patches)
            .map(|(m, p)| {
                let plane = m.channel(u);
                let best = plane
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > plane[b] { i } else { b });
                (plane[best], p.patch_id.as_str(), best)
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let want = &all[..k.min(all.len())];
        if rec.top_k.len() != want.len() {
            return Err(format!("unit {u}: {} entries, expected {}", rec.top_k.len(), want.len()));
        }
        let fw = maps[0].shape()[2];
        for (rank, (e, w)) in rec.top_k.iter().zip(want).enumerate() {
            if e.score != w.0 || e.patch_id != w.1 || e.argmax != (w.2 / fw, w.2 % fw) {
                return Err(format!(
                    "unit {u} rank {rank}: probe has ({}, {}, {:?}), full sort has ({}, {}, {:?})",
                    e.score,
                    e.patch_id,
                    e.argmax,
                    w.0,
                    w.1,
                    (w.2 / fw, w.2 % fw)
                ));
            }
        }
        let scores: Vec<f32> = all.iter().map(|a| a.0).collect();
        let t = compute_threshold(&scores, cfg.quantile).map_err(|e| e.to_string())?;
        if t.to_bits() != rec.threshold.to_bits() {
            return Err(format!("unit {u}: threshold {} vs {}", rec.threshold, t));
        }
    }
    Ok(format!(
        "{} units x top-{k} over {patch_count} patches match a full sort",
        catalog.units.len()
    ))
}

fn labels_map(patches: &[Patch]) -> HashMap<String, bool> {
    patches.iter().map(|p| (p.patch_id.clone(), p.label)).collect()
}

// ---------------------------------------------------------------------------
// Labeling boundary and quantile sandwich
// ---------------------------------------------------------------------------

/// Exact 30% cases for both halves of the rule.
pub fn labeling_boundary() -> Check {
    let (h, w) = (120, 160);
    let tall = PatchRect { x0: 0, y0: 0, w: 30, h: 100 };
    let expect = |name: &str, mask: &LesionMask, rect: &PatchRect, want: bool| -> Result<(), String> {
        let got = label_patch(rect, mask).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("{name}: labeled {got}, expected {want}"));
        }
        Ok(())
    };

    // A 10x100 lesion; the window holds 300 of its 1000 pixels (10% of the window).
    let mut full = LesionMask::empty(h, w);
    for y in 0..10 {
        for x in 0..100 {
            full.set(y, x, true);
        }
    }
    expect("300 of 1000 lesion pixels", &full, &tall, true)?;

    // Same size lesion with one pixel moved out of the window: 299 of 1000.
    let mut moved = full.clone();
    moved.set(0, 0, false);
    moved.set(10, 99, true);
    if components_ref(&moved).1 != vec![1000] {
        return Err("fixture lesion is not a single 1000-pixel component".into());
    }
    expect("299 of 1000 lesion pixels", &moved, &tall, false)?;

    // Window coverage: 30 of 100 window pixels, on a lesion far larger than
    // the window (a 40-row band joined to the window by a 1-px strip).
    let mut big = LesionMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let band = y < 40;
            let strip = (40..50).contains(&y) && x == 50;
            let block = (50..53).contains(&y) && (50..60).contains(&x);
            if band || strip || block {
                big.set(y, x, true);
            }
        }
    }
    if components_ref(&big).1.len() != 1 {
        return Err("fixture coverage lesion is not connected".into());
    }
    let small = PatchRect { x0: 50, y0: 50, w: 10, h: 10 };
    expect("30% window coverage", &big, &small, true)?;
    big.set(52, 59, false);
    expect("29% window coverage", &big, &small, false)?;
    Ok("30.0% of a lesion is positive, 29.9% is negative; window coverage likewise".into())
}

pub const SANDWICH_QUANTILES: [f64; 3] = [0.5, 0.05, 0.005];

pub fn quantile_sandwich(seed: u64, distributions: usize) -> Check {
    let mut rng = rng(seed);
    for d in 0..distributions {
        let n = rng.gen_range(50..=5000);
        let samples: Vec<f32> = match d % 4 {
            0 => (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            1 => (0..n).map(|_| rng.gen_range(0..7) as f32).collect(),
            2 => (0..n).map(|_| rng.gen::<f32>().powi(8) * 100.0).collect(),
            _ => (0..n)
                .map(|_| if rng.gen_bool(0.6) { 0.0 } else { rng.gen_range(0.0f32..5.0) })
                .collect(),
        };
        for q in SANDWICH_QUANTILES {
            let t = compute_threshold(&samples, q).map_err(|e| e.to_string())?;
            let above = |v: f32| samples.iter().filter(|&&s| s > v).count() as f64 / n as f64;
            if above(t) > q {
                return Err(format!("distribution {d}, q={q}: {} of samples exceed T={t}", above(t)));
            }
            if let Some(lower) = samples.iter().copied().filter(|&s| s < t).max_by(f32::total_cmp) {
                if above(lower) <= q {
                    return Err(format!(
                        "distribution {d}, q={q}: next-lower sample {lower} already satisfies the bound"
                    ));
                }
            }
        }
    }
    Ok(format!(
        "{distributions} distributions x q in {SANDWICH_QUANTILES:?} satisfy the sandwich"
    ))
}
