//! Forward and backward kernels.
//!
//! Every kernel is a pure function of its arguments. Backward passes are
//! written by hand per layer; there is no autodiff graph.
//!
//! Convolution accumulates each output element sequentially in
//! `(channel, ky, kx)` order starting from zero and adds the bias last, so
//! results are bit-reproducible against a naive loop using the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters of a 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, padding: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel dims must be >= 1, got {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h {
            return Err(Error::Shape(format!(
                "input height {h} with padding {} is smaller than kernel height {}",
                self.padding, self.kernel_h
            )));
        }
        if pw < self.kernel_w {
            return Err(Error::Shape(format!(
                "input width {w} with padding {} is smaller than kernel width {}",
                self.padding, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }
}

fn check_conv_shapes(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<[usize; 3]> {
    spec.validate()?;
    let [c, h, w] = input.dims::<3>("conv input")?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv input has {c} channels but spec declares in_channels={}",
            spec.in_channels
        )));
    }
    let wshape = weights.dims::<4>("conv weights")?;
    let expect = spec.weight_shape();
    let names = ["out_channels", "in_channels", "kernel_h", "kernel_w"];
    for i in 0..4 {
        if wshape[i] != expect[i] {
            return Err(Error::Shape(format!(
                "conv weights dim {i} ({}) is {} but spec expects {}",
                names[i], wshape[i], expect[i]
            )));
        }
    }
    Ok([c, h, w])
}

/// Zero-pads every channel of a `[c, h, w]` buffer by `p` on all sides.
fn pad_planes(x: &[f32], c: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    if p == 0 {
        return x.to_vec();
    }
    pad_rect(x, c, h, w, p, p)
}

/// Stride-1 correlation of `N` consecutive output pixels of one output
/// channel. Accumulates per pixel in `(channel, ky, kx)` order from zero.
#[inline(always)]
fn correlate_run<const N: usize>(
    xp: &[f32],
    plane: usize,
    wp: usize,
    wk: &[f32],
    c_in: usize,
    kh: usize,
    kw: usize,
    origin: usize,
) -> [f32; N] {
    let mut acc = [0.0f32; N];
    for c in 0..c_in {
        for ky in 0..kh {
            let row = &xp[c * plane + origin + ky * wp..];
            let taps = &wk[(c * kh + ky) * kw..(c * kh + ky + 1) * kw];
            for (kx, &wv) in taps.iter().enumerate() {
                let seg: &[f32; N] = row[kx..kx + N].try_into().expect("run fits in padded row");
                for i in 0..N {
                    acc[i] += wv * seg[i];
                }
            }
        }
    }
    acc
}

/// Like [`correlate_run`] for two output channels at once, sharing the input loads.
#[inline(always)]
fn correlate_run_pair<const N: usize>(
    xp: &[f32],
    plane: usize,
    wp: usize,
    (wa, wb): (&[f32], &[f32]),
    c_in: usize,
    kh: usize,
    kw: usize,
    origin: usize,
) -> ([f32; N], [f32; N]) {
    let mut acc_a = [0.0f32; N];
    let mut acc_b = [0.0f32; N];
    for c in 0..c_in {
        for ky in 0..kh {
            let row = &xp[c * plane + origin + ky * wp..];
            let base = (c * kh + ky) * kw;
            for kx in 0..kw {
                let seg: &[f32; N] = row[kx..kx + N].try_into().expect("run fits in padded row");
                let (va, vb) = (wa[base + kx], wb[base + kx]);
                for i in 0..N {
                    acc_a[i] += va * seg[i];
                    acc_b[i] += vb * seg[i];
                }
            }
        }
    }
    (acc_a, acc_b)
}

/// Correlates a pre-padded `[c_in, hp, wp]` buffer with `[c_out, c_in, kh, kw]`
/// weights at the given stride, adding `bias` (if any) after the sum.
///
/// On x86-64 the same code is also compiled for AVX2 and picked at runtime.
/// No fused multiply-add is enabled, so both builds round identically.
fn correlate_padded(
    xp: &[f32],
    dims: (usize, usize, usize),
    wt: &[f32],
    bias: Option<&[f32]>,
    kdims: (usize, usize, usize),
    stride: usize,
) -> (Vec<f32>, usize, usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { correlate_padded_avx2(xp, dims, wt, bias, kdims, stride) };
    }
    correlate_padded_impl(xp, dims, wt, bias, kdims, stride)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn correlate_padded_avx2(
    xp: &[f32],
    dims: (usize, usize, usize),
    wt: &[f32],
    bias: Option<&[f32]>,
    kdims: (usize, usize, usize),
    stride: usize,
) -> (Vec<f32>, usize, usize) {
    correlate_padded_impl(xp, dims, wt, bias, kdims, stride)
}

#[inline(always)]
fn correlate_padded_impl(
    xp: &[f32],
    (c_in, hp, wp): (usize, usize, usize),
    wt: &[f32],
    bias: Option<&[f32]>,
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
) -> (Vec<f32>, usize, usize) {
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    let plane = hp * wp;
    let wlen = c_in * kh * kw;
    let mut out = vec![0.0f32; c_out * oh * ow];
    // Paired output channels cover the 32-wide column blocks; the rest of
    // each row is finished per channel below.
    let paired_cols = if stride == 1 { ow / 32 * 32 } else { 0 };
    if paired_cols > 0 {
        for (pair_idx, dst) in out.chunks_exact_mut(2 * oh * ow).enumerate() {
            let oc = 2 * pair_idx;
            let (da, db) = dst.split_at_mut(oh * ow);
            let wa = &wt[oc * wlen..(oc + 1) * wlen];
            let wb = &wt[(oc + 1) * wlen..(oc + 2) * wlen];
            let (ba, bb) = bias.map_or((0.0, 0.0), |b| (b[oc], b[oc + 1]));
            for oy in 0..oh {
                for ox in (0..paired_cols).step_by(32) {
                    let (aa, ab) = correlate_run_pair::<32>(xp, plane, wp, (wa, wb), c_in, kh, kw, oy * wp + ox);
                    let at = oy * ow + ox;
                    for (o, a) in da[at..at + 32].iter_mut().zip(aa) {
                        *o = a + ba;
                    }
                    for (o, a) in db[at..at + 32].iter_mut().zip(ab) {
                        *o = a + bb;
                    }
                }
            }
        }
    }
    for (oc, dst) in out.chunks_exact_mut(oh * ow).enumerate() {
        let wk = &wt[oc * wlen..(oc + 1) * wlen];
        let b = bias.map_or(0.0, |b| b[oc]);
        let first_col = if oc < c_out / 2 * 2 { paired_cols } else { 0 };
        for oy in 0..oh {
            let orow = &mut dst[oy * ow..(oy + 1) * ow];
            if stride == 1 {
                let mut ox = first_col;
                while ox + 32 <= ow {
                    let acc = correlate_run::<32>(xp, plane, wp, wk, c_in, kh, kw, oy * wp + ox);
                    for (o, a) in orow[ox..ox + 32].iter_mut().zip(acc) {
                        *o = a + b;
                    }
                    ox += 32;
                }
                while ox + 8 <= ow {
                    let acc = correlate_run::<8>(xp, plane, wp, wk, c_in, kh, kw, oy * wp + ox);
                    for (o, a) in orow[ox..ox + 8].iter_mut().zip(acc) {
                        *o = a + b;
                    }
                    ox += 8;
                }
                while ox < ow {
                    let [a] = correlate_run::<1>(xp, plane, wp, wk, c_in, kh, kw, oy * wp + ox);
                    orow[ox] = a + b;
                    ox += 1;
                }
            } else {
                for (ox, o) in orow.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let row = &xp[c * plane + (oy * stride + ky) * wp + ox * stride..];
                            for kx in 0..kw {
                                acc += wk[(c * kh + ky) * kw + kx] * row[kx];
                            }
                        }
                    }
                    *o = acc + b;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let [c_in, h, w] = check_conv_shapes(input, weights, spec)?;
    let [nb] = bias.dims::<1>("conv bias")?;
    if nb != spec.out_channels {
        return Err(Error::Shape(format!(
            "conv bias length {nb} does not match out_channels={}",
            spec.out_channels
        )));
    }
    spec.output_hw(h, w)?;
    let p = spec.padding;
    let xp = pad_planes(input.data(), c_in, h, w, p);
    let (out, oh, ow) = correlate_padded(
        &xp,
        (c_in, h + 2 * p, w + 2 * p),
        weights.data(),
        Some(bias.data()),
        (spec.out_channels, spec.kernel_h, spec.kernel_w),
        spec.stride,
    );
    Ok(Tensor::from_parts(vec![spec.out_channels, oh, ow], out))
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    let (gw, gb, gi) = conv2d_backward_impl(grad_out, input, weights, spec, true)?;
    Ok(ConvGrads {
        input: gi.expect("input gradient requested"),
        weights: gw,
        bias: gb,
    })
}

/// Weight and bias gradients only; used for the first layer of a network
/// where the input gradient is never consumed.
pub(crate) fn conv2d_backward_params(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    let (gw, gb, _) = conv2d_backward_impl(grad_out, input, weights, spec, false)?;
    Ok((gw, gb))
}

fn conv2d_backward_impl(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    want_input: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let [c_in, h, w] = check_conv_shapes(input, weights, spec)?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let gshape = grad_out.dims::<3>("conv grad_out")?;
    if gshape != [spec.out_channels, oh, ow] {
        return Err(Error::Shape(format!(
            "conv grad_out shape {gshape:?} does not match forward output [{}, {oh}, {ow}]",
            spec.out_channels
        )));
    }
    let (c_out, kh, kw, s, p) = (spec.out_channels, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let g = grad_out.data();
    let wt = weights.data();
    let xp = pad_planes(input.data(), c_in, h, w, p);

    let grad_b: Vec<f32> = g.chunks_exact(oh * ow).map(|plane| plane.iter().sum()).collect();

    // dW[oc, c, ky, kx] = sum over output positions of g * x_padded.
    let mut grad_w = vec![0.0f32; wt.len()];
    let taps = kh * kw;
    for oc in 0..c_out {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for c in 0..c_in {
            let xplane = &xp[c * hp * wp..(c + 1) * hp * wp];
            let dst = &mut grad_w[(oc * c_in + c) * taps..(oc * c_in + c + 1) * taps];
            if s == 1 {
                weight_grad_plane(gplane, xplane, (oh, ow), wp, (kh, kw), dst);
            } else {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f32;
                        for oy in 0..oh {
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let start = (oy * s + ky) * wp + kx;
                            for (j, &gv) in grow.iter().enumerate() {
                                acc += gv * xplane[start + j * s];
                            }
                        }
                        dst[ky * kw + kx] = acc;
                    }
                }
            }
        }
    }

    let grad_in = want_input.then(|| {
        if s == 1 && p < kh && p < kw {
            // Stride-1 input gradient is a full correlation of the upstream
            // gradient with the flipped, channel-transposed kernel.
            let (qh, qw) = (kh - 1 - p, kw - 1 - p);
            let gp = pad_rect(g, c_out, oh, ow, qh, qw);
            let mut flipped = vec![0.0f32; wt.len()];
            for oc in 0..c_out {
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            flipped[((c * c_out + oc) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                                wt[((oc * c_in + c) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
            let (gi, gh, gw) = correlate_padded(
                &gp,
                (c_out, oh + 2 * qh, ow + 2 * qw),
                &flipped,
                None,
                (c_in, kh, kw),
                1,
            );
            debug_assert_eq!((gh, gw), (h, w));
            gi
        } else {
            // General case: scatter into a padded buffer, then crop.
            let mut gin_p = vec![0.0f32; c_in * hp * wp];
            for oc in 0..c_out {
                let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                for c in 0..c_in {
                    let dst = &mut gin_p[c * hp * wp..(c + 1) * hp * wp];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wt[((oc * c_in + c) * kh + ky) * kw + kx];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    dst[(oy * s + ky) * wp + ox * s + kx] += wv * gplane[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
            let mut gi = Vec::with_capacity(c_in * h * w);
            for c in 0..c_in {
                for y in 0..h {
                    let row = (c * hp + y + p) * wp + p;
                    gi.extend_from_slice(&gin_p[row..row + w]);
                }
            }
            gi
        }
    });

    Ok((
        Tensor::from_parts(weights.shape().to_vec(), grad_w),
        Tensor::from_parts(vec![c_out], grad_b),
        grad_in.map(|gi| Tensor::from_parts(vec![c_in, h, w], gi)),
    ))
}

/// Stride-1 weight gradient for one (output, input) channel pair. Each tap
/// keeps its own lane accumulators so a gradient chunk is loaded once.
fn weight_grad_plane(
    gplane: &[f32],
    xplane: &[f32],
    (oh, ow): (usize, usize),
    wp: usize,
    (kh, kw): (usize, usize),
    dst: &mut [f32],
) {
    if (kh, kw) == (3, 3) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { weight_grad_3x3_avx2(gplane, xplane, (oh, ow), wp, dst) };
            return;
        }
        weight_grad_fixed::<3, 3, 4>(gplane, xplane, (oh, ow), wp, dst);
        return;
    }
    for ky in 0..kh {
        for kx in 0..kw {
            let mut acc = 0.0f32;
            for oy in 0..oh {
                let start = (oy + ky) * wp + kx;
                acc += dot(&gplane[oy * ow..(oy + 1) * ow], &xplane[start..start + ow]);
            }
            dst[ky * kw + kx] = acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad_3x3_avx2(gplane: &[f32], xplane: &[f32], ohw: (usize, usize), wp: usize, dst: &mut [f32]) {
    weight_grad_fixed::<3, 3, 8>(gplane, xplane, ohw, wp, dst);
}

#[inline(always)]
fn weight_grad_fixed<const KH: usize, const KW: usize, const L: usize>(
    gplane: &[f32],
    xplane: &[f32],
    (oh, ow): (usize, usize),
    wp: usize,
    dst: &mut [f32],
) {
    let mut lanes = [[[0.0f32; L]; KW]; KH];
    let mut tail = [[0.0f32; KW]; KH];
    let full = ow / L * L;
    for oy in 0..oh {
        let grow = &gplane[oy * ow..(oy + 1) * ow];
        let rows: [&[f32]; KH] = std::array::from_fn(|ky| &xplane[(oy + ky) * wp..(oy + ky + 1) * wp]);
        let mut ox = 0;
        while ox < full {
            let gv: [f32; L] = grow[ox..ox + L].try_into().expect("chunk");
            for ky in 0..KH {
                for kx in 0..KW {
                    let xv: [f32; L] = rows[ky][ox + kx..ox + kx + L].try_into().expect("chunk");
                    for i in 0..L {
                        lanes[ky][kx][i] += gv[i] * xv[i];
                    }
                }
            }
            ox += L;
        }
        for ox in full..ow {
            for ky in 0..KH {
                for kx in 0..KW {
                    tail[ky][kx] += grow[ox] * rows[ky][ox + kx];
                }
            }
        }
    }
    for ky in 0..KH {
        for kx in 0..KW {
            dst[ky * KW + kx] = lanes[ky][kx].iter().sum::<f32>() + tail[ky][kx];
        }
    }
}

/// Zero-pads every channel by `ph` rows and `pw` columns on each side.
fn pad_rect(x: &[f32], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![0.0f32; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * hp + y + ph) * wp + pw;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    out
}

/// Dot product with eight interleaved partial sums; fixed order, so deterministic.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += xa[i] * xb[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Passes the gradient where the input is strictly positive; zero at exactly 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    same_shape(grad_out, input, "relu grad_out vs input")?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

/// For each pooled output element, the flat input index that won the max.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2 non-overlapping max pooling. Ties go to the first element in
/// row-major scan order of the window.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [c, h, w] = input.dims::<3>("maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0f32; c * oh * ow];
    let mut idx = vec![0usize; c * oh * ow];
    let rows = out.chunks_exact_mut(ow).zip(idx.chunks_exact_mut(ow));
    for (r, (orow, irow)) in rows.enumerate() {
        let top_start = 2 * r * w;
        let top = &x[top_start..top_start + w];
        let bottom = &x[top_start + w..top_start + 2 * w];
        let pairs = top.chunks_exact(2).zip(bottom.chunks_exact(2));
        for (ox, ((t, b), (o, i))) in pairs.zip(orow.iter_mut().zip(irow.iter_mut())).enumerate() {
            // Strict comparisons in row-major order keep the first maximum.
            let (mut best, mut off) = (t[0], 0);
            if t[1] > best {
                (best, off) = (t[1], 1);
            }
            if b[0] > best {
                (best, off) = (b[0], w);
            }
            if b[1] > best {
                (best, off) = (b[1], w + 1);
            }
            *o = best;
            *i = top_start + 2 * ox + off;
        }
    }
    Ok((
        Tensor::from_parts(vec![c, oh, ow], out),
        PoolIndices {
            input_shape: vec![c, h, w],
            argmax: idx,
        },
    ))
}

pub fn maxpool2_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool grad_out has {} elements but {} pooled positions were recorded",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let n: usize = indices.input_shape.iter().product();
    let mut grad = vec![0.0f32; n];
    for (&g, &i) in grad_out.data().iter().zip(&indices.argmax) {
        grad[i] += g;
    }
    Ok(Tensor::from_parts(indices.input_shape.clone(), grad))
}

/// `y = W x + b` for `W: [M, N]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [m, n] = weights.dims::<2>("fc weights")?;
    if input.len() != n {
        return Err(Error::Shape(format!(
            "fc input has {} features but weights expect {n}",
            input.len()
        )));
    }
    let [nb] = bias.dims::<1>("fc bias")?;
    if nb != m {
        return Err(Error::Shape(format!("fc bias length {nb} does not match {m} outputs")));
    }
    let x = input.data();
    let out = (0..m)
        .map(|i| dot(&weights.data()[i * n..(i + 1) * n], x) + bias.data()[i])
        .collect();
    Ok(Tensor::from_parts(vec![m], out))
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// `grad_x = Wᵀg`, `grad_W = g xᵀ`, `grad_b = g`. The input gradient keeps the
/// input's shape so it can flow back into a pooled feature map.
pub fn fc_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor) -> Result<FcGrads> {
    let [m, n] = weights.dims::<2>("fc weights")?;
    if grad_out.len() != m {
        return Err(Error::Shape(format!(
            "fc grad_out has {} elements but layer has {m} outputs",
            grad_out.len()
        )));
    }
    if input.len() != n {
        return Err(Error::Shape(format!(
            "fc input has {} features but weights expect {n}",
            input.len()
        )));
    }
    let g = grad_out.data();
    let x = input.data();
    let wt = weights.data();
    let mut gx = vec![0.0f32; n];
    for i in 0..m {
        let row = &wt[i * n..(i + 1) * n];
        for (d, &wv) in gx.iter_mut().zip(row) {
            *d += wv * g[i];
        }
    }
    let mut gw = Vec::with_capacity(m * n);
    for &gi in g {
        gw.extend(x.iter().map(|&xv| gi * xv));
    }
    Ok(FcGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gx),
        weights: Tensor::from_parts(vec![m, n], gw),
        bias: Tensor::from_parts(vec![m], g.to_vec()),
    })
}

pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input.dims::<3>("global_avgpool input")?;
    let area = (h * w) as f32;
    let out = (0..c)
        .map(|ch| input.channel(ch).iter().sum::<f32>() / area)
        .collect();
    Ok(Tensor::from_parts(vec![c], out))
}

/// Spreads each channel's gradient uniformly, `g / (H*W)`, over `input_shape`.
pub fn global_avgpool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [c, h, w] = <[usize; 3]>::try_from(input_shape)
        .map_err(|_| Error::Shape(format!("global_avgpool input shape {input_shape:?} is not rank 3")))?;
    if grad_out.len() != c {
        return Err(Error::Shape(format!(
            "global_avgpool grad_out has {} elements for {c} channels",
            grad_out.len()
        )));
    }
    let area = (h * w) as f32;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / area, h * w));
    }
    Ok(Tensor::from_parts(vec![c, h, w], data))
}

/// Softmax probabilities of a logit vector, computed in `f64`.
pub fn softmax(logits: &Tensor) -> Vec<f64> {
    let m = logits.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.data().iter().map(|&l| (l as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cross-entropy of a two-class logit vector against `label`, in log-sum-exp
/// form. Returns the loss and `softmax - one_hot(label)`.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    if logits.len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_xent expects 2 logits, got {}",
            logits.len()
        )));
    }
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {label}")));
    }
    let l = logits.data();
    let m = l[0].max(l[1]) as f64;
    let lse = m + ((l[0] as f64 - m).exp() + (l[1] as f64 - m).exp()).ln();
    let loss = (lse - l[label] as f64).max(0.0);
    let p = softmax(logits);
    let grad = (0..2)
        .map(|i| (p[i] - if i == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    Ok((loss as f32, Tensor::from_parts(vec![2], grad)))
}

/// Align-corners bilinear resize of a `[H, W]` map.
///
/// Source coordinates are computed with exact integer ratios, so output
/// pixels that land on source grid points reproduce the source value exactly.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = map.dims::<2>("upsample map")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be positive, got {out_h}x{out_w}"
        )));
    }
    let axis = |o: usize, out: usize, src: usize| -> (usize, usize, f32) {
        if out == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let num = o * (src - 1);
        let den = out - 1;
        let i0 = num / den;
        let frac = (num % den) as f32 / den as f32;
        (i0, (i0 + 1).min(src - 1), frac)
    };
    let cols: Vec<_> = (0..out_w).map(|ox| axis(ox, out_w, w)).collect();
    let m = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, out_h, h);
        for &(x0, x1, fx) in &cols {
            let top = m[y0 * w + x0] * (1.0 - fx) + m[y0 * w + x1] * fx;
            let bot = m[y1 * w + x0] * (1.0 - fx) + m[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}

/// Per-channel parameters of an inference-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub mean: Tensor,
    pub var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mean.len();
        for (name, t) in [("var", &self.var), ("gamma", &self.gamma), ("beta", &self.beta)] {
            if t.len() != c {
                return Err(Error::Shape(format!(
                    "batchnorm {name} has {} entries, mean has {c}",
                    t.len()
                )));
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("batchnorm eps must be >= 0, got {}", self.eps)));
        }
        if let Some(i) = self.var.data().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "batchnorm variance must be >= 0, channel {i} has {}",
                self.var.data()[i]
            )));
        }
        if let Some(i) = self.var.data().iter().position(|&v| v + self.eps <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "batchnorm channel {i} has zero variance and zero eps"
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `y = x * scale + shift`.
    fn affine(&self) -> Vec<(f32, f32)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.var.data()[c] + self.eps).sqrt();
                let scale = inv * self.gamma.data()[c];
                (scale, self.beta.data()[c] - self.mean.data()[c] * scale)
            })
            .collect()
    }
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta`, per channel.
pub fn batchnorm_inference(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    params.validate()?;
    let [c, _, _] = input.dims::<3>("batchnorm input")?;
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "batchnorm input has {c} channels, parameters have {}",
            params.channels()
        )));
    }
    let plane = input.len() / c;
    let mut out = Vec::with_capacity(input.len());
    for ch in 0..c {
        let inv = 1.0 / (params.var.data()[ch] + params.eps).sqrt();
        let (m, g, b) = (params.mean.data()[ch], params.gamma.data()[ch], params.beta.data()[ch]);
        out.extend(input.data()[ch * plane..(ch + 1) * plane].iter().map(|&x| (x - m) * inv * g + b));
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// Gradient through frozen batchnorm statistics: a per-channel scale.
pub fn batchnorm_backward(grad_out: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    let [c, _, _] = grad_out.dims::<3>("batchnorm grad_out")?;
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "batchnorm grad_out has {c} channels, parameters have {}",
            params.channels()
        )));
    }
    let plane = grad_out.len() / c;
    let affine = params.affine();
    let mut out = Vec::with_capacity(grad_out.len());
    for (ch, &(scale, _)) in affine.iter().enumerate() {
        out.extend(grad_out.data()[ch * plane..(ch + 1) * plane].iter().map(|&g| g * scale));
    }
    Ok(Tensor::from_parts(grad_out.shape().to_vec(), out))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
