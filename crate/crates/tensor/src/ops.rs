//! Forward and backward kernels on plain tensors.
//!
//! The tape in [`crate::tape`] records which of these ran; the functions here
//! are also usable directly for inference-only code paths.

use crate::element::Element;
use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }
}

pub fn conv_geometry<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    let (o, kc, kh, kw) = kernel.dims4("conv2d")?;
    if kc != c {
        return Err(mismatch(
            "conv2d",
            format!("input has {c} channels but kernel expects {kc}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(invalid("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if bias.shape() != [o] {
        return Err(mismatch(
            "conv2d",
            format!("bias shape {:?}, expected [{o}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(invalid(
            "conv2d",
            format!("{h}x{w} input with padding {padding} is smaller than the {kh}x{kw} kernel"),
        ));
    }
    Ok(ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: w,
        out_channels: o,
        kernel: kh,
        stride,
        padding,
        out_height: (h + 2 * padding - kh) / stride + 1,
        out_width: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Output columns `ox` whose input column `ox * stride + k - padding` is in bounds.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, padding: usize) -> std::ops::Range<usize> {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if in_len + padding > k {
        ((in_len - 1 + padding - k) / stride + 1).min(out_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Unfolds one sample `[C, H, W]` into `[C*k*k, Ho*Wo]` columns.
fn im2col<T: Element>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    let (s, p) = (g.stride, g.padding);
    for c in 0..g.in_channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let rows = valid_range(g.out_height, g.height, ky, s, p);
            for kx in 0..k {
                let span = valid_range(g.out_width, g.width, kx, s, p);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if !rows.contains(&oy) || span.is_empty() {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let iy = oy * s + ky - p;
                    let src_row = &src[iy * g.width..(iy + 1) * g.width];
                    line[..span.start].fill(T::ZERO);
                    line[span.end..].fill(T::ZERO);
                    let ix0 = span.start * s + kx - p;
                    if s == 1 {
                        line[span.clone()].copy_from_slice(&src_row[ix0..ix0 + span.len()]);
                    } else {
                        for (out, &v) in line[span.clone()].iter_mut().zip(src_row[ix0..].iter().step_by(s)) {
                            *out = v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatters columns back onto one sample, accumulating overlaps.
fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    let (s, p) = (g.stride, g.padding);
    for c in 0..g.in_channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let rows = valid_range(g.out_height, g.height, ky, s, p);
            for kx in 0..k {
                let span = valid_range(g.out_width, g.width, kx, s, p);
                if span.is_empty() {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let ix0 = span.start * s + kx - p;
                for oy in rows.clone() {
                    let iy = oy * s + ky - p;
                    let dst_row = &mut dst[iy * g.width..(iy + 1) * g.width];
                    let line = &src[oy * g.out_width + span.start..oy * g.out_width + span.end];
                    if s == 1 {
                        for (d, &v) in dst_row[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst_row[ix0..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation with zero padding.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, bias, stride, padding)?;
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = Tensor::zeros([g.batch, g.out_channels, g.out_height, g.out_width]);
    let mut cols = vec![T::ZERO; patch * plane];
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    for n in 0..g.batch {
        im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, &mut cols);
        let out_n = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        for (o, &b) in bias.data().iter().enumerate() {
            out_n[o * plane..(o + 1) * plane].fill(b);
        }
        T::gemm(
            g.out_channels,
            patch,
            plane,
            T::ONE,
            kernel.data(),
            (patch as isize, 1),
            &cols,
            (plane as isize, 1),
            T::ONE,
            out_n,
            (plane as isize, 1),
        );
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernel, bias, stride, padding)?;
    let plane = g.out_plane();
    let patch = g.patch_len();
    if grad_out.shape() != [g.batch, g.out_channels, g.out_height, g.out_width] {
        return Err(mismatch("conv2d_backward", "gradient shape does not match output"));
    }
    let mut d_kernel = Tensor::zeros(kernel.shape().to_vec());
    let mut d_bias = Tensor::zeros([g.out_channels]);
    let mut d_input = need_input.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut cols = vec![T::ZERO; patch * plane];
    let mut d_cols = if need_input {
        vec![T::ZERO; patch * plane]
    } else {
        Vec::new()
    };
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    for n in 0..g.batch {
        let dy = &grad_out.data()[n * out_len..(n + 1) * out_len];
        for (o, db) in d_bias.data_mut().iter_mut().enumerate() {
            *db += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, &mut cols);
        // dK += dY * cols^T
        T::gemm(
            g.out_channels,
            plane,
            patch,
            T::ONE,
            dy,
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            T::ONE,
            d_kernel.data_mut(),
            (patch as isize, 1),
        );
        if let Some(dx) = d_input.as_mut() {
            // dcols = K^T * dY
            T::gemm(
                patch,
                g.out_channels,
                plane,
                T::ONE,
                kernel.data(),
                (1, patch as isize),
                dy,
                (plane as isize, 1),
                T::ZERO,
                &mut d_cols,
                (plane as isize, 1),
            );
            col2im(&d_cols, &g, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("upsample2x")?;
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            let s = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            let d = &mut dst[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
            for (x, v) in d.iter_mut().enumerate() {
                *v = s[x / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<T: Element>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = grad_out.dims4("upsample2x_backward")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = grad_out.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(p * h + y / 2) * w + x / 2] += src[(p * h2 + y) * w2 + x];
            }
        }
    }
    Ok(out)
}

/// Mean over non-overlapping 2x2 blocks.
pub fn avg_pool2x<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avg_pool2x")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("avg_pool2x", format!("odd extent {h}x{w}")));
    }
    let quarter = T::from_f64(0.25);
    Ok(Tensor::from_fn([n, c, h / 2, w / 2], |i| {
        let x = i % (w / 2);
        let y = (i / (w / 2)) % (h / 2);
        let p = i / (w / 2 * (h / 2));
        let at = |yy: usize, xx: usize| input.data()[(p * h + yy) * w + xx];
        (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1))
            * quarter
    }))
}

fn linear_check<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, din) = input.dims2("linear")?;
    let (dout, wdin) = weight.dims2("linear")?;
    if wdin != din {
        return Err(mismatch(
            "linear",
            format!("input width {din} but weight expects {wdin}"),
        ));
    }
    if bias.shape() != [dout] {
        return Err(mismatch(
            "linear",
            format!("bias shape {:?}, expected [{dout}]", bias.shape()),
        ));
    }
    Ok((n, din, dout))
}

/// `input * weight^T + bias`.
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, din, dout) = linear_check(input, weight, bias)?;
    let mut out = Tensor::zeros([n, dout]);
    for row in out.data_mut().chunks_mut(dout) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        din,
        dout,
        T::ONE,
        input.data(),
        (din as isize, 1),
        weight.data(),
        (1, din as isize),
        T::ONE,
        out.data_mut(),
        (dout as isize, 1),
    );
    Ok(out)
}

pub struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<LinearGrads<T>> {
    let (n, din, dout) = linear_check(input, weight, bias)?;
    let dy = grad_out.data();
    let d_input = if need_input {
        let mut dx = Tensor::zeros([n, din]);
        T::gemm(
            n,
            dout,
            din,
            T::ONE,
            dy,
            (dout as isize, 1),
            weight.data(),
            (din as isize, 1),
            T::ZERO,
            dx.data_mut(),
            (din as isize, 1),
        );
        Some(dx)
    } else {
        None
    };
    let mut dw = Tensor::zeros([dout, din]);
    T::gemm(
        dout,
        n,
        din,
        T::ONE,
        dy,
        (1, dout as isize),
        input.data(),
        (din as isize, 1),
        T::ZERO,
        dw.data_mut(),
        (din as isize, 1),
    );
    let mut db = Tensor::zeros([dout]);
    for row in dy.chunks(dout) {
        for (b, &g) in db.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(LinearGrads {
        input: d_input,
        weight: dw,
        bias: db,
    })
}

/// Per-sample, per-channel spatial mean and population standard deviation.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("channel_stats")?;
    let plane = h * w;
    if plane == 0 {
        return Err(invalid("channel_stats", "empty spatial extent"));
    }
    // Accumulated in f64 so the result barely depends on summation order.
    let count = plane as f64;
    let mut mean = Tensor::zeros([n, c]);
    let mut std = Tensor::zeros([n, c]);
    for (p, chunk) in x.data().chunks(plane).enumerate() {
        let mu = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / count;
        let var = chunk
            .iter()
            .map(|v| (v.to_f64() - mu) * (v.to_f64() - mu))
            .sum::<f64>()
            / count;
        mean.data_mut()[p] = T::from_f64(mu);
        std.data_mut()[p] = T::from_f64(var.sqrt());
    }
    Ok((mean, std))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Combines `x: [N, C, H, W]` with a per-channel tensor `p: [N, C]`.
pub fn channel_binary<T: Element>(
    x: &Tensor<T>,
    p: &Tensor<T>,
    op: ChannelOp,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_binary")?;
    if p.shape() != [n, c] {
        return Err(mismatch(
            "channel_binary",
            format!("per-channel operand {:?}, expected [{n}, {c}]", p.shape()),
        ));
    }
    let plane = h * w;
    let mut out = x.clone();
    for (chunk, &v) in out.data_mut().chunks_mut(plane.max(1)).zip(p.data()) {
        match op {
            ChannelOp::Add => chunk.iter_mut().for_each(|a| *a += v),
            ChannelOp::Sub => chunk.iter_mut().for_each(|a| *a -= v),
            ChannelOp::Mul => chunk.iter_mut().for_each(|a| *a *= v),
            ChannelOp::Div => chunk.iter_mut().for_each(|a| *a /= v),
        }
    }
    Ok(out)
}

/// Euclidean norm over the channel axis: `[N, C, H, W] -> [N, 1, H, W]`.
pub fn pixel_norm<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("pixel_norm")?;
    let plane = h * w;
    let mut out: Tensor<T> = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let dst = &mut out.data_mut()[b * plane..(b + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v * v;
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.sqrt());
    Ok(out)
}

pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("slice_channels")?;
    if start + len > c || len == 0 {
        return Err(invalid(
            "slice_channels",
            format!("channels {start}..{} out of 0..{c}", start + len),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        data.extend_from_slice(&x.data()[(b * c + start) * plane..(b * c + start + len) * plane]);
    }
    Tensor::new([n, len, h, w], data)
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(mismatch(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new([n, ca + cb, h, w], data)
}

/// Replicates `[N, S]` into constant planes `[N, S, H, W]`.
pub fn expand_planes<T: Element>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (n, s) = x.dims2("expand_planes")?;
    let plane = height * width;
    let mut data = Vec::with_capacity(n * s * plane);
    for &v in x.data() {
        data.extend(std::iter::repeat_n(v, plane));
    }
    Tensor::new([n, s, height, width], data)
}

pub fn tile_rows<T: Element>(x: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
    if x.ndim() != 1 {
        return Err(mismatch("tile_rows", format!("expected 1-d tensor, got {:?}", x.shape())));
    }
    let mut data = Vec::with_capacity(rows * x.numel());
    for _ in 0..rows {
        data.extend_from_slice(x.data());
    }
    Tensor::new([rows, x.numel()], data)
}
