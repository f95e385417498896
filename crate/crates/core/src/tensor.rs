//! Dense row-major f64 tensor with exactly the operations the miniature
//! diffusion model needs. Single-threaded on purpose: seeded runs must be
//! bit-identical.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn randn_scaled(shape: &[usize], sigma: f64, rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| sigma * rng.normal()).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean squared difference, the workhorse of every loss here.
    pub fn mse(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape, "mse shape mismatch");
        let n = self.numel() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// 2-D matrix product: [m, k] x [k, n] -> [m, n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    debug_assert_eq!(k, k2, "matmul inner dims");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

/// Batched product: [g, m, k] x [g, k, n] -> [g, m, n].
pub fn bmm_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (g, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let (g2, k2, n) = (b.shape[0], b.shape[1], b.shape[2]);
    debug_assert_eq!(g, g2);
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; g * m * n];
    for gi in 0..g {
        let abase = gi * m * k;
        let bbase = gi * k * n;
        let obase = gi * m * n;
        for i in 0..m {
            let arow = &a.data[abase + i * k..abase + (i + 1) * k];
            let orow = &mut out[obase + i * n..obase + (i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[bbase + p * n..bbase + (p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor { shape: vec![g, m, n], data: out }
}

/// Batched product against transposed right factor:
/// [g, m, k] x [g, n, k] -> [g, m, n].
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (g, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let (g2, n, k2) = (b.shape[0], b.shape[1], b.shape[2]);
    debug_assert_eq!(g, g2);
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; g * m * n];
    for gi in 0..g {
        let abase = gi * m * k;
        let bbase = gi * n * k;
        let obase = gi * m * n;
        for i in 0..m {
            let arow = &a.data[abase + i * k..abase + (i + 1) * k];
            for j in 0..n {
                let brow = &b.data[bbase + j * k..bbase + (j + 1) * k];
                let dot: f64 = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                out[obase + i * n + j] = dot;
            }
        }
    }
    Tensor { shape: vec![g, m, n], data: out }
}

/// [m, n] x [k, n]^T -> [m, k].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let (k, n2) = (b.shape[0], b.shape[1]);
    debug_assert_eq!(n, n2);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b.data[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor { shape: vec![m, k], data: out }
}

/// [m, k]^T x [m, n] -> [k, n].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (m2, n) = (b.shape[0], b.shape[1]);
    debug_assert_eq!(m, m2);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![k, n], data: out }
}

/// Batched [g, m, p]^T x [g, m, q] -> [g, p, q].
pub fn bmm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (g, m, p) = (a.shape[0], a.shape[1], a.shape[2]);
    let (g2, m2, q) = (b.shape[0], b.shape[1], b.shape[2]);
    debug_assert_eq!(g, g2);
    debug_assert_eq!(m, m2);
    let mut out = vec![0.0; g * p * q];
    for gi in 0..g {
        let abase = gi * m * p;
        let bbase = gi * m * q;
        let obase = gi * p * q;
        for i in 0..m {
            let arow = &a.data[abase + i * p..abase + (i + 1) * p];
            let brow = &b.data[bbase + i * q..bbase + (i + 1) * q];
            for (pi, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[obase + pi * q..obase + (pi + 1) * q];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor { shape: vec![g, p, q], data: out }
}

/// Column sums of a [r, c] matrix -> [c].
pub fn sum_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(&x.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Tensor { shape: vec![c], data: out }
}

/// Per-channel sums of [N, C, H, W] -> [C].
pub fn sum_nhw(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let plane = h * w;
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            out[ci] += x.data[base..base + plane].iter().sum::<f64>();
        }
    }
    Tensor { shape: vec![c], data: out }
}

/// Row-wise softmax over the last dimension of an arbitrary tensor.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = *x.shape.last().expect("softmax on rank-0");
    let rows = x.numel() / n;
    let mut data = x.data.clone();
    for r in 0..rows {
        let row = &mut data[r * n..(r + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor { shape: x.shape.clone(), data }
}

// ---------------------------------------------------------------------------
// Convolution and resampling on [N, C, H, W]
// ---------------------------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding 1.
/// input [N, C, H, W], weight [O, C, 3, 3], bias [O] -> [N, O, H, W].
pub fn conv3x3(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let o = weight.shape[0];
    debug_assert_eq!(weight.shape, vec![o, c, 3, 3]);
    debug_assert_eq!(bias.shape, vec![o]);
    let mut out = vec![0.0; n * o * h * w];
    let plane = h * w;
    for ni in 0..n {
        for oi in 0..o {
            let obase = (ni * o + oi) * plane;
            let b = bias.data[oi];
            for v in &mut out[obase..obase + plane] {
                *v = b;
            }
            for ci in 0..c {
                let ibase = (ni * c + ci) * plane;
                let wbase = (oi * c + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = weight.data[wbase + ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // Output row y reads input row y + ky - 1.
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = (h as isize - dy).min(h as isize) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize) as usize;
                        for y in y_lo..y_hi {
                            let iy = (y as isize + dy) as usize;
                            let irow = ibase + iy * w;
                            let orow = obase + y * w;
                            for x in x_lo..x_hi {
                                let ix = (x as isize + dx) as usize;
                                out[orow + x] += wv * input.data[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![n, o, h, w], data: out }
}

/// Gradients of `conv3x3` w.r.t. (input, weight, bias).
pub fn conv3x3_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let o = weight.shape[0];
    let plane = h * w;
    let mut gin = vec![0.0; input.numel()];
    let mut gw = vec![0.0; weight.numel()];
    let mut gb = vec![0.0; o];

    for ni in 0..n {
        for oi in 0..o {
            let obase = (ni * o + oi) * plane;
            gb[oi] += grad_out.data[obase..obase + plane].iter().sum::<f64>();
            for ci in 0..c {
                let ibase = (ni * c + ci) * plane;
                let wbase = (oi * c + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = (h as isize - dy).min(h as isize) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize) as usize;
                        let wv = weight.data[wbase + ky * 3 + kx];
                        let mut wacc = 0.0;
                        for y in y_lo..y_hi {
                            let iy = (y as isize + dy) as usize;
                            let irow = ibase + iy * w;
                            let orow = obase + y * w;
                            for x in x_lo..x_hi {
                                let ix = (x as isize + dx) as usize;
                                let g = grad_out.data[orow + x];
                                wacc += g * input.data[irow + ix];
                                gin[irow + ix] += g * wv;
                            }
                        }
                        gw[wbase + ky * 3 + kx] += wacc;
                    }
                }
            }
        }
    }
    (
        Tensor { shape: input.shape.clone(), data: gin },
        Tensor { shape: weight.shape.clone(), data: gw },
        Tensor { shape: vec![o], data: gb },
    )
}

/// 2x2 average pooling, stride 2. Requires even H and W.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    debug_assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            for x2 in 0..ow {
                let i = ibase + 2 * y * w + 2 * x2;
                out[obase + y * ow + x2] =
                    0.25 * (x.data[i] + x.data[i + 1] + x.data[i + w] + x.data[i + w + 1]);
            }
        }
    }
    Tensor { shape: vec![n, c, oh, ow], data: out }
}

pub fn avg_pool2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            for x2 in 0..ow {
                let g = 0.25 * grad_out.data[obase + y * ow + x2];
                let i = ibase + 2 * y * w + 2 * x2;
                gin[i] += g;
                gin[i + 1] += g;
                gin[i + w] += g;
                gin[i + w + 1] += g;
            }
        }
    }
    Tensor { shape: in_shape.to_vec(), data: gin }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            let src_row = ibase + (y / 2) * w;
            let dst_row = obase + y * ow;
            for x2 in 0..ow {
                out[dst_row + x2] = x.data[src_row + x2 / 2];
            }
        }
    }
    Tensor { shape: vec![n, c, oh, ow], data: out }
}

pub fn upsample2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * 2, w * 2);
    let mut gin = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            let src_row = ibase + (y / 2) * w;
            let dst_row = obase + y * ow;
            for x2 in 0..ow {
                gin[src_row + x2 / 2] += grad_out.data[dst_row + x2];
            }
        }
    }
    Tensor { shape: in_shape.to_vec(), data: gin }
}

// ---------------------------------------------------------------------------
// Layout permutations between conv [N, C, H, W] and attention layouts
// ---------------------------------------------------------------------------

/// [N, C, H, W] -> [N, H*W, C]  (spatial tokens per frame).
pub fn nchw_to_nsc(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let s = h * w;
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let ibase = (ni * c + ci) * s;
            for si in 0..s {
                out[(ni * s + si) * c + ci] = x.data[ibase + si];
            }
        }
    }
    Tensor { shape: vec![n, s, c], data: out }
}

/// [N, S, C] -> [N, C, H, W], inverse of `nchw_to_nsc`.
pub fn nsc_to_nchw(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, s, c) = (x.shape[0], x.shape[1], x.shape[2]);
    debug_assert_eq!(s, h * w);
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let obase = (ni * c + ci) * s;
            for si in 0..s {
                out[obase + si] = x.data[(ni * s + si) * c + ci];
            }
        }
    }
    Tensor { shape: vec![n, c, h, w], data: out }
}

/// [L, C, H, W] -> [H*W, L, C]  (temporal sequences per spatial site).
pub fn lchw_to_slc(x: &Tensor) -> Tensor {
    let (l, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let s = h * w;
    let mut out = vec![0.0; x.numel()];
    for li in 0..l {
        for ci in 0..c {
            let ibase = (li * c + ci) * s;
            for si in 0..s {
                out[(si * l + li) * c + ci] = x.data[ibase + si];
            }
        }
    }
    Tensor { shape: vec![s, l, c], data: out }
}

/// [S, L, C] -> [L, C, H, W], inverse of `lchw_to_slc`.
pub fn slc_to_lchw(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (s, l, c) = (x.shape[0], x.shape[1], x.shape[2]);
    debug_assert_eq!(s, h * w);
    let mut out = vec![0.0; x.numel()];
    for li in 0..l {
        for ci in 0..c {
            let obase = (li * c + ci) * s;
            for si in 0..s {
                out[obase + si] = x.data[(si * l + li) * c + ci];
            }
        }
    }
    Tensor { shape: vec![l, c, h, w], data: out }
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
    let cb = b.shape[1];
    debug_assert_eq!(b.shape[0], n);
    debug_assert_eq!(&b.shape[2..], &[h, w]);
    let plane = h * w;
    let mut out = vec![0.0; n * (ca + cb) * plane];
    for ni in 0..n {
        let oa = ni * (ca + cb) * plane;
        out[oa..oa + ca * plane].copy_from_slice(&a.data[ni * ca * plane..(ni + 1) * ca * plane]);
        out[oa + ca * plane..oa + (ca + cb) * plane]
            .copy_from_slice(&b.data[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    Tensor { shape: vec![n, ca + cb, h, w], data: out }
}

pub fn split_channels(grad: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = (grad.shape[0], grad.shape[1], grad.shape[2], grad.shape[3]);
    let cb = c - ca;
    let plane = h * w;
    let mut ga = vec![0.0; n * ca * plane];
    let mut gb = vec![0.0; n * cb * plane];
    for ni in 0..n {
        let base = ni * c * plane;
        ga[ni * ca * plane..(ni + 1) * ca * plane]
            .copy_from_slice(&grad.data[base..base + ca * plane]);
        gb[ni * cb * plane..(ni + 1) * cb * plane]
            .copy_from_slice(&grad.data[base + ca * plane..base + c * plane]);
    }
    (
        Tensor { shape: vec![n, ca, h, w], data: ga },
        Tensor { shape: vec![n, cb, h, w], data: gb },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[3, 4, 5], &mut rng);
        let b = Tensor::randn(&[3, 5, 2], &mut rng);
        let c = bmm_nn(&a, &b);
        for g in 0..3 {
            let asub =
                Tensor::from_vec(&[4, 5], a.data()[g * 20..(g + 1) * 20].to_vec()).unwrap();
            let bsub =
                Tensor::from_vec(&[5, 2], b.data()[g * 10..(g + 1) * 10].to_vec()).unwrap();
            let csub = matmul(&asub, &bsub);
            for (i, &v) in csub.data().iter().enumerate() {
                assert!((v - c.data()[g * 8 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bmm_nt_is_bmm_nn_of_transpose() {
        let mut rng = Rng::new(2);
        let a = Tensor::randn(&[2, 3, 4], &mut rng);
        let b = Tensor::randn(&[2, 5, 4], &mut rng);
        let c = bmm_nt(&a, &b);
        // Transpose b manually: [2, 4, 5].
        let mut bt = vec![0.0; b.numel()];
        for g in 0..2 {
            for i in 0..5 {
                for j in 0..4 {
                    bt[g * 20 + j * 5 + i] = b.data()[g * 20 + i * 4 + j];
                }
            }
        }
        let btt = Tensor::from_vec(&[2, 4, 5], bt).unwrap();
        let c2 = bmm_nn(&a, &btt);
        for (x, y) in c.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[4, 7], &mut rng);
        let y = softmax_lastdim(&x);
        for r in 0..4 {
            let s: f64 = y.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.data()[r * 7..(r + 1) * 7].iter().all(|&v| v >= 0.0));
        }
    }

    /// Independent naive convolution used as an oracle.
    fn conv_naive(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let (n, c, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let o = weight.shape()[0];
        let mut out = Tensor::zeros(&[n, o, h, w]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = bias.data()[oi];
                        for ci in 0..c {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let iy = y + ky;
                                    let ix = x + kx;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = input.data()
                                        [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = weight.data()[((oi * c + ci) * 3
                                        + (ky + 1) as usize)
                                        * 3
                                        + (kx + 1) as usize];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_naive_oracle() {
        let mut rng = Rng::new(4);
        let input = Tensor::randn(&[2, 3, 5, 6], &mut rng);
        let weight = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let bias = Tensor::randn(&[4], &mut rng);
        let fast = conv3x3(&input, &weight, &bias);
        let slow = conv_naive(&input, &weight, &bias);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[1, 2, 4, 6], &mut rng);
        let p = avg_pool2(&x);
        assert_eq!(p.shape(), &[1, 2, 2, 3]);
        let u = upsample2(&p);
        assert_eq!(u.shape(), &[1, 2, 4, 6]);
    }

    #[test]
    fn layout_roundtrips_are_exact() {
        let mut rng = Rng::new(6);
        let x = Tensor::randn(&[3, 4, 2, 5], &mut rng);
        let spatial = nchw_to_nsc(&x);
        assert_eq!(spatial.shape(), &[3, 10, 4]);
        assert_eq!(nsc_to_nchw(&spatial, 2, 5), x);
        let temporal = lchw_to_slc(&x);
        assert_eq!(temporal.shape(), &[10, 3, 4]);
        assert_eq!(slc_to_lchw(&temporal, 2, 5), x);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = Rng::new(7);
        let a = Tensor::randn(&[2, 3, 2, 2], &mut rng);
        let b = Tensor::randn(&[2, 5, 2, 2], &mut rng);
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.shape(), &[2, 8, 2, 2]);
        let (ga, gb) = split_channels(&cat, 3);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }
}
