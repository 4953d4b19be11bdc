//! Dense float64 tensors and the numeric kernels the networks need.
//!
//! Every reduction runs in a fixed order (row-major, left to right), so a
//! kernel returns bit-identical results for identical inputs regardless of
//! how many threads rayon uses. Parallelism is only ever across independent
//! output rows or images.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("zero dimension in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.ensure_finite("Tensor::checked")?;
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(rows, cols)` of the 2D view `(dim0, product of the rest)`.
    pub fn as_2d(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rows `[start, start + count)` along dim 0.
    pub fn slice_rows(&self, start: usize, count: usize) -> Tensor {
        let (_, inner) = self.as_2d();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor {
            shape,
            data: self.data[start * inner..(start + count) * inner].to_vec(),
        }
    }

    /// Gathers rows along dim 0 in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (_, inner) = self.as_2d();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &coef) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new([m, n], out)
}

/// `aᵀ · b` for `a[r×m]`, `b[r×n]`, giving `[m×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, m) = dims2(a, "matmul_tn")?;
    let (r2, n) = dims2(b, "matmul_tn")?;
    if r != r2 {
        return Err(Error::shape(
            "matmul_tn",
            format!("[{r}x{m}]ᵀ · [{r2}x{n}]"),
        ));
    }
    let mut out = vec![0.0; m * n];
    let row = |(i, orow): (usize, &mut [f64])| {
        for s in 0..r {
            let coef = a.data[s * m + i];
            let brow = &b.data[s * n..(s + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    };
    if m * n * r >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new([m, n], out)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`, giving `[m×n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul_nt")?;
    let (n, k2) = dims2(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_nt",
            format!("[{m}x{k}] · [{n}x{k2}]ᵀ"),
        ));
    }
    let mut out = vec![0.0; m * n];
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new([m, n], out)
}

#[inline]
pub fn elu_scalar(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x.exp_m1()
    }
}

/// Derivative of ELU; taken as 1 at exactly zero.
#[inline]
pub fn elu_grad_scalar(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        alpha * x.exp()
    }
}

pub fn elu(x: &Tensor, alpha: f64) -> Tensor {
    x.map(|v| elu_scalar(v, alpha))
}

pub fn elu_grad(x: &Tensor, alpha: f64) -> Tensor {
    x.map(|v| elu_grad_scalar(v, alpha))
}

fn conv_dims(input: &Tensor, kernel: &Tensor) -> Result<[usize; 7]> {
    let [n, h, w, cin] = match input.shape() {
        &[n, h, w, c] => [n, h, w, c],
        s => {
            return Err(Error::shape(
                "conv2d",
                format!("input must be NHWC, got {s:?}"),
            ))
        }
    };
    let [kh, kw, kc, cout] = match kernel.shape() {
        &[a, b, c, d] => [a, b, c, d],
        s => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be HWIO, got {s:?}"),
            ))
        }
    };
    if kc != cin {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {cin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} must be odd"),
        ));
    }
    Ok([n, h, w, cin, kh, kw, cout])
}

/// Patch matrix of one image: `[h·w, kh·kw·cin]`, columns ordered (ky, kx, c).
fn im2col_image(img: &[f64], h: usize, w: usize, cin: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let cols = kh * kw * cin;
    let mut out = vec![0.0; h * w * cols];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * cols;
            for ky in 0..kh {
                let iy = y as isize + ky as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = x as isize + kx as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * cin;
                    let dst = base + (ky * kw + kx) * cin;
                    out[dst..dst + cin].copy_from_slice(&img[src..src + cin]);
                }
            }
        }
    }
    out
}

fn col2im_image(cols: &[f64], h: usize, w: usize, cin: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let ncols = kh * kw * cin;
    let mut img = vec![0.0; h * w * cin];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * ncols;
            for ky in 0..kh {
                let iy = y as isize + ky as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = x as isize + kx as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * cin;
                    let src = base + (ky * kw + kx) * cin;
                    for c in 0..cin {
                        img[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
    img
}

/// Stride-1, zero-padded "same" cross-correlation without bias.
///
/// `input` is `[N, H, W, C_in]`, `kernel` is `[kh, kw, C_in, C_out]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [n, h, w, cin, kh, kw, cout] = conv_dims(input, kernel)?;
    let kmat = kernel.clone().reshape([kh * kw * cin, cout])?;
    let per_in = h * w * cin;
    let per_out = h * w * cout;
    let mut out = vec![0.0; n * per_out];
    out.par_chunks_mut(per_out)
        .enumerate()
        .try_for_each(|(i, o)| -> Result<()> {
            let cols = im2col_image(&input.data[i * per_in..(i + 1) * per_in], h, w, cin, kh, kw);
            let cols = Tensor::new([h * w, kh * kw * cin], cols)?;
            o.copy_from_slice(matmul(&cols, &kmat)?.data());
            Ok(())
        })?;
    Tensor::new([n, h, w, cout], out)
}

/// Gradients of [`conv2d`] with respect to its input and its kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [n, h, w, cin, kh, kw, cout] = conv_dims(input, kernel)?;
    if grad_out.shape() != [n, h, w, cout] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad {:?} vs output [{n}, {h}, {w}, {cout}]",
                grad_out.shape()
            ),
        ));
    }
    let kmat = kernel.clone().reshape([kh * kw * cin, cout])?;
    let per_in = h * w * cin;
    let per_out = h * w * cout;
    let parts: Vec<(Vec<f64>, Tensor)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Tensor)> {
            let cols = im2col_image(&input.data[i * per_in..(i + 1) * per_in], h, w, cin, kh, kw);
            let cols = Tensor::new([h * w, kh * kw * cin], cols)?;
            let g = Tensor::new(
                [h * w, cout],
                grad_out.data[i * per_out..(i + 1) * per_out].to_vec(),
            )?;
            let dk = matmul_tn(&cols, &g)?;
            let dcols = matmul_nt(&g, &kmat)?;
            Ok((col2im_image(dcols.data(), h, w, cin, kh, kw), dk))
        })
        .collect::<Result<_>>()?;
    let mut grad_in = Vec::with_capacity(n * per_in);
    let mut grad_k = vec![0.0; kernel.len()];
    for (gi, dk) in parts {
        grad_in.extend_from_slice(&gi);
        for (a, b) in grad_k.iter_mut().zip(dk.data()) {
            *a += b;
        }
    }
    Ok((
        Tensor::new([n, h, w, cin], grad_in)?,
        Tensor::new(kernel.shape().to_vec(), grad_k)?,
    ))
}

/// Argmax routing for [`maxpool2`]: flat input index of each output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

impl PoolIndex {
    /// Position `(dy, dx)` of the winner inside the 2×2 window for output element `k`.
    pub fn window_offset(&self, k: usize) -> (usize, usize) {
        let (w, c) = (self.input_shape[2], self.input_shape[3]);
        let flat = self.argmax[k];
        let x = (flat / c) % w;
        let y = (flat / (c * w)) % self.input_shape[1];
        (y % 2, x % 2)
    }
}

/// 2×2 max pooling with stride 2; ties go to the first element in row-major order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolIndex)> {
    let [n, h, w, c] = match input.shape() {
        &[n, h, w, c] => [n, h, w, c],
        s => {
            return Err(Error::shape(
                "maxpool2",
                format!("expected NHWC, got {s:?}"),
            ))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("odd spatial dims {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((b * h + 2 * y) * w + 2 * x) * c + ch;
                    let mut best = input.data[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
                        if input.data[i] > best {
                            best = input.data[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((
        Tensor::new([n, oh, ow, c], out)?,
        PoolIndex {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(index: &PoolIndex, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != index.argmax.len() {
        return Err(Error::shape(
            "maxpool2_backward",
            format!(
                "{} grads for {} pooled elements",
                grad_out.len(),
                index.argmax.len()
            ),
        ));
    }
    let mut g = Tensor::zeros(index.input_shape.clone());
    for (&i, &v) in index.argmax.iter().zip(grad_out.data()) {
        g.data[i] += v;
    }
    Ok(g)
}

/// Mean softmax cross-entropy over the batch and its gradient `(softmax − onehot)/N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = dims2(logits, "softmax_xent")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_xent",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut grad = vec![0.0; n * c];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = &logits.data[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let grow = &mut grad[i * c..(i + 1) * c];
        for (g, &z) in grow.iter_mut().zip(row) {
            *g = (z - lse).exp() * inv_n;
        }
        grow[label] -= inv_n;
    }
    Ok((loss * inv_n, Tensor::new([n, c], grad)?))
}

/// Index of the first maximal logit of each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, c) = logits.as_2d();
    (0..n)
        .map(|i| {
            let row = &logits.data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
