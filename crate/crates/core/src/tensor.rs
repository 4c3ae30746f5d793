//! Dense numeric arrays and the 2-D convolution / resampling primitives
//! every other module is built on.
//!
//! Everything is 64-bit floats in row-major order. Convolutions use the
//! correlation convention (`input[h+i, w+j] * kernel[i, j]`) and a fixed
//! per-element summation order so results are bit-reproducible.

use crate::{Error, Result};

/// Dense N-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(Error::shape(axis, "extent must be >= 1"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                0,
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterpret the flat data under a new shape of the same total size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                0,
                format!("cannot reshape {} elements into {:?}", self.data.len(), shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    pub fn at4(&self, a: usize, b: usize, i: usize, j: usize) -> f64 {
        self.data[((a * self.shape[1] + b) * self.shape[2] + i) * self.shape[3] + j]
    }

    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.shape[1] + i) * self.shape[2] + j] = v;
    }

    pub fn set4(&mut self, a: usize, b: usize, i: usize, j: usize, v: f64) {
        self.data[((a * self.shape[1] + b) * self.shape[2] + i) * self.shape[3] + j] = v;
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// Elementwise `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Running count of floating-point operations in a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    count: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        FlopCounter { count: 0 }
    }

    pub fn add(&mut self, n: u64) {
        self.count += n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Valid (no padding) multichannel 2-D correlation.
///
/// `input` is `[C, H, W]`, `kernel` is `[C, L, L]`; the output is
/// `[H-L+1, W-L+1]` with `out[h, w] = sum_{c,i,j} input[c, h+i, w+j] * kernel[c, i, j]`.
/// Adds `2*C*L^2*H'*W'` to the counter.
pub fn conv2d_valid(input: &Tensor, kernel: &Tensor, counter: &mut FlopCounter) -> Result<Tensor> {
    let (c_in, h, w) = expect3(input, "conv2d_valid input")?;
    let (c_k, l, l2) = expect3(kernel, "conv2d_valid kernel")?;
    if l != l2 {
        return Err(Error::shape(2, format!("kernel must be square, got {}x{}", l, l2)));
    }
    if c_k != c_in {
        return Err(Error::shape(
            0,
            format!("kernel channels {} != input channels {}", c_k, c_in),
        ));
    }
    if l > h {
        return Err(Error::shape(1, format!("kernel size {} exceeds input height {}", l, h)));
    }
    if l > w {
        return Err(Error::shape(2, format!("kernel size {} exceeds input width {}", l, w)));
    }
    let ho = h - l + 1;
    let wo = w - l + 1;
    let mut out = vec![0.0; ho * wo];
    // Accumulation runs (c, i, j) outermost with the output row innermost, so
    // every output element sums its terms in the same (c, i, j) order as a
    // naive quadruple loop.
    for c in 0..c_in {
        for i in 0..l {
            for j in 0..l {
                let k = kernel.data[(c * l + i) * l + j];
                if k == 0.0 {
                    continue;
                }
                for ho_i in 0..ho {
                    let in_row = &input.data[(c * h + ho_i + i) * w + j..][..wo];
                    let out_row = &mut out[ho_i * wo..][..wo];
                    for (o, x) in out_row.iter_mut().zip(in_row.iter()) {
                        *o += k * x;
                    }
                }
            }
        }
    }
    counter.add(2 * (c_in * l * l * ho * wo) as u64);
    Tensor::new(vec![ho, wo], out)
}

/// Zero-pad `input` by `pad` pixels on each spatial side.
pub fn pad_spatial(input: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, h, w) = expect3(input, "pad_spatial input")?;
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for i in 0..h {
            let src = &input.data[(ci * h + i) * w..][..w];
            let dst = &mut out.data[(ci * hp + i + pad) * wp + pad..][..w];
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Same-size correlation: `conv2d_valid` on the input zero-padded by
/// `(L-1)/2` on each spatial side. Requires odd `L`.
pub fn conv2d_same(input: &Tensor, kernel: &Tensor, counter: &mut FlopCounter) -> Result<Tensor> {
    let (_, l, _) = expect3(kernel, "conv2d_same kernel")?;
    if l % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d_same requires an odd kernel size, got {}",
            l
        )));
    }
    let padded = pad_spatial(input, (l - 1) / 2)?;
    conv2d_valid(&padded, kernel, counter)
}

/// Adjoint of `conv2d_same` with respect to the input, for a single-channel
/// kernel: scatters `grad_out[h, w] * kernel[i, j]` back to input position
/// `(h+i-p, w+j-p)`. Used by backward passes.
pub fn conv2d_same_adjoint(grad_out: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w) = expect2(grad_out, "conv2d_same_adjoint grad")?;
    let (c_k, l, _) = expect3(kernel, "conv2d_same_adjoint kernel")?;
    if c_k != 1 {
        return Err(Error::shape(0, "adjoint expects a single-channel kernel"));
    }
    let p = (l - 1) / 2;
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..l {
        for j in 0..l {
            let k = kernel.data[i * l + j];
            if k == 0.0 {
                continue;
            }
            // grad_in[h+i-p, w+j-p] += k * grad_out[h, w]
            let di = i as isize - p as isize;
            let dj = j as isize - p as isize;
            let h0 = (-di).max(0) as usize;
            let h1 = ((h as isize - di).min(h as isize)) as usize;
            let w0 = (-dj).max(0) as usize;
            let w1 = ((w as isize - dj).min(w as isize)) as usize;
            for hh in h0..h1 {
                let src = &grad_out.data[hh * w + w0..hh * w + w1];
                let ti = (hh as isize + di) as usize;
                let tj0 = (w0 as isize + dj) as usize;
                let dst = &mut out.data[ti * w + tj0..ti * w + tj0 + (w1 - w0)];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += k * s;
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear interpolation of `img[c]` at real coordinates `(row, col)`.
/// Coordinates outside the image read as zero.
pub fn bilinear_at(img: &Tensor, c: usize, row: f64, col: f64) -> f64 {
    let h = img.shape[1] as isize;
    let w = img.shape[2] as isize;
    if !row.is_finite() || !col.is_finite() {
        return 0.0;
    }
    let r0 = row.floor();
    let c0 = col.floor();
    let dr = row - r0;
    let dc = col - c0;
    let r0 = r0 as isize;
    let c0 = c0 as isize;
    let mut acc = 0.0;
    for (ri, wr) in [(r0, 1.0 - dr), (r0 + 1, dr)] {
        if wr == 0.0 || ri < 0 || ri >= h {
            continue;
        }
        for (ci, wc) in [(c0, 1.0 - dc), (c0 + 1, dc)] {
            if wc == 0.0 || ci < 0 || ci >= w {
                continue;
            }
            let base = (c * h as usize + ri as usize) * w as usize + ci as usize;
            acc += wr * wc * img.data[base];
        }
    }
    acc
}

/// Resample every channel of `img` at the coordinates produced by `map`:
/// `out[c, r, w] = bilinear(img[c], map(r, w))`. `map` returns `(row, col)`
/// source coordinates; out-of-range reads are zero.
pub fn resample_bilinear<F>(img: &Tensor, map: F) -> Result<Tensor>
where
    F: Fn(usize, usize) -> (f64, f64),
{
    let (c, h, w) = expect3(img, "resample_bilinear input")?;
    let mut out = Tensor::zeros(&[c, h, w]);
    for r in 0..h {
        for col in 0..w {
            let (sr, sc) = map(r, col);
            for ci in 0..c {
                let v = bilinear_at(img, ci, sr, sc);
                out.data[(ci * h + r) * w + col] = v;
            }
        }
    }
    Ok(out)
}

fn expect2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(
            t.shape.len().saturating_sub(1),
            format!("{} must be 2-D, got {:?}", what, t.shape),
        ));
    }
    Ok((t.shape[0], t.shape[1]))
}

fn expect3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.shape.len() != 3 {
        return Err(Error::shape(
            t.shape.len().saturating_sub(1),
            format!("{} must be 3-D, got {:?}", what, t.shape),
        ));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2]))
}
