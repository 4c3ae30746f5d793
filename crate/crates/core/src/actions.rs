//! Group actions on images and feature maps, smooth deformation fields,
//! scaled-dataset synthesis, and dataset file I/O.
//!
//! All rescalings are taken about the image center; translations `v` are
//! measured from the center in pixels.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::FeatureMap;
use crate::tensor::{resample_bilinear, Tensor};
use crate::{Error, Result};

/// One scaling-translation group element: `beta` is the log2 scale, `v` the
/// translation in pixels measured from the image center (row, col).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupElement {
    pub beta: f64,
    pub v: [f64; 2],
}

impl GroupElement {
    pub fn scaling(beta: f64) -> Self {
        GroupElement { beta, v: [0.0, 0.0] }
    }
}

fn center_of(h: usize, w: usize) -> (f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

/// Input-domain action: resample at `2^{-beta} (u - v)` about the center.
pub fn apply_d(x0: &Tensor, g: GroupElement) -> Result<Tensor> {
    let (h, w) = (x0.shape()[1], x0.shape()[2]);
    let (cr, cc) = center_of(h, w);
    let z = 2f64.powf(-g.beta);
    resample_bilinear(x0, |r, c| {
        (
            cr + z * (r as f64 - cr - g.v[0]),
            cc + z * (c as f64 - cc - g.v[1]),
        )
    })
}

/// Feature-domain action: the spatial resample of every scale slice combined
/// with an index shift along the scale axis. `beta` must be an integer
/// multiple of the grid spacing; channels shifted in from outside the
/// truncated interval are marked invalid.
pub fn apply_t(x: &FeatureMap, g: GroupElement, delta: f64) -> Result<FeatureMap> {
    let steps = if g.beta == 0.0 {
        0i64
    } else {
        if delta <= 0.0 {
            return Err(Error::Config("apply_t needs a positive grid spacing".into()));
        }
        let raw = g.beta / delta;
        let rounded = raw.round();
        if (raw - rounded).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "beta {} is not a multiple of the scale spacing {}",
                g.beta, delta
            )));
        }
        rounded as i64
    };
    let (m, n_s, h, w) = (x.m(), x.n_s(), x.h(), x.w());
    let hw = h * w;
    let (cr, cc) = center_of(h, w);
    let z = 2f64.powf(-g.beta);
    let mut out = Tensor::zeros(&[m, n_s, h, w]);
    let mut valid = vec![false; n_s];
    for a_out in 0..n_s {
        let a_src = a_out as i64 - steps;
        if a_src < 0 || a_src >= n_s as i64 {
            continue; // shifted in from outside the interval
        }
        if !x.valid[a_src as usize] {
            continue;
        }
        valid[a_out] = true;
        for ch in 0..m {
            let slice = Tensor::new(
                vec![1, h, w],
                x.data.data()[(ch * n_s + a_src as usize) * hw..][..hw].to_vec(),
            )?;
            let res = resample_bilinear(&slice, |r, c| {
                (
                    cr + z * (r as f64 - cr - g.v[0]),
                    cc + z * (c as f64 - cc - g.v[1]),
                )
            })?;
            out.data_mut()[(ch * n_s + a_out) * hw..][..hw].copy_from_slice(res.data());
        }
    }
    Ok(FeatureMap {
        data: out,
        valid,
        layer: x.layer,
    })
}

/// A smooth displacement field `tau` with its measured norms.
#[derive(Debug, Clone)]
pub struct DeformationField {
    /// `[2, H, W]`: row and column displacements in pixels.
    pub tau: Tensor,
    /// Measured sup of the Jacobian operator norm over the grid.
    pub grad_inf: f64,
    /// Measured sup of `|tau(u)|_2` over the grid.
    pub tau_inf: f64,
}

/// Resample at `rho(u) = u - tau(u)`, zero outside.
pub fn apply_deformation(x0: &Tensor, field: &DeformationField) -> Result<Tensor> {
    let (h, w) = (x0.shape()[1], x0.shape()[2]);
    if field.tau.shape() != [2, h, w] {
        return Err(Error::shape(1, "deformation field does not match image size"));
    }
    resample_bilinear(x0, |r, c| {
        (
            r as f64 - field.tau.at3(0, r, c),
            c as f64 - field.tau.at3(1, r, c),
        )
    })
}

/// Largest singular value of a 2x2 matrix.
fn op_norm_2x2(m: [[f64; 2]; 2]) -> f64 {
    let s = m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inner = (s * s - 4.0 * det * det).max(0.0).sqrt();
    (0.5 * (s + inner)).sqrt()
}

/// Synthesize a low-order 2-D sine-series displacement field and rescale it
/// so the measured `|grad tau|_inf` equals `grad_target` exactly. `modes`
/// controls the series order (smoothness).
pub fn make_smooth_tau(seed: u64, grad_target: f64, modes: usize, h: usize, w: usize) -> Result<DeformationField> {
    if grad_target < 0.0 {
        return Err(Error::Config("gradient target must be >= 0".into()));
    }
    let r_modes = modes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<f64> = (0..2 * r_modes * r_modes)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let hf = h as f64;
    let wf = w as f64;
    let eval = |dim: usize, r: f64, c: f64| -> (f64, f64, f64) {
        // value, d/dr, d/dc
        let mut v = 0.0;
        let mut dr = 0.0;
        let mut dc = 0.0;
        for a in 1..=r_modes {
            for b in 1..=r_modes {
                let cf = coef[(dim * r_modes + (a - 1)) * r_modes + (b - 1)];
                let (fa, fb) = (a as f64 * PI / hf, b as f64 * PI / wf);
                let sr = (fa * (r + 0.5)).sin();
                let crr = (fa * (r + 0.5)).cos();
                let sc = (fb * (c + 0.5)).sin();
                let cc = (fb * (c + 0.5)).cos();
                v += cf * sr * sc;
                dr += cf * fa * crr * sc;
                dc += cf * sr * fb * cc;
            }
        }
        (v, dr, dc)
    };
    let mut tau = Tensor::zeros(&[2, h, w]);
    let mut grad_max = 0.0_f64;
    for r in 0..h {
        for c in 0..w {
            let (v0, dr0, dc0) = eval(0, r as f64, c as f64);
            let (v1, dr1, dc1) = eval(1, r as f64, c as f64);
            tau.set3(0, r, c, v0);
            tau.set3(1, r, c, v1);
            grad_max = grad_max.max(op_norm_2x2([[dr0, dc0], [dr1, dc1]]));
        }
    }
    let scale = if grad_max > 0.0 { grad_target / grad_max } else { 0.0 };
    tau.scale(scale);
    let mut tau_inf = 0.0_f64;
    for r in 0..h {
        for c in 0..w {
            let t0 = tau.at3(0, r, c);
            let t1 = tau.at3(1, r, c);
            tau_inf = tau_inf.max((t0 * t0 + t1 * t1).sqrt());
        }
    }
    Ok(DeformationField {
        tau,
        grad_inf: grad_target,
        tau_inf,
    })
}

/// A labeled image dataset: images are `[1, H, W]` with pixels in `[0, 1]`,
/// labels are class ids in `0..10`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub source: String,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.first().map(|t| t.shape()[1]).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.images.first().map(|t| t.shape()[2]).unwrap_or(0)
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> LabeledDataset {
        LabeledDataset {
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            source: self.source.clone(),
            seed: self.seed,
        }
    }
}

/// Rescale one `[C, H, W]` image about its center by `factor` and resample it
/// onto an `h_out` square canvas (zero-padding or cropping as needed).
pub fn rescale_about_center(img: &Tensor, factor: f64, h_out: usize) -> Result<Tensor> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (cr, cc) = center_of(h, w);
    let (or_, oc) = center_of(h_out, h_out);
    let mut canvas = Tensor::zeros(&[c, h_out, h_out]);
    for r in 0..h_out {
        for col in 0..h_out {
            let sr = cr + (r as f64 - or_) / factor;
            let sc = cc + (col as f64 - oc) / factor;
            for ch in 0..c {
                canvas.data_mut()[(ch * h_out + r) * h_out + col] =
                    crate::tensor::bilinear_at(img, ch, sr, sc);
            }
        }
    }
    Ok(canvas)
}

/// Rescale every image by an i.i.d. uniform factor in `[0.3, 1]` about its
/// center and zero-pad/crop to `h_out`. Per-image rngs are derived from the
/// seed so the result is order-independent and reproducible.
pub fn synth_scaled_dataset(source: &LabeledDataset, seed: u64, h_out: usize) -> Result<LabeledDataset> {
    if source.is_empty() {
        return Err(Error::Config("source dataset is empty".into()));
    }
    let mut images = Vec::with_capacity(source.len());
    for (i, img) in source.images.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0xa076_1d64_78bd_642f_u64.wrapping_mul(i as u64 + 1)));
        let factor = rng.gen_range(0.3..1.0);
        images.push(rescale_about_center(img, factor, h_out)?);
    }
    Ok(LabeledDataset {
        images,
        labels: source.labels.clone(),
        source: format!("{}+scaled", source.source),
        seed,
    })
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize) -> Result<u32> {
    if off + 4 > bytes.len() {
        return Err(Error::Format("truncated IDX header".into()));
    }
    Ok(u32::from_be_bytes([
        bytes[off],
        bytes[off + 1],
        bytes[off + 2],
        bytes[off + 3],
    ]))
}

/// Parse an IDX image payload: big-endian magic 0x00000803, then counts and
/// unsigned bytes normalized to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {:#010x}, want {:#010x}",
            magic, IDX_IMAGE_MAGIC
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    let want = 16 + n * h * w;
    if bytes.len() < want {
        return Err(Error::Format(format!(
            "truncated IDX image payload: have {} bytes, want {}",
            bytes.len(),
            want
        )));
    }
    let data = bytes[16..want].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((n, h, w, data))
}

/// Parse an IDX label payload: big-endian magic 0x00000801 then one byte per
/// label.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {:#010x}, want {:#010x}",
            magic, IDX_LABEL_MAGIC
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format("truncated IDX label payload".into()));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Load an IDX image/label pair into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut img_bytes = Vec::new();
    fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut lab_bytes = Vec::new();
    fs::File::open(labels_path)?.read_to_end(&mut lab_bytes)?;
    let (n, h, w, data) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lab_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "image/label count mismatch: {} images, {} labels",
            n,
            labels.len()
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        images.push(Tensor::new(vec![1, h, w], data[i * h * w..(i + 1) * h * w].to_vec())?);
    }
    Ok(LabeledDataset {
        images,
        labels,
        source: images_path.display().to_string(),
        seed: 0,
    })
}

/// Persist a dataset: a text key-value header terminated by a blank line,
/// then `count*height*width` little-endian f32 pixels, then one byte per
/// label.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let (h, w) = (ds.height(), ds.width());
    let mut out = Vec::new();
    let header = format!(
        "format=scaled-dataset-v1\ncount={}\nheight={}\nwidth={}\nseed={}\nsource={}\n\n",
        ds.len(),
        h,
        w,
        ds.seed,
        ds.source
    );
    out.extend_from_slice(header.as_bytes());
    for img in &ds.images {
        for &v in img.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&ds.labels);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("missing dataset header terminator".into()))?;
    let header =
        std::str::from_utf8(&bytes[..sep]).map_err(|_| Error::Format("non-UTF8 header".into()))?;
    let mut count = None;
    let mut height = None;
    let mut width = None;
    let mut seed = 0u64;
    let mut source = String::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line '{}'", line)))?;
        match k {
            "format" => {
                if v != "scaled-dataset-v1" {
                    return Err(Error::Format(format!("unknown dataset format '{}'", v)));
                }
            }
            "count" => count = Some(v.parse::<usize>().map_err(|_| Error::Format("bad count".into()))?),
            "height" => {
                height = Some(v.parse::<usize>().map_err(|_| Error::Format("bad height".into()))?)
            }
            "width" => width = Some(v.parse::<usize>().map_err(|_| Error::Format("bad width".into()))?),
            "seed" => seed = v.parse::<u64>().map_err(|_| Error::Format("bad seed".into()))?,
            "source" => source = v.to_string(),
            other => return Err(Error::Format(format!("unknown dataset header key '{}'", other))),
        }
    }
    let (n, h, w) = (
        count.ok_or_else(|| Error::Format("missing count".into()))?,
        height.ok_or_else(|| Error::Format("missing height".into()))?,
        width.ok_or_else(|| Error::Format("missing width".into()))?,
    );
    let pix_off = sep + 2;
    let pix_len = n * h * w * 4;
    if bytes.len() < pix_off + pix_len + n {
        return Err(Error::Format("truncated dataset payload".into()));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut data = Vec::with_capacity(h * w);
        for p in 0..h * w {
            let o = pix_off + (i * h * w + p) * 4;
            data.push(f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64);
        }
        images.push(Tensor::new(vec![1, h, w], data)?);
    }
    let labels = bytes[pix_off + pix_len..pix_off + pix_len + n].to_vec();
    Ok(LabeledDataset {
        images,
        labels,
        source,
        seed,
    })
}

// --- procedural digit glyphs -------------------------------------------
//
// Seven-segment style digit shapes rendered with anti-aliased strokes, used
// as a labeled source when no external digit corpus is available.

const SEGMENTS: [[(f64, f64); 2]; 7] = [
    [(0.15, 0.15), (0.15, 0.85)], // top bar, (row, col) in [0, 1]
    [(0.15, 0.85), (0.50, 0.85)], // top right
    [(0.50, 0.85), (0.85, 0.85)], // bottom right
    [(0.85, 0.15), (0.85, 0.85)], // bottom bar
    [(0.50, 0.15), (0.85, 0.15)], // bottom left
    [(0.15, 0.15), (0.50, 0.15)], // top left
    [(0.50, 0.15), (0.50, 0.85)], // middle bar
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 6, 5, 2, 3],    // 9
];

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt()
}

/// Render one digit glyph with jittered geometry into an `h x h` image.
/// Box size, placement, stroke thickness, shear, rotation, and per-endpoint
/// jitter all vary per sample so classes overlap substantially in pixel
/// space.
pub fn render_glyph(digit: u8, rng: &mut ChaCha8Rng, h: usize) -> Tensor {
    let box_size = h as f64 * rng.gen_range(0.54..0.72);
    let offset_r = (h as f64 - box_size) / 2.0 + rng.gen_range(-2.0..2.0);
    let offset_c = (h as f64 - box_size) / 2.0 + rng.gen_range(-2.0..2.0);
    let thickness = rng.gen_range(0.75..1.5);
    let shear = rng.gen_range(-0.15..0.15);
    let angle: f64 = rng.gen_range(-0.12..0.12);
    let (sin_a, cos_a) = angle.sin_cos();
    let jitter: Vec<(f64, f64)> = (0..14)
        .map(|_| (rng.gen_range(-0.035..0.035), rng.gen_range(-0.035..0.035)))
        .collect();
    let segs = DIGIT_SEGMENTS[digit as usize];
    let mut img = Tensor::zeros(&[1, h, h]);
    let mut endpoints = Vec::with_capacity(segs.len());
    for (si, &s) in segs.iter().enumerate() {
        let (a, b) = (SEGMENTS[s][0], SEGMENTS[s][1]);
        let ja = jitter[(2 * si) % jitter.len()];
        let jb = jitter[(2 * si + 1) % jitter.len()];
        let to_px = |p: (f64, f64), j: (f64, f64)| -> (f64, f64) {
            let r0 = p.0 + j.0 - 0.5;
            let c0 = p.1 + j.1 + shear * (0.5 - p.0) - 0.5;
            let r = (cos_a * r0 - sin_a * c0 + 0.5) * box_size + offset_r;
            let c = (sin_a * r0 + cos_a * c0 + 0.5) * box_size + offset_c;
            (r, c)
        };
        endpoints.push((to_px(a, ja), to_px(b, jb)));
    }
    for r in 0..h {
        for c in 0..h {
            let p = (r as f64, c as f64);
            let mut d = f64::INFINITY;
            for &(a, b) in &endpoints {
                d = d.min(dist_to_segment(p, a, b));
            }
            let v = (thickness + 0.5 - d).clamp(0.0, 1.0);
            img.set3(0, r, c, v);
        }
    }
    img
}

/// Deterministically generate `n` labeled glyph images with uniformly cycled
/// class labels.
pub fn synth_glyph_dataset(n: usize, seed: u64, h: usize) -> Result<LabeledDataset> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = (i % 10) as u8;
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(i as u64 + 1)));
        images.push(render_glyph(digit, &mut rng, h));
        labels.push(digit);
    }
    Ok(LabeledDataset {
        images,
        labels,
        source: "glyphs".into(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_blob(h: usize, sigma: f64, cr: f64, cc: f64) -> Tensor {
        let mut img = Tensor::zeros(&[1, h, h]);
        for r in 0..h {
            for c in 0..h {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                img.set3(0, r, c, (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        img
    }

    fn rel_l2(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let den: f64 = b.data().iter().map(|y| y * y).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn apply_d_identity() {
        let img = gaussian_blob(16, 3.0, 8.0, 7.0);
        let out = apply_d(&img, GroupElement { beta: 0.0, v: [0.0, 0.0] }).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn apply_d_constant_interior() {
        let img = Tensor::full(&[1, 20, 20], 0.7);
        let out = apply_d(&img, GroupElement::scaling(0.5)).unwrap();
        for r in 5..15 {
            for c in 5..15 {
                assert!((out.at3(0, r, c) - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_d_round_trip_small_error() {
        let img = gaussian_blob(56, 6.0, 28.0, 26.0);
        let fwd = apply_d(&img, GroupElement::scaling(0.5)).unwrap();
        let back = apply_d(&fwd, GroupElement::scaling(-0.5)).unwrap();
        assert!(rel_l2(&back, &img) < 0.02, "round trip error {}", rel_l2(&back, &img));
    }

    #[test]
    fn apply_d_composes() {
        let img = gaussian_blob(56, 7.0, 27.0, 29.0);
        let g1 = GroupElement::scaling(0.4);
        let g2 = GroupElement::scaling(-0.7);
        let two = apply_d(&apply_d(&img, g1).unwrap(), g2).unwrap();
        let direct = apply_d(&img, GroupElement::scaling(-0.3)).unwrap();
        assert!(rel_l2(&two, &direct) < 0.03, "composition error {}", rel_l2(&two, &direct));
    }

    #[test]
    fn apply_t_index_arithmetic() {
        let mut data = Tensor::zeros(&[1, 5, 4, 4]);
        for a in 0..5 {
            for p in 0..16 {
                data.data_mut()[a * 16 + p] = a as f64;
            }
        }
        let fm = FeatureMap::new(data, 1);
        let g = GroupElement { beta: 0.5, v: [0.0, 0.0] };
        let out = apply_t(&fm, g, 0.5).unwrap();
        assert!(!out.valid[0]);
        for a in 1..5 {
            assert!(out.valid[a]);
        }
        // Spatial part magnifies a constant slice, so interior pixels carry
        // the shifted channel value.
        for a in 1..5 {
            assert!((out.data.at4(0, a, 2, 2) - (a - 1) as f64).abs() < 1e-12);
        }
        assert!(apply_t(&fm, GroupElement { beta: 0.3, v: [0.0, 0.0] }, 0.5).is_err());
    }

    #[test]
    fn apply_t_round_trip_on_valid_channels() {
        let hw = 48 * 48;
        let mut data = Tensor::zeros(&[1, 5, 48, 48]);
        for a in 0..5 {
            // Keep blobs compact enough that the magnified copy stays inside.
            let blob = gaussian_blob(48, 3.0 + 0.5 * a as f64, 24.0, 23.0);
            data.data_mut()[a * hw..(a + 1) * hw].copy_from_slice(blob.data());
        }
        let fm = FeatureMap::new(data, 1);
        let fwd = apply_t(&fm, GroupElement { beta: 0.5, v: [0.0, 0.0] }, 0.5).unwrap();
        let back = apply_t(&fwd, GroupElement { beta: -0.5, v: [0.0, 0.0] }, 0.5).unwrap();
        for a in 0..5 {
            assert_eq!(back.valid[a], a < 4);
        }
        for a in 0..4 {
            let orig =
                Tensor::new(vec![1, 48, 48], fm.data.data()[a * hw..(a + 1) * hw].to_vec()).unwrap();
            let rt =
                Tensor::new(vec![1, 48, 48], back.data.data()[a * hw..(a + 1) * hw].to_vec()).unwrap();
            assert!(rel_l2(&rt, &orig) < 0.03, "channel {} error {}", a, rel_l2(&rt, &orig));
        }
    }

    #[test]
    fn deformation_zero_is_identity() {
        let img = gaussian_blob(20, 4.0, 10.0, 10.0);
        let field = DeformationField {
            tau: Tensor::zeros(&[2, 20, 20]),
            grad_inf: 0.0,
            tau_inf: 0.0,
        };
        let out = apply_deformation(&img, &field).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn constant_deformation_is_translation() {
        let img = gaussian_blob(24, 4.0, 12.0, 12.0);
        let mut tau = Tensor::zeros(&[2, 24, 24]);
        for p in 0..24 * 24 {
            tau.data_mut()[p] = 1.0; // row shift
            tau.data_mut()[24 * 24 + p] = -2.0; // col shift
        }
        let field = DeformationField {
            tau,
            grad_inf: 0.0,
            tau_inf: (5.0_f64).sqrt(),
        };
        let out = apply_deformation(&img, &field).unwrap();
        // rho(u) = u - tau: same as apply_d with beta = 0, v = -tau.
        let want = apply_d(&img, GroupElement { beta: 0.0, v: [1.0, -2.0] }).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_deformation_matches_dense_oracle() {
        let img = gaussian_blob(24, 5.0, 11.0, 13.0);
        let field = make_smooth_tau(3, 0.1, 2, 24, 24).unwrap();
        let out = apply_deformation(&img, &field).unwrap();
        for r in 2..22 {
            for c in 2..22 {
                let sr = r as f64 - field.tau.at3(0, r, c);
                let sc = c as f64 - field.tau.at3(1, r, c);
                let want = crate::tensor::bilinear_at(&img, 0, sr, sc);
                assert!((out.at3(0, r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_tau_hits_gradient_budget() {
        let f = make_smooth_tau(1, 0.1, 3, 32, 32).unwrap();
        assert!((f.grad_inf - 0.1).abs() < 1e-6);
        let zero = make_smooth_tau(2, 0.0, 3, 16, 16).unwrap();
        assert!(zero.tau.data().iter().all(|&v| v == 0.0));
        let f1 = make_smooth_tau(7, 0.15, 3, 32, 32).unwrap();
        let f2 = make_smooth_tau(7, 0.15, 3, 32, 32).unwrap();
        assert_eq!(f1.tau.data(), f2.tau.data());
    }

    #[test]
    fn rescale_factor_one_is_identity() {
        let img = gaussian_blob(28, 5.0, 14.0, 13.0);
        let out = rescale_about_center(&img, 1.0, 28).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scaled_dataset_deterministic_and_mass_ratio() {
        let source = synth_glyph_dataset(1000, 77, 28).unwrap();
        let d1 = synth_scaled_dataset(&source, 5, 28).unwrap();
        let d2 = synth_scaled_dataset(&source, 5, 28).unwrap();
        for (a, b) in d1.images.iter().zip(&d2.images) {
            assert_eq!(a.data(), b.data());
        }
        let mass = |ds: &LabeledDataset| -> f64 {
            ds.images.iter().map(|t| t.data().iter().sum::<f64>()).sum::<f64>()
        };
        let ratio = mass(&d1) / mass(&source);
        // E[s^2] for s ~ U[0.3, 1] is (1 - 0.3^3) / (3 * 0.7) = 0.4633...
        let want = (1.0 - 0.3_f64.powi(3)) / (3.0 * 0.7);
        assert!(
            (ratio - want).abs() / want < 0.05,
            "mass ratio {} vs expected {}",
            ratio,
            want
        );
    }

    #[test]
    fn idx_parsing() {
        // 2 images of 2x3.
        let mut img = vec![];
        img.extend_from_slice(&0x0000_0803_u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 128, 255, 1, 2, 3, 10, 20, 30, 40, 50, 60]);
        let (n, h, w, data) = parse_idx_images(&img).unwrap();
        assert_eq!((n, h, w), (2, 2, 3));
        assert_eq!(data[2], 1.0); // byte 255 normalizes to exactly 1
        assert!((data[1] - 128.0 / 255.0).abs() < 1e-12);

        let mut bad = img.clone();
        bad[3] = 0x01; // wrong magic
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format(_))));

        let mut truncated = img.clone();
        truncated.truncate(20);
        assert!(parse_idx_images(&truncated).is_err());

        let mut empty = vec![];
        empty.extend_from_slice(&0x0000_0803_u32.to_be_bytes());
        empty.extend_from_slice(&0u32.to_be_bytes());
        empty.extend_from_slice(&5u32.to_be_bytes());
        empty.extend_from_slice(&5u32.to_be_bytes());
        let (n, ..) = parse_idx_images(&empty).unwrap();
        assert_eq!(n, 0);

        let mut lab = vec![];
        lab.extend_from_slice(&0x0000_0801_u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
        let mut badlab = lab.clone();
        badlab[3] = 0x02;
        assert!(parse_idx_labels(&badlab).is_err());
    }

    #[test]
    fn dataset_container_round_trip() {
        let dir = std::env::temp_dir().join("stconv_ds_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.ds");
        let ds = synth_glyph_dataset(12, 3, 16).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.iter().zip(&ds.images) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= f32::EPSILON as f64 * y.abs().max(1.0));
            }
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn glyphs_are_deterministic_and_in_range() {
        let a = synth_glyph_dataset(20, 9, 28).unwrap();
        let b = synth_glyph_dataset(20, 9, 28).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        for img in &a.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(a.labels[3], 3);
        assert_eq!(a.labels[13], 3);
        let d0: f64 = a.images[0].data().iter().sum();
        let d1: f64 = a.images[1].data().iter().sum();
        assert!((d0 - d1).abs() > 1.0);
    }

    #[test]
    fn maxpool_commutes_with_t_on_valid_channels() {
        // max over alpha of T_beta x equals the resampled max over alpha of x
        // when the argmax channel stays in range.
        let (h, w) = (32, 32);
        let hw = h * w;
        let mut data = Tensor::zeros(&[1, 4, h, w]);
        let blob = gaussian_blob(h, 5.0, 16.0, 16.0);
        // Channel 0 dominates everywhere so shifts keep the argmax valid.
        for a in 0..4 {
            for p in 0..hw {
                data.data_mut()[a * hw + p] = blob.data()[p] * (4.0 - a as f64);
            }
        }
        let fm = FeatureMap::new(data, 1);
        // Positive beta shifts channel 0 (the argmax) to channel 1: it stays
        // in range, so the max commutes with the action.
        let g = GroupElement { beta: 0.5, v: [0.0, 0.0] };
        let shifted = apply_t(&fm, g, 0.5).unwrap();
        let mut max_shifted = Tensor::zeros(&[1, h, w]);
        for p in 0..hw {
            let mut best = f64::NEG_INFINITY;
            for a in 0..4 {
                if shifted.valid[a] {
                    best = best.max(shifted.data.data()[a * hw + p]);
                }
            }
            max_shifted.data_mut()[p] = best;
        }
        let (mp, _) = crate::network::scale_maxpool(&fm.data).unwrap();
        let resampled = apply_d(&mp.reshape(vec![1, h, w]).unwrap(), g).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 8..24 {
            for c in 8..24 {
                let d = max_shifted.at3(0, r, c) - resampled.at3(0, r, c);
                num += d * d;
                den += resampled.at3(0, r, c).powi(2);
            }
        }
        assert!((num / den).sqrt() < 0.05, "error {}", (num / den).sqrt());
    }
}
