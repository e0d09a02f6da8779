//! Base image augmentations and the augment-and-mix procedure.
//!
//! All ops take a `[C,H,W]` tensor with values in `[0,1]` and return the
//! same shape in the same range. Geometric ops resample bilinearly with a
//! constant fill (mid-gray by default, so borders do not read as occlusion)
//! and draw their direction sign from the caller's generator.
//!
//! Color-space ops (posterize, color, contrast, brightness) are deliberately
//! absent from the training set so corruption evaluation stays uncontaminated.

use crate::error::{Error, Result};
use crate::rng::{sample_beta, sample_dirichlet, SeededRng};
use crate::tensor::Tensor;

/// The base augmentation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Autocontrast,
    Equalize,
    Rotate,
    Solarize,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Autocontrast,
        OpKind::Equalize,
        OpKind::Rotate,
        OpKind::Solarize,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Autocontrast => "autocontrast",
            OpKind::Equalize => "equalize",
            OpKind::Rotate => "rotate",
            OpKind::Solarize => "solarize",
            OpKind::ShearX => "shear_x",
            OpKind::ShearY => "shear_y",
            OpKind::TranslateX => "translate_x",
            OpKind::TranslateY => "translate_y",
        }
    }

    pub fn parse(s: &str) -> Result<OpKind> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation op {s:?}")))
    }
}

/// Knobs of the augment-and-mix procedure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Dirichlet/Beta concentration for both convex combinations.
    pub alpha: f64,
    pub num_chains: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    /// 1..=10; scales the sampled magnitude upper bound by severity/10.
    pub severity: u8,
    pub fill_value: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            num_chains: 3,
            depth_min: 1,
            depth_max: 3,
            severity: 3,
            fill_value: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "augment alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.num_chains < 1 {
            return Err(Error::Config("augment num_chains must be >= 1".into()));
        }
        if self.depth_min < 1 || self.depth_min > self.depth_max {
            return Err(Error::Config(format!(
                "augment depth range [{}, {}] invalid",
                self.depth_min, self.depth_max
            )));
        }
        if !(1..=10).contains(&self.severity) {
            return Err(Error::Config(format!(
                "augment severity must be in 1..=10, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

fn check_chw(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if img.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [C,H,W] image, got {:?}",
            img.shape()
        )));
    }
    Ok((img.shape()[0], img.shape()[1], img.shape()[2]))
}

/// Bilinear sample of an affine inverse map: dst (x,y) reads
/// `src = A*(p-center) + center + offset`; out-of-image taps read `fill`.
fn affine_sample(
    img: &Tensor<f32>,
    inv: [f32; 4],
    offset: (f32, f32),
    fill: f32,
) -> Result<Tensor<f32>> {
    let (c, h, w) = check_chw(img)?;
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut out = Tensor::zeros(img.shape());
    let at = |ch: usize, y: isize, x: isize| -> f32 {
        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
            fill
        } else {
            img.data()[(ch * h + y as usize) * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = inv[0] * dx + inv[1] * dy + cx + offset.0;
            let sy = inv[2] * dx + inv[3] * dy + cy + offset.1;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v00 = at(ch, yi, xi);
                let v01 = at(ch, yi, xi + 1);
                let v10 = at(ch, yi + 1, xi);
                let v11 = at(ch, yi + 1, xi + 1);
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                out.data_mut()[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Rotate about the image center, bilinear, constant fill.
pub fn rotate_img(img: &Tensor<f32>, degrees: f32, fill: f32) -> Result<Tensor<f32>> {
    let rad = degrees.to_radians();
    let (s, c) = rad.sin_cos();
    // inverse rotation
    affine_sample(img, [c, s, -s, c], (0.0, 0.0), fill)
}

/// Shear about the image center, bilinear, constant fill.
pub fn shear_img(img: &Tensor<f32>, sx: f32, sy: f32, fill: f32) -> Result<Tensor<f32>> {
    // forward [[1, sx], [sy, 1]]; inverse is [[1, -sx], [-sy, 1]] / det
    let det = 1.0 - sx * sy;
    if det.abs() < 1e-6 {
        return Err(Error::InvalidArgument("degenerate shear".into()));
    }
    affine_sample(
        img,
        [1.0 / det, -sx / det, -sy / det, 1.0 / det],
        (0.0, 0.0),
        fill,
    )
}

/// Translate by (dx, dy) pixels (content moves +dx right, +dy down).
pub fn translate_img(img: &Tensor<f32>, dx: f32, dy: f32, fill: f32) -> Result<Tensor<f32>> {
    affine_sample(img, [1.0, 0.0, 0.0, 1.0], (-dx, -dy), fill)
}

/// Invert every value at or above the threshold.
pub fn solarize(img: &Tensor<f32>, threshold: f32) -> Result<Tensor<f32>> {
    check_chw(img)?;
    Ok(img.map(|v| if v >= threshold { 1.0 - v } else { v }))
}

/// Per-channel linear rescale of the value range to [0,1].
pub fn autocontrast(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = check_chw(img)?;
    let mut out = img.clone();
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in plane.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for v in plane.iter_mut() {
                *v = ((*v - lo) * scale).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Per-channel histogram equalization over 256 bins.
pub fn equalize(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = check_chw(img)?;
    let n = h * w;
    let mut out = img.clone();
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        let bin = |v: f32| ((v * 256.0) as usize).min(255);
        let mut hist = [0u32; 256];
        for &v in plane.iter() {
            hist[bin(v)] += 1;
        }
        let mut cdf = [0u32; 256];
        let mut acc = 0;
        for (i, &hv) in hist.iter().enumerate() {
            acc += hv;
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if cdf_min as usize == n {
            continue; // constant channel
        }
        let denom = (n as u32 - cdf_min) as f32;
        for v in plane.iter_mut() {
            let scaled = ((cdf[bin(*v)] - cdf_min) as f32 / denom * 255.0).round() / 255.0;
            *v = scaled.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// One base op at a magnitude in [0,1]. Magnitude 0 is the identity for
/// every magnitude-driven op; geometric ops draw their sign from `rng`.
pub fn apply_base_op(
    img: &Tensor<f32>,
    kind: OpKind,
    magnitude: f32,
    fill: f32,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    let (_, h, w) = check_chw(img)?;
    if magnitude == 0.0
        && !matches!(kind, OpKind::Autocontrast | OpKind::Equalize)
    {
        return Ok(img.clone());
    }
    match kind {
        OpKind::Autocontrast => autocontrast(img),
        OpKind::Equalize => equalize(img),
        OpKind::Rotate => {
            let deg = magnitude * 30.0 * rng.sign() as f32;
            rotate_img(img, deg, fill)
        }
        OpKind::Solarize => solarize(img, 1.0 - magnitude),
        OpKind::ShearX => shear_img(img, magnitude * 0.3 * rng.sign() as f32, 0.0, fill),
        OpKind::ShearY => shear_img(img, 0.0, magnitude * 0.3 * rng.sign() as f32, fill),
        OpKind::TranslateX => {
            let px = magnitude * w as f32 / 3.0 * rng.sign() as f32;
            translate_img(img, px, 0.0, fill)
        }
        OpKind::TranslateY => {
            let px = magnitude * h as f32 / 3.0 * rng.sign() as f32;
            translate_img(img, 0.0, px, fill)
        }
    }
}

/// One sampled augmentation chain: ops applied in sequence.
pub fn apply_chain(
    img: &Tensor<f32>,
    steps: &[(OpKind, f32)],
    fill: f32,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    let mut cur = img.clone();
    for &(kind, mag) in steps {
        cur = apply_base_op(&cur, kind, mag, fill, rng)?;
    }
    Ok(cur)
}

/// Deterministic combine: `m*img + (1-m) * sum_i w_i * chain_i`, clamped.
pub fn mix_chains(
    img: &Tensor<f32>,
    chains: &[Tensor<f32>],
    weights: &[f32],
    m: f32,
) -> Result<Tensor<f32>> {
    if chains.len() != weights.len() || chains.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} chains for {} weights",
            chains.len(),
            weights.len()
        )));
    }
    let mut mixed = Tensor::zeros(img.shape());
    for (chain, &wi) in chains.iter().zip(weights) {
        if chain.shape() != img.shape() {
            return Err(Error::ShapeMismatch(format!(
                "chain output {:?} vs image {:?}",
                chain.shape(),
                img.shape()
            )));
        }
        for (acc, &v) in mixed.data_mut().iter_mut().zip(chain.data()) {
            *acc += wi * v;
        }
    }
    let out = img.zip_map(&mixed, |orig, mix| m * orig + (1.0 - m) * mix)?;
    Ok(out.clamp(0.0, 1.0))
}

/// Full augment-and-mix: random chains combined under Dirichlet weights,
/// then a Beta-weighted convex blend with the original image.
pub fn augment_and_mix(
    img: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    check_chw(img)?;
    let w = sample_dirichlet(rng, cfg.num_chains, cfg.alpha)?;
    let m = sample_beta(rng, cfg.alpha)? as f32;
    let mag_cap = cfg.severity as f32 / 10.0;
    let mut chains = Vec::with_capacity(cfg.num_chains);
    for _ in 0..cfg.num_chains {
        let depth = cfg.depth_min + rng.below(cfg.depth_max - cfg.depth_min + 1);
        let steps: Vec<(OpKind, f32)> = (0..depth)
            .map(|_| {
                let kind = OpKind::ALL[rng.below(OpKind::ALL.len())];
                let mag = rng.uniform() as f32 * mag_cap;
                (kind, mag)
            })
            .collect();
        chains.push(apply_chain(img, &steps, cfg.fill_value, rng)?);
    }
    mix_chains(img, &chains, w.data(), m)
}
