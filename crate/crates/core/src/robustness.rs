//! Generated corruption suite, occlusion attacks, and the robustness
//! metrics (per-kind corruption error, mCE, mCA, Top-k accuracy).
//!
//! Eight corruption kinds are generated procedurally, five severities each,
//! with parameter tables tuned to be monotone at 32x32 scale. The heavier
//! benchmark corruptions (glass/motion/zoom blur, weather, JPEG, ...) are
//! out of scope; adding a kind means extending `CorruptionKind`, its
//! severity table, and the `corrupt` dispatch.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LayerStack;
use crate::rng::{derive_seed_path, sample_gaussian, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    Brightness,
    Contrast,
    Pixelate,
    DefocusBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::DefocusBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::DefocusBlur => "defocus_blur",
        }
    }

    pub fn parse(s: &str) -> Result<CorruptionKind> {
        CorruptionKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = CorruptionKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown corruption kind {s:?}; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5, monotone in strength.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!(
                "severity must be in 1..=5, got {severity}"
            )));
        }
        Ok(Self { kind, severity })
    }

    /// The per-kind strength parameter at this severity.
    pub fn param(&self) -> f64 {
        let i = (self.severity - 1) as usize;
        match self.kind {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10][i],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0][i],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07][i],
            CorruptionKind::SpeckleNoise => [0.06, 0.10, 0.12, 0.16, 0.20][i],
            CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.20, 0.30][i],
            CorruptionKind::Contrast => [0.75, 0.50, 0.40, 0.30, 0.15][i],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0][i],
            CorruptionKind::DefocusBlur => [1.0, 2.0, 3.0, 4.0, 6.0][i],
        }
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

/// Apply one corruption; output is clamped to `[0,1]`.
pub fn corrupt(img: &Tensor<f32>, spec: &CorruptionSpec, rng: &mut SeededRng) -> Result<Tensor<f32>> {
    let (c, h, w) = check_chw(img)?;
    let p = spec.param();
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let noise: Tensor<f32> = sample_gaussian(rng, img.shape());
            img.zip_map(&noise, |v, n| v + p as f32 * n)?
        }
        CorruptionKind::ShotNoise => {
            let mut out = img.clone();
            for v in out.data_mut() {
                *v = rng.poisson((*v as f64 * p).max(0.0))? as f32 / p as f32;
            }
            out
        }
        CorruptionKind::ImpulseNoise => {
            let mut out = img.clone();
            for v in out.data_mut() {
                if rng.uniform() < p {
                    *v = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
                }
            }
            out
        }
        CorruptionKind::SpeckleNoise => {
            let noise: Tensor<f32> = sample_gaussian(rng, img.shape());
            img.zip_map(&noise, |v, n| v * (1.0 + p as f32 * n))?
        }
        CorruptionKind::Brightness => img.map(|v| v + p as f32),
        CorruptionKind::Contrast => {
            let mut out = img.clone();
            for ch in 0..c {
                let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
                let mean: f32 = plane.iter().sum::<f32>() / (h * w) as f32;
                for v in plane.iter_mut() {
                    *v = (*v - mean) * p as f32 + mean;
                }
            }
            out
        }
        CorruptionKind::Pixelate => {
            let d = p as usize;
            let mut out = img.clone();
            for ch in 0..c {
                for by in (0..h).step_by(d) {
                    for bx in (0..w).step_by(d) {
                        let (ey, ex) = ((by + d).min(h), (bx + d).min(w));
                        let mut acc = 0.0f32;
                        for y in by..ey {
                            for x in bx..ex {
                                acc += img.data()[(ch * h + y) * w + x];
                            }
                        }
                        let mean = acc / ((ey - by) * (ex - bx)) as f32;
                        for y in by..ey {
                            for x in bx..ex {
                                out.data_mut()[(ch * h + y) * w + x] = mean;
                            }
                        }
                    }
                }
            }
            out
        }
        CorruptionKind::DefocusBlur => {
            let r = p as isize;
            let mut taps = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx <= r * r {
                        taps.push((dy, dx));
                    }
                }
            }
            let norm = 1.0 / taps.len() as f32;
            let mut out = Tensor::zeros(img.shape());
            for ch in 0..c {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = 0.0f32;
                        for &(dy, dx) in &taps {
                            // clamp-to-edge padding
                            let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                            let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                            acc += img.data()[(ch * h + sy) * w + sx];
                        }
                        out.data_mut()[(ch * h + y as usize) * w + x as usize] = acc * norm;
                    }
                }
            }
            out
        }
    };
    Ok(out.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    /// Block filled with zeros.
    Untargeted,
    /// Block pasted from an image of a different class.
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionSpec {
    pub mode: OcclusionMode,
    /// Side fraction of the occluding block.
    pub block_frac: f32,
}

impl OcclusionSpec {
    pub fn new(mode: OcclusionMode, block_frac: f32) -> Result<Self> {
        if !(block_frac > 0.0 && block_frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "block_frac must be in (0,1), got {block_frac}"
            )));
        }
        Ok(Self { mode, block_frac })
    }
}

/// Pool of labeled images the targeted mode samples blocks from.
pub struct OcclusionPool<'a> {
    pub images: &'a Tensor<f32>,
    pub labels: &'a [u8],
    /// Class of the image under attack; donors must differ.
    pub exclude_label: u8,
}

/// Replace one random block: zeros (untargeted) or the same-position crop
/// of a random different-class pool image (targeted).
pub fn occlude(
    img: &Tensor<f32>,
    pool: Option<&OcclusionPool>,
    spec: &OcclusionSpec,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    let (c, h, w) = check_chw(img)?;
    let bh = ((spec.block_frac * h as f32).round() as usize).clamp(1, h);
    let bw = ((spec.block_frac * w as f32).round() as usize).clamp(1, w);
    let y0 = rng.below(h - bh + 1);
    let x0 = rng.below(w - bw + 1);
    let mut out = img.clone();
    match spec.mode {
        OcclusionMode::Untargeted => {
            for ch in 0..c {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        out.data_mut()[(ch * h + y) * w + x] = 0.0;
                    }
                }
            }
        }
        OcclusionMode::Targeted => {
            let pool = pool.ok_or_else(|| {
                Error::InvalidArgument("targeted occlusion requires a donor pool".into())
            })?;
            let donors: Vec<usize> = (0..pool.labels.len())
                .filter(|&i| pool.labels[i] != pool.exclude_label)
                .collect();
            if donors.is_empty() {
                return Err(Error::InvalidArgument(
                    "occlusion pool has no image of a different class".into(),
                ));
            }
            if pool.images.shape()[1..] != *img.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "pool images {:?} vs image {:?}",
                    pool.images.shape(),
                    img.shape()
                )));
            }
            let donor = pool.images.item(donors[rng.below(donors.len())]);
            for ch in 0..c {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        let idx = (ch * h + y) * w + x;
                        out.data_mut()[idx] = donor[idx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of rows whose true label ranks among the k largest logits.
/// Ties resolve toward the lowest class index.
pub fn top_k_accuracy(logits: &Tensor<f32>, labels: &[u8], k: usize) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if k < 1 || k > classes {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={classes}, got {k}"
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let t = label as usize;
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > row[t] || (v == row[t] && j < t))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Corrupt a whole dataset at one (kind, severity); per-item child
/// generators keep the result independent of iteration order.
pub fn corrupt_dataset(dataset: &Dataset, spec: &CorruptionSpec, seed: u64) -> Result<Dataset> {
    let (c, h, w) = dataset.input_shape();
    let mut images = Tensor::zeros(&[dataset.len(), c, h, w]);
    let item_len = c * h * w;
    let results: Vec<Result<Vec<f32>>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::new(derive_seed_path(seed, &[spec.severity as u64, i as u64]));
            let img = Tensor::new(vec![c, h, w], dataset.images.item(i).to_vec())?;
            Ok(corrupt(&img, spec, &mut rng)?.into_data())
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        images.data_mut()[i * item_len..(i + 1) * item_len].copy_from_slice(&r?);
    }
    Dataset::new(
        images,
        dataset.labels.clone(),
        dataset.num_classes,
        format!("{}:{}{}", dataset.name, spec.kind.name(), spec.severity),
        seed,
    )
}

/// Top1 error of the model on the dataset corrupted at one severity.
pub fn severity_error(
    stack: &LayerStack<f32>,
    dataset: &Dataset,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<f64> {
    let corrupted = corrupt_dataset(dataset, spec, seed)?;
    let acc = eval_accuracy(stack, &corrupted.images, &corrupted.labels, 1)?;
    Ok(1.0 - acc)
}

/// Batched Top-k accuracy of a stack over a full image set.
pub fn eval_accuracy(
    stack: &LayerStack<f32>,
    images: &Tensor<f32>,
    labels: &[u8],
    k: usize,
) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 {
        return Ok(0.0);
    }
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let mut hits = 0.0f64;
    let chunk = 128;
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let count = hi - i;
        let batch = Tensor::new(
            vec![count, c, h, w],
            images.data()[i * c * h * w..hi * c * h * w].to_vec(),
        )?;
        let logits = stack.infer(&batch)?;
        hits += top_k_accuracy(&logits, &labels[i..hi], k)? * count as f64;
        i = hi;
    }
    Ok(hits / n as f64)
}

/// Mean Top1 error over all five severities of one corruption kind.
pub fn corruption_error(
    stack: &LayerStack<f32>,
    dataset: &Dataset,
    kind: CorruptionKind,
    seed: u64,
) -> Result<f64> {
    let mut errors = Vec::with_capacity(5);
    for severity in 1..=5 {
        let spec = CorruptionSpec::new(kind, severity)?;
        errors.push((severity, severity_error(stack, dataset, &spec, seed)?));
    }
    ce_from_severity_errors(&errors)
}

/// Fold per-severity Top1 errors into one CE value; all five severities
/// must be present.
pub fn ce_from_severity_errors(errors: &[(u8, f64)]) -> Result<f64> {
    for severity in 1..=5u8 {
        if !errors.iter().any(|&(s, _)| s == severity) {
            return Err(Error::InvalidArgument(format!(
                "missing severity {severity} in corruption error table"
            )));
        }
    }
    Ok(errors.iter().map(|&(_, e)| e).sum::<f64>() / errors.len() as f64)
}

/// Unnormalized mean corruption error; `mCA = 1 - mCE` by definition.
pub fn mce(per_kind_errors: &[f64]) -> f64 {
    if per_kind_errors.is_empty() {
        return 0.0;
    }
    per_kind_errors.iter().sum::<f64>() / per_kind_errors.len() as f64
}

/// Top-k accuracy of the model on the dataset with every image occluded
/// once. Targeted mode draws donor blocks from the dataset itself,
/// excluding the image's own class. k is 1 for untargeted and 2 for
/// targeted evaluation.
pub fn occlusion_accuracy(
    stack: &LayerStack<f32>,
    dataset: &Dataset,
    spec: &OcclusionSpec,
    seed: u64,
) -> Result<f64> {
    let (c, h, w) = dataset.input_shape();
    let item_len = c * h * w;
    let mut occluded = Tensor::zeros(dataset.images.shape());
    let results: Vec<Result<Vec<f32>>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::new(derive_seed_path(seed, &[0x0cc, i as u64]));
            let img = Tensor::new(vec![c, h, w], dataset.images.item(i).to_vec())?;
            let pool = OcclusionPool {
                images: &dataset.images,
                labels: &dataset.labels,
                exclude_label: dataset.labels[i],
            };
            let donor = match spec.mode {
                OcclusionMode::Untargeted => None,
                OcclusionMode::Targeted => Some(&pool),
            };
            Ok(occlude(&img, donor, spec, &mut rng)?.into_data())
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        occluded.data_mut()[i * item_len..(i + 1) * item_len].copy_from_slice(&r?);
    }
    let k = match spec.mode {
        OcclusionMode::Untargeted => 1,
        OcclusionMode::Targeted => 2,
    };
    eval_accuracy(stack, &occluded, &dataset.labels, k)
}
