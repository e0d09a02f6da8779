//! Mixed-sample augmentation: one sampled plan (method, ratio, permutation,
//! mask or patch geometry) applied identically to several views of a batch,
//! with labels mixed by the same ratio.
//!
//! For every patch/mask method, `gamma` is the realized pixel fraction of
//! source A after border clipping, so the label weight always matches the
//! pixels actually kept.

use crate::error::{Error, Result};
use crate::rng::{sample_beta, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMethod {
    Mixup,
    CutMix,
    ResizeMix,
    FMix,
}

impl MixMethod {
    pub const ALL: [MixMethod; 4] = [
        MixMethod::Mixup,
        MixMethod::CutMix,
        MixMethod::ResizeMix,
        MixMethod::FMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixMethod::Mixup => "mixup",
            MixMethod::CutMix => "cutmix",
            MixMethod::ResizeMix => "resizemix",
            MixMethod::FMix => "fmix",
        }
    }
}

/// Destination rectangle for a pasted patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Patch geometry for the resize-paste method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub src_scale: f64,
    pub dst: Rect,
}

/// One sampled mixing decision, applied identically to all views.
#[derive(Debug, Clone)]
pub struct MixPlan {
    pub method: MixMethod,
    /// Final label weight of source A. For mask/patch methods this is the
    /// exact pixel fraction of A.
    pub gamma: f64,
    pub perm: Vec<usize>,
    /// `[H,W]` 0/1 mask (1 keeps source A); present for cutmix/fmix.
    pub mask: Option<Tensor<f32>>,
    pub patch: Option<Patch>,
}

impl MixPlan {
    /// Degenerate plan that leaves a batch untouched (mixup with gamma 1
    /// and the identity permutation).
    pub fn identity(batch: usize) -> MixPlan {
        MixPlan {
            method: MixMethod::Mixup,
            gamma: 1.0,
            perm: (0..batch).collect(),
            mask: None,
            patch: None,
        }
    }
}

fn mask_from_rect(h: usize, w: usize, rect: Rect) -> (Tensor<f32>, f64) {
    let mut mask = Tensor::filled(&[h, w], 1.0);
    for y in rect.y0..rect.y0 + rect.h {
        for x in rect.x0..rect.x0 + rect.w {
            mask.data_mut()[y * w + x] = 0.0;
        }
    }
    let ones = h * w - rect.h * rect.w;
    (mask, ones as f64 / (h * w) as f64)
}

/// Low-frequency binary mask with exactly `round(gamma_target*H*W)` ones.
///
/// The field is a direct sum of random-phase sinusoids over the lowest
/// `ceil(H/4) x ceil(W/4)` frequency pairs with amplitude
/// `(1+||f||)^(-decay)`, thresholded at the k-th largest value.
pub fn fmix_mask(
    h: usize,
    w: usize,
    gamma_target: f64,
    decay: f64,
    rng: &mut SeededRng,
) -> Result<(Tensor<f32>, f64)> {
    if h < 4 || w < 4 {
        return Err(Error::InvalidArgument(format!(
            "fmix mask needs H,W >= 4, got {h}x{w}"
        )));
    }
    let (fh, fw) = (h.div_ceil(4), w.div_ceil(4));
    let mut field = vec![0.0f64; h * w];
    let tau = std::f64::consts::TAU;
    for fy in 0..fh {
        for fx in 0..fw {
            if fy == 0 && fx == 0 {
                continue;
            }
            let freq = ((fy * fy + fx * fx) as f64).sqrt();
            let amp = (1.0 + freq).powf(-decay);
            let phase = rng.uniform() * tau;
            for y in 0..h {
                let ky = fy as f64 * y as f64 / h as f64;
                for x in 0..w {
                    let kx = fx as f64 * x as f64 / w as f64;
                    field[y * w + x] += amp * (tau * (ky + kx) + phase).cos();
                }
            }
        }
    }
    let hw = h * w;
    let k = (gamma_target * hw as f64).round().clamp(0.0, hw as f64) as usize;
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| field[b].partial_cmp(&field[a]).unwrap().then(a.cmp(&b)));
    let mut mask = Tensor::zeros(&[h, w]);
    for &i in order.iter().take(k) {
        mask.data_mut()[i] = 1.0;
    }
    Ok((mask, k as f64 / hw as f64))
}

/// Sample one plan: uniform method choice, per-method ratio rule, one
/// shared random permutation.
pub fn sample_mix_plan(batch: usize, h: usize, w: usize, rng: &mut SeededRng) -> Result<MixPlan> {
    if batch < 1 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let method = MixMethod::ALL[rng.below(4)];
    let perm = rng.permutation(batch);
    let plan = match method {
        MixMethod::Mixup => MixPlan {
            method,
            gamma: sample_beta(rng, 1.0)?,
            perm,
            mask: None,
            patch: None,
        },
        MixMethod::CutMix => {
            let lambda = sample_beta(rng, 1.0)?;
            let ratio = (1.0 - lambda).sqrt();
            let cut_w = (w as f64 * ratio).round() as isize;
            let cut_h = (h as f64 * ratio).round() as isize;
            let cx = rng.below(w) as isize;
            let cy = rng.below(h) as isize;
            let x0 = (cx - cut_w / 2).clamp(0, w as isize) as usize;
            let x1 = (cx + (cut_w + 1) / 2).clamp(0, w as isize) as usize;
            let y0 = (cy - cut_h / 2).clamp(0, h as isize) as usize;
            let y1 = (cy + (cut_h + 1) / 2).clamp(0, h as isize) as usize;
            let rect = Rect {
                x0,
                y0,
                w: x1 - x0,
                h: y1 - y0,
            };
            let (mask, gamma) = mask_from_rect(h, w, rect);
            MixPlan {
                method,
                gamma,
                perm,
                mask: Some(mask),
                patch: None,
            }
        }
        MixMethod::ResizeMix => {
            let tau = rng.uniform_range(0.1, 0.8);
            let ph = ((h as f64 * tau).round() as usize).clamp(1, h);
            let pw = ((w as f64 * tau).round() as usize).clamp(1, w);
            let y0 = rng.below(h - ph + 1);
            let x0 = rng.below(w - pw + 1);
            let dst = Rect {
                x0,
                y0,
                w: pw,
                h: ph,
            };
            let gamma = 1.0 - (ph * pw) as f64 / (h * w) as f64;
            MixPlan {
                method,
                gamma,
                perm,
                mask: None,
                patch: Some(Patch {
                    src_scale: tau,
                    dst,
                }),
            }
        }
        MixMethod::FMix => {
            let target = sample_beta(rng, 1.0)?;
            let (mask, gamma) = fmix_mask(h, w, target, 3.0, rng)?;
            MixPlan {
                method,
                gamma,
                perm,
                mask: Some(mask),
                patch: None,
            }
        }
    };
    Ok(plan)
}

/// Bilinear resize of a `[C,H,W]` image (half-pixel centers, edge clamp).
pub fn resize_bilinear(img: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    if img.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [C,H,W], got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for y in 0..oh {
        let sy = ((y as f32 + 0.5) * h as f32 / oh as f32 - 0.5).clamp(0.0, h as f32 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for x in 0..ow {
            let sx = ((x as f32 + 0.5) * w as f32 / ow as f32 - 0.5).clamp(0.0, w as f32 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| img.data()[(ch * h + yy) * w + xx];
                let v = p(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + p(y0, x1) * fx * (1.0 - fy)
                    + p(y1, x0) * (1.0 - fx) * fy
                    + p(y1, x1) * fx * fy;
                out.data_mut()[(ch * oh + y) * ow + x] = v;
            }
        }
    }
    Ok(out)
}

fn check_batch(x: &Tensor<f32>, plan: &MixPlan) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected [N,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if plan.perm.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "plan permutation is for batch {}, got batch {n}",
            plan.perm.len()
        )));
    }
    if let Some(mask) = &plan.mask {
        if mask.shape() != [h, w] {
            return Err(Error::ShapeMismatch(format!(
                "plan mask {:?} for {h}x{w} images",
                mask.shape()
            )));
        }
    }
    Ok((n, c, h, w))
}

/// Apply one plan to a batch.
pub fn apply_mix_plan(x: &Tensor<f32>, plan: &MixPlan) -> Result<Tensor<f32>> {
    let (n, c, h, w) = check_batch(x, plan)?;
    match plan.method {
        MixMethod::Mixup => {
            if plan.gamma == 1.0 {
                return Ok(x.clone());
            }
            let g = plan.gamma as f32;
            let mut out = Tensor::zeros(x.shape());
            for i in 0..n {
                let a = x.item(i);
                let b = x.item(plan.perm[i]);
                let o = out.item_mut(i);
                for j in 0..a.len() {
                    o[j] = g * a[j] + (1.0 - g) * b[j];
                }
            }
            Ok(out)
        }
        MixMethod::CutMix | MixMethod::FMix => {
            let mask = plan
                .mask
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("mask method without mask".into()))?;
            let mut out = Tensor::zeros(x.shape());
            for i in 0..n {
                let a = x.item(i);
                let b = x.item(plan.perm[i]);
                let o = out.item_mut(i);
                for ch in 0..c {
                    for p in 0..h * w {
                        let idx = ch * h * w + p;
                        o[idx] = if mask.data()[p] == 1.0 { a[idx] } else { b[idx] };
                    }
                }
            }
            Ok(out)
        }
        MixMethod::ResizeMix => {
            let patch = plan
                .patch
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("resizemix plan without patch".into()))?;
            let dst = patch.dst;
            let mut out = x.clone();
            for i in 0..n {
                let src = Tensor::new(
                    vec![c, h, w],
                    x.item(plan.perm[i]).to_vec(),
                )?;
                let small = resize_bilinear(&src, dst.h, dst.w)?;
                let o = out.item_mut(i);
                for ch in 0..c {
                    for yy in 0..dst.h {
                        for xx in 0..dst.w {
                            o[(ch * h + dst.y0 + yy) * w + dst.x0 + xx] =
                                small.data()[(ch * dst.h + yy) * dst.w + xx];
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// `Y' = gamma*Y + (1-gamma)*Y[perm]`; rows must already sum to 1.
pub fn mix_labels(y: &Tensor<f32>, plan: &MixPlan) -> Result<Tensor<f32>> {
    if y.rank() != 2 || y.shape()[0] != plan.perm.len() {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} for batch {}",
            y.shape(),
            plan.perm.len()
        )));
    }
    let (n, k) = (y.shape()[0], y.shape()[1]);
    for i in 0..n {
        let s: f32 = y.data()[i * k..(i + 1) * k].iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "label row {i} sums to {s}, expected 1"
            )));
        }
    }
    if plan.gamma == 1.0 {
        return Ok(y.clone());
    }
    let g = plan.gamma as f32;
    let mut out = Tensor::zeros(y.shape());
    for i in 0..n {
        let a = &y.data()[i * k..(i + 1) * k];
        let b = &y.data()[plan.perm[i] * k..(plan.perm[i] + 1) * k];
        let o = &mut out.data_mut()[i * k..(i + 1) * k];
        for j in 0..k {
            o[j] = g * a[j] + (1.0 - g) * b[j];
        }
    }
    Ok(out)
}

/// Sample one plan and apply it identically to the three views; labels are
/// mixed once with the same ratio.
#[allow(clippy::type_complexity)]
pub fn rmix(
    x: &Tensor<f32>,
    xbar: &Tensor<f32>,
    xhat: &Tensor<f32>,
    y: &Tensor<f32>,
    rng: &mut SeededRng,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>, Tensor<f32>, MixPlan)> {
    if x.shape() != xbar.shape() || x.shape() != xhat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "views disagree: {:?} / {:?} / {:?}",
            x.shape(),
            xbar.shape(),
            xhat.shape()
        )));
    }
    let plan = sample_mix_plan(x.shape()[0], x.shape()[2], x.shape()[3], rng)?;
    let xp = apply_mix_plan(x, &plan)?;
    let xbp = apply_mix_plan(xbar, &plan)?;
    let xhp = apply_mix_plan(xhat, &plan)?;
    let yp = mix_labels(y, &plan)?;
    Ok((xp, xbp, xhp, yp, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::one_hot;

    #[test]
    fn method_choice_is_uniform() {
        let mut rng = SeededRng::new(3);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let plan = sample_mix_plan(4, 8, 8, &mut rng).unwrap();
            counts[MixMethod::ALL.iter().position(|&m| m == plan.method).unwrap()] += 1;
        }
        for &c in &counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn mask_gamma_is_exact_pixel_fraction() {
        let mut rng = SeededRng::new(5);
        let mut seen_cutmix = false;
        let mut seen_fmix = false;
        for _ in 0..200 {
            let plan = sample_mix_plan(2, 16, 16, &mut rng).unwrap();
            if let Some(mask) = &plan.mask {
                let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
                assert_eq!(plan.gamma, ones as f64 / 256.0);
                let k = plan.gamma * 256.0;
                assert_eq!(k, k.round());
                match plan.method {
                    MixMethod::CutMix => seen_cutmix = true,
                    MixMethod::FMix => seen_fmix = true,
                    _ => panic!("mask on non-mask method"),
                }
            }
            if plan.method == MixMethod::ResizeMix {
                let p = plan.patch.unwrap();
                assert_eq!(
                    plan.gamma,
                    1.0 - (p.dst.w * p.dst.h) as f64 / 256.0
                );
            }
        }
        assert!(seen_cutmix && seen_fmix);
    }

    #[test]
    fn batch_of_one_self_mix_is_identity_for_mixup() {
        let mut rng = SeededRng::new(7);
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f32) / 16.0);
        loop {
            let plan = sample_mix_plan(1, 4, 4, &mut rng).unwrap();
            assert_eq!(plan.perm, vec![0]);
            if plan.method == MixMethod::Mixup {
                let out = apply_mix_plan(&x, &plan).unwrap();
                for (&a, &b) in out.data().iter().zip(x.data()) {
                    assert!((a - b).abs() < 1e-6);
                }
                break;
            }
        }
    }

    #[test]
    fn mixup_gamma_one_returns_input() {
        let x = Tensor::from_fn(&[3, 1, 4, 4], |i| (i % 13) as f32 / 13.0);
        let plan = MixPlan::identity(3);
        let out = apply_mix_plan(&x, &plan).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn mixup_half_on_constant_images() {
        let mut x = Tensor::zeros(&[2, 1, 4, 4]);
        x.item_mut(1).fill(1.0);
        let plan = MixPlan {
            method: MixMethod::Mixup,
            gamma: 0.5,
            perm: vec![1, 0],
            mask: None,
            patch: None,
        };
        let out = apply_mix_plan(&x, &plan).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    // Indicator oracle: ones mixed with zeros reproduces the mask, and the
    // pixel mean equals gamma.
    #[test]
    fn fmix_indicator_recovers_mask() {
        let mut rng = SeededRng::new(11);
        let (mask, gamma) = fmix_mask(16, 16, 0.37, 3.0, &mut rng).unwrap();
        let mut x = Tensor::zeros(&[2, 1, 16, 16]);
        x.item_mut(0).fill(1.0);
        let plan = MixPlan {
            method: MixMethod::FMix,
            gamma,
            perm: vec![1, 0],
            mask: Some(mask.clone()),
            patch: None,
        };
        let out = apply_mix_plan(&x, &plan).unwrap();
        assert_eq!(out.item(0), mask.data());
        let mean: f32 = out.item(0).iter().sum::<f32>() / 256.0;
        assert!((mean as f64 - gamma).abs() < 1e-6);
    }

    #[test]
    fn fmix_exact_counts() {
        let mut rng = SeededRng::new(13);
        let (mask, gamma) = fmix_mask(32, 32, 1.0, 3.0, &mut rng).unwrap();
        assert_eq!(gamma, 1.0);
        assert!(mask.data().iter().all(|&v| v == 1.0));
        let (mask, gamma) = fmix_mask(32, 32, 0.5, 3.0, &mut rng).unwrap();
        assert_eq!(mask.data().iter().filter(|&&v| v == 1.0).count(), 512);
        assert_eq!(gamma, 0.5);
    }

    // Low-frequency masks must be blobby: neighboring pixels usually agree.
    #[test]
    fn fmix_masks_are_spatially_coherent() {
        let mut rng = SeededRng::new(17);
        let mut agree = 0u64;
        let mut total = 0u64;
        for _ in 0..100 {
            let (mask, _) = fmix_mask(32, 32, 0.5, 3.0, &mut rng).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let v = mask.data()[y * 32 + x];
                    if x + 1 < 32 {
                        agree += (v == mask.data()[y * 32 + x + 1]) as u64;
                        total += 1;
                    }
                    if y + 1 < 32 {
                        agree += (v == mask.data()[(y + 1) * 32 + x]) as u64;
                        total += 1;
                    }
                }
            }
        }
        let frac = agree as f64 / total as f64;
        assert!(frac >= 0.85, "neighbor agreement {frac}");
    }

    #[test]
    fn label_mix_formula() {
        let y = one_hot::<f32>(&[0, 2], 3).unwrap();
        let plan = MixPlan {
            method: MixMethod::Mixup,
            gamma: 0.7,
            perm: vec![1, 0],
            mask: None,
            patch: None,
        };
        let out = mix_labels(&y, &plan).unwrap();
        let row0 = &out.data()[..3];
        assert!((row0[0] - 0.7).abs() < 1e-6);
        assert_eq!(row0[1], 0.0);
        assert!((row0[2] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn label_mix_gamma_one_and_self_class() {
        let y = one_hot::<f32>(&[1, 1], 3).unwrap();
        let plan = MixPlan {
            method: MixMethod::Mixup,
            gamma: 1.0,
            perm: vec![1, 0],
            mask: None,
            patch: None,
        };
        assert_eq!(mix_labels(&y, &plan).unwrap().data(), y.data());
        // same class mixed with itself stays one-hot at any gamma
        let plan = MixPlan {
            gamma: 0.4,
            ..plan
        };
        let out = mix_labels(&y, &plan).unwrap();
        for i in 0..2 {
            assert!((out.data()[i * 3 + 1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn label_mix_rejects_unnormalized_rows() {
        let y = Tensor::new(vec![1, 2], vec![0.9, 0.3]).unwrap();
        assert!(mix_labels(&y, &MixPlan::identity(1)).is_err());
    }

    #[test]
    fn resizemix_pastes_resized_source() {
        let mut x = Tensor::zeros(&[2, 1, 8, 8]);
        x.item_mut(1).fill(1.0);
        let dst = Rect {
            x0: 2,
            y0: 3,
            w: 4,
            h: 2,
        };
        let plan = MixPlan {
            method: MixMethod::ResizeMix,
            gamma: 1.0 - 8.0 / 64.0,
            perm: vec![1, 0],
            mask: None,
            patch: Some(Patch {
                src_scale: 0.4,
                dst,
            }),
        };
        let out = apply_mix_plan(&x, &plan).unwrap();
        // item 0 gets a patch of the all-ones source
        for y in 0..8 {
            for xp in 0..8 {
                let inside =
                    (dst.y0..dst.y0 + dst.h).contains(&y) && (dst.x0..dst.x0 + dst.w).contains(&xp);
                let v = out.item(0)[y * 8 + xp];
                assert_eq!(v, if inside { 1.0 } else { 0.0 }, "({y},{xp})");
            }
        }
    }

    #[test]
    fn rmix_applies_one_plan_to_all_views() {
        let mut rng = SeededRng::new(23);
        // identical views -> identical outputs
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 7) % 11) as f32 / 11.0);
        let y = one_hot::<f32>(&[0, 1, 2, 0], 3).unwrap();
        let (a, b, c, yp, plan) = rmix(&x, &x.clone(), &x.clone(), &y, &mut rng).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
        // label rows conserve mass
        for i in 0..4 {
            let s: f32 = yp.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let _ = plan;
    }

    // The shared-plan property on indicator views: the selection pattern
    // recovered from each view is the same.
    #[test]
    fn rmix_indicator_masks_identical_across_views() {
        let rng = SeededRng::new(29);
        for trial in 0..40 {
            let mut trng = rng.child(trial);
            let n = 2;
            let mut ones = Tensor::zeros(&[n, 1, 8, 8]);
            ones.item_mut(0).fill(1.0);
            let y = one_hot::<f32>(&[0, 1], 2).unwrap();
            let (a, b, c, yp, plan) = rmix(&ones, &ones.clone(), &ones.clone(), &y, &mut trng).unwrap();
            assert_eq!(a.data(), b.data());
            assert_eq!(a.data(), c.data());
            // gamma recovered from the label row equals plan.gamma
            if plan.perm[0] == 1 {
                let g = yp.data()[0] as f64;
                assert!((g - plan.gamma).abs() < 1e-6, "{g} vs {}", plan.gamma);
            }
        }
    }

    #[test]
    fn apply_rejects_mismatched_shape() {
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        let plan = MixPlan::identity(3);
        assert!(apply_mix_plan(&x, &plan).is_err());
    }
}
