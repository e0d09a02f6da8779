//! White-box attacks (FGSM, PGD with CE / KL-consistency / CW-margin loss)
//! and transfer-based black-box evaluation.
//!
//! Every attack obeys the same exit contract: after each step the iterate is
//! clamped to the L-inf ball around the clean input and then to `[0,1]`, so
//! `max|x_adv - x| <= eps` and `x_adv in [0,1]` always hold. The model is
//! read-only throughout; only forward traces are consumed.

use crate::error::{Error, Result};
use crate::losses::{kl_divergence, soft_cross_entropy};
use crate::model::LayerStack;
use crate::rng::{sample_gaussian, SeededRng};
use crate::robustness::top_k_accuracy;
use crate::tensor::{one_hot, Tensor};

/// Objective driven by the PGD loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Ascend KL(f(x) || f(x_adv)); the training-time generator.
    KlConsistency,
    /// Ascend cross-entropy toward the true label.
    CrossEntropy,
    /// Descend the margin z_true - max_other (kappa = 0).
    CwMargin,
}

/// Perturbation budget and loop knobs shared by all attacks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    /// L-inf budget in image units.
    pub eps: f32,
    /// Step size per iteration.
    pub step: f32,
    pub iters: usize,
    pub loss: AttackLoss,
    pub random_start: bool,
    /// Gaussian init scale (the default start is `x + init_sigma * N(0,I)`).
    pub init_sigma: f32,
    /// Start uniformly in `[-eps, eps]` instead of the Gaussian init.
    pub uniform_init: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec::eval_pgd(20)
    }
}

impl AttackSpec {
    /// Training-time generator settings: eps 0.031, step 0.007, 10 iters.
    pub fn training_default() -> AttackSpec {
        AttackSpec {
            eps: 0.031,
            step: 0.007,
            iters: 10,
            loss: AttackLoss::KlConsistency,
            random_start: true,
            init_sigma: 0.001,
            uniform_init: false,
        }
    }

    /// Evaluation PGD settings: eps 0.031, step 0.003.
    pub fn eval_pgd(iters: usize) -> AttackSpec {
        AttackSpec {
            eps: 0.031,
            step: 0.003,
            iters,
            loss: AttackLoss::CrossEntropy,
            random_start: true,
            init_sigma: 0.001,
            uniform_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "attack eps must be nonnegative, got {}",
                self.eps
            )));
        }
        if self.iters > 0 && !(self.step > 0.0) {
            return Err(Error::Config(format!(
                "attack step must be positive when iters > 0, got {}",
                self.step
            )));
        }
        if self.init_sigma < 0.0 {
            return Err(Error::Config("attack init_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Clamp to the eps ball around `x`, then to `[0,1]`.
fn project(adv: &mut Tensor<f32>, x: &Tensor<f32>, eps: f32) {
    for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.min(o + eps).max(o - eps).min(1.0).max(0.0);
    }
}

fn signed_step(adv: &mut Tensor<f32>, grad: &Tensor<f32>, step: f32) {
    for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
        // sign(0) = 0
        *a += step * if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
    }
}

fn init_start(x: &Tensor<f32>, spec: &AttackSpec, rng: &mut SeededRng) -> Tensor<f32> {
    if !spec.random_start {
        return x.clone();
    }
    if spec.uniform_init {
        let mut adv = x.clone();
        for a in adv.data_mut() {
            *a += rng.uniform_range(-spec.eps as f64, spec.eps as f64) as f32;
        }
        adv
    } else if spec.init_sigma > 0.0 {
        let noise: Tensor<f32> = sample_gaussian(rng, x.shape());
        x.zip_map(&noise, |v, n| v + spec.init_sigma * n).unwrap()
    } else {
        x.clone()
    }
}

/// CW margin upstream: +1 at the true class, -1 at the strongest other
/// class, zero once the margin is already negative (kappa = 0).
fn cw_upstream(logits: &Tensor<f32>, labels: &[u8]) -> Tensor<f32> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut up = Tensor::zeros(logits.shape());
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let t = labels[i] as usize;
        let mut best_other = usize::MAX;
        for j in 0..k {
            if j != t && (best_other == usize::MAX || row[j] > row[best_other]) {
                best_other = j;
            }
        }
        if row[t] - row[best_other] > 0.0 {
            up.data_mut()[i * k + t] = 1.0 / n as f32;
            up.data_mut()[i * k + best_other] = -1.0 / n as f32;
        }
    }
    up
}

/// Training-time adversarial view: PGD ascending the KL consistency loss
/// against the model's own clean prediction. `theta` is frozen.
pub fn pgd_generate(
    stack: &LayerStack<f32>,
    x: &Tensor<f32>,
    spec: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let target_logits = stack.infer(x)?;
    let mut adv = if spec.init_sigma > 0.0 {
        let noise: Tensor<f32> = sample_gaussian(rng, x.shape());
        x.zip_map(&noise, |v, n| v + spec.init_sigma * n)?
    } else {
        x.clone()
    };
    project(&mut adv, x, spec.eps);
    for _ in 0..spec.iters {
        let (logits, trace) = stack.forward_traced(&adv)?;
        let (_, upstream) = kl_divergence(&target_logits, &logits)?;
        let grad = stack.input_grad_traced(&trace, &upstream)?;
        signed_step(&mut adv, &grad, spec.step);
        project(&mut adv, x, spec.eps);
    }
    Ok(adv)
}

/// Single-step signed-gradient attack on the cross-entropy loss.
pub fn fgsm_attack(
    stack: &LayerStack<f32>,
    x: &Tensor<f32>,
    y_onehot: &Tensor<f32>,
    eps: f32,
) -> Result<Tensor<f32>> {
    let (logits, trace) = stack.forward_traced(x)?;
    let (_, upstream) = soft_cross_entropy(&logits, y_onehot)?;
    let grad = stack.input_grad_traced(&trace, &upstream)?;
    let mut adv = x.clone();
    signed_step(&mut adv, &grad, eps);
    Ok(adv.clamp(0.0, 1.0))
}

/// Iterated attack; the objective is chosen by `spec.loss`.
pub fn pgd_attack(
    stack: &LayerStack<f32>,
    x: &Tensor<f32>,
    y_onehot: &Tensor<f32>,
    spec: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let labels: Vec<u8> = crate::tensor::argmax_rows(y_onehot)
        .into_iter()
        .map(|v| v as u8)
        .collect();
    let mut adv = init_start(x, spec, rng);
    project(&mut adv, x, spec.eps);
    let target_logits = match spec.loss {
        AttackLoss::KlConsistency => Some(stack.infer(x)?),
        _ => None,
    };
    for _ in 0..spec.iters {
        let (logits, trace) = stack.forward_traced(&adv)?;
        let upstream = match spec.loss {
            AttackLoss::CrossEntropy => soft_cross_entropy(&logits, y_onehot)?.1,
            AttackLoss::KlConsistency => {
                kl_divergence(target_logits.as_ref().unwrap(), &logits)?.1
            }
            // descend the margin: step against its gradient
            AttackLoss::CwMargin => cw_upstream(&logits, &labels).scale(-1.0),
        };
        let grad = stack.input_grad_traced(&trace, &upstream)?;
        signed_step(&mut adv, &grad, spec.step);
        project(&mut adv, x, spec.eps);
    }
    Ok(adv)
}

/// PGD with the CW margin objective (kappa = 0).
pub fn cw_attack(
    stack: &LayerStack<f32>,
    x: &Tensor<f32>,
    y_onehot: &Tensor<f32>,
    spec: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    let spec = AttackSpec {
        loss: AttackLoss::CwMargin,
        ..*spec
    };
    pgd_attack(stack, x, y_onehot, &spec, rng)
}

/// Transfer attack: adversarial examples built on `source` are scored on
/// `target`. Returns the target's Top1 accuracy on them.
pub fn transfer_attack(
    source: &LayerStack<f32>,
    target: &LayerStack<f32>,
    x: &Tensor<f32>,
    labels: &[u8],
    spec: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<f64> {
    if x.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images for {} labels",
            x.shape()[0],
            labels.len()
        )));
    }
    let classes = source.infer(x)?.shape()[1];
    let y = one_hot::<f32>(labels, classes)?;
    let adv = pgd_attack(source, x, &y, spec, rng)?;
    let logits = target.infer(&adv)?;
    top_k_accuracy(&logits, labels, 1)
}

/// Evaluation-time attack selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Cw,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Cw => "cw",
        }
    }

    pub fn parse(s: &str) -> Result<AttackMethod> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            "cw" => Ok(AttackMethod::Cw),
            other => Err(Error::InvalidArgument(format!(
                "unknown attack method {other:?}; valid: fgsm, pgd, cw"
            ))),
        }
    }
}

/// Batched robust Top1 accuracy of `stack` (or of `target` when given:
/// transfer evaluation) under one attack over a whole image set.
pub fn attack_accuracy(
    stack: &LayerStack<f32>,
    target: Option<&LayerStack<f32>>,
    images: &Tensor<f32>,
    labels: &[u8],
    classes: usize,
    method: AttackMethod,
    spec: &AttackSpec,
    seed: u64,
) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 {
        return Ok(0.0);
    }
    let scorer = target.unwrap_or(stack);
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let chunk = 128;
    let mut hits = 0.0f64;
    let mut i = 0;
    let mut batch_idx = 0u64;
    while i < n {
        let hi = (i + chunk).min(n);
        let count = hi - i;
        let x = Tensor::new(
            vec![count, c, h, w],
            images.data()[i * c * h * w..hi * c * h * w].to_vec(),
        )?;
        let y = one_hot::<f32>(&labels[i..hi], classes)?;
        let mut rng = SeededRng::new(crate::rng::derive_seed(seed, batch_idx));
        let adv = match method {
            AttackMethod::Fgsm => fgsm_attack(stack, &x, &y, spec.eps)?,
            AttackMethod::Pgd => pgd_attack(stack, &x, &y, spec, &mut rng)?,
            AttackMethod::Cw => cw_attack(stack, &x, &y, spec, &mut rng)?,
        };
        let logits = scorer.infer(&adv)?;
        hits += top_k_accuracy(&logits, &labels[i..hi], 1)? * count as f64;
        i = hi;
        batch_idx += 1;
    }
    Ok(hits / n as f64)
}
