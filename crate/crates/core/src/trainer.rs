//! The training loop (three-view objective), the Standard and PGDAT
//! baselines, and the lambda sensitivity sweep.
//!
//! Per batch, in order: the augment-and-mix view and the adversarial view
//! are generated against the *current* parameters, one shared mix plan is
//! applied to all three views plus labels, the composite loss is assembled,
//! and exactly one optimizer step runs. Every random draw comes from a
//! child stream derived from the run seed (see [`streams`]), so a run is
//! reproducible from its config alone, independent of thread count.

use std::time::Instant;

use crate::adversarial::{self, pgd_attack, pgd_generate, AttackLoss, AttackMethod, AttackSpec};
use crate::augment::{augment_and_mix, AugmentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{augrmixat_loss, soft_cross_entropy, LossBreakdown};
use crate::mix::{apply_mix_plan, mix_labels, rmix, MixPlan};
use crate::model::{cosine_lr, Arch, LayerStack, OptimizerState};
use crate::rng::{derive_seed_path, SeededRng};
use crate::robustness::{
    self, corruption_error, occlusion_accuracy, top_k_accuracy, CorruptionKind, OcclusionMode,
    OcclusionSpec,
};
use crate::tensor::{argmax_rows, one_hot, Tensor};

use rayon::prelude::*;

/// Tags of the per-purpose random streams, all derived from the run seed.
/// Replaying a stream means `SeededRng::new(derive_seed_path(seed, path))`.
pub mod streams {
    /// Weight init: `[INIT]`.
    pub const INIT: u64 = 1;
    /// Epoch shuffle: `[SHUFFLE, epoch]`.
    pub const SHUFFLE: u64 = 2;
    /// Per-item augmentation: `[AUGMENT, epoch, batch, slot]`.
    pub const AUGMENT: u64 = 3;
    /// Adversarial generation: `[ATTACK, epoch, batch]`.
    pub const ATTACK: u64 = 4;
    /// Mix-plan sampling: `[MIX, epoch, batch]`.
    pub const MIX: u64 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Augrmixat,
    Standard,
    Pgdat,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Augrmixat => "augrmixat",
            TrainMode::Standard => "standard",
            TrainMode::Pgdat => "pgdat",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "augrmixat" => Ok(TrainMode::Augrmixat),
            "standard" => Ok(TrainMode::Standard),
            "pgdat" => Ok(TrainMode::Pgdat),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; valid: augrmixat, standard, pgdat"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    TinyCnn,
}

/// Full run configuration; this is also the on-disk JSON config schema
/// (unknown keys are rejected, absent keys take these defaults).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub arch: ArchKind,
    pub lambda1: f32,
    pub lambda2: f32,
    pub attack: AttackSpec,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Ablation switch: when false the augment view is the clean batch.
    pub augment_enabled: bool,
    /// Ablation switch: when false no mixed-sample augmentation is applied.
    pub mix_enabled: bool,
    /// Worker threads; 1 is the bit-deterministic verification mode
    /// (results are thread-count independent by construction regardless).
    pub threads: usize,
    /// Periodic checkpoint cadence in epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Augrmixat,
            arch: ArchKind::TinyCnn,
            lambda1: 1.0,
            lambda2: 1.0,
            attack: AttackSpec::training_default(),
            augment: AugmentConfig::default(),
            batch_size: 64,
            epochs: 30,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augment_enabled: true,
            mix_enabled: true,
            threads: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "lambda weights must be nonnegative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.attack.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    pub fn arch_for(&self, input: (usize, usize, usize), classes: usize) -> Result<Arch> {
        match self.arch {
            ArchKind::Mlp => Ok(Arch::mlp(input, 128, classes)),
            ArchKind::TinyCnn => Arch::tiny_cnn(input, classes),
        }
    }
}

/// Per-epoch training bookkeeping (unweighted means over batches).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub js_aug: f64,
    pub js_adv: f64,
    pub total: f64,
    pub train_top1: f64,
    pub wall_ms: u64,
}

/// Loop-order instrumentation points, in the order they must occur
/// within one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainEvent {
    AttackGenerated { epoch: usize, batch: usize },
    RmixApplied { epoch: usize, batch: usize },
    LossComputed { epoch: usize, batch: usize, total: f64 },
    StepApplied { epoch: usize, batch: usize },
}

pub trait TrainObserver: Send {
    fn on_event(&mut self, _event: TrainEvent) {}
    fn on_epoch_end(&mut self, _stack: &LayerStack<f32>, _report: &EpochReport) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoopObserver;
impl TrainObserver for NoopObserver {}

fn stream(seed: u64, path: &[u64]) -> SeededRng {
    SeededRng::new(derive_seed_path(seed, path))
}

/// Augment-and-mix over a batch with one child generator per item.
fn augment_batch(
    x: &Tensor<f32>,
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Result<Tensor<f32>> {
    if !cfg.augment_enabled {
        return Ok(x.clone());
    }
    let n = x.shape()[0];
    let item_len = x.item_len();
    let mut out = Tensor::zeros(x.shape());
    let results: Vec<Result<Vec<f32>>> = (0..n)
        .into_par_iter()
        .map(|slot| {
            let mut rng = stream(
                cfg.seed,
                &[streams::AUGMENT, epoch as u64, batch as u64, slot as u64],
            );
            let img = Tensor::new(x.shape()[1..].to_vec(), x.item(slot).to_vec())?;
            Ok(augment_and_mix(&img, &cfg.augment, &mut rng)?.into_data())
        })
        .collect();
    for (slot, r) in results.into_iter().enumerate() {
        out.data_mut()[slot * item_len..(slot + 1) * item_len].copy_from_slice(&r?);
    }
    Ok(out)
}

struct BatchStats {
    breakdown: LossBreakdown<f32>,
    top1: f64,
}

fn check_finite(total: f32, epoch: usize) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::Numeric(format!("diverged at epoch {epoch}")));
    }
    Ok(())
}

fn run_batch(
    stack: &mut LayerStack<f32>,
    opt: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    x: &Tensor<f32>,
    labels: &[u8],
    classes: usize,
    epoch: usize,
    batch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<BatchStats> {
    let y = one_hot::<f32>(labels, classes)?;
    match cfg.mode {
        TrainMode::Standard => {
            let (logits, trace) = stack.forward_traced(x)?;
            let (ce, grad) = soft_cross_entropy(&logits, &y)?;
            check_finite(ce, epoch)?;
            observer.on_event(TrainEvent::LossComputed { epoch, batch, total: ce as f64 });
            let (grads, _) = stack.backward_traced(&trace, &grad)?;
            opt.step(stack, &grads)?;
            observer.on_event(TrainEvent::StepApplied { epoch, batch });
            let top1 = top_k_accuracy(&logits, labels, 1)?;
            Ok(BatchStats {
                breakdown: LossBreakdown {
                    ce,
                    js_aug: 0.0,
                    js_adv: 0.0,
                    total: ce,
                    grad_clean: grad,
                    grad_aug: Tensor::zeros(&[0]),
                    grad_adv: Tensor::zeros(&[0]),
                },
                top1,
            })
        }
        TrainMode::Pgdat => {
            let mut rng = stream(cfg.seed, &[streams::ATTACK, epoch as u64, batch as u64]);
            let spec = AttackSpec {
                loss: AttackLoss::CrossEntropy,
                ..cfg.attack
            };
            let adv = pgd_attack(stack, x, &y, &spec, &mut rng)?;
            observer.on_event(TrainEvent::AttackGenerated { epoch, batch });
            let (logits, trace) = stack.forward_traced(&adv)?;
            let (ce, grad) = soft_cross_entropy(&logits, &y)?;
            check_finite(ce, epoch)?;
            observer.on_event(TrainEvent::LossComputed { epoch, batch, total: ce as f64 });
            let (grads, _) = stack.backward_traced(&trace, &grad)?;
            opt.step(stack, &grads)?;
            observer.on_event(TrainEvent::StepApplied { epoch, batch });
            let top1 = top_k_accuracy(&logits, labels, 1)?;
            Ok(BatchStats {
                breakdown: LossBreakdown {
                    ce,
                    js_aug: 0.0,
                    js_adv: 0.0,
                    total: ce,
                    grad_clean: grad,
                    grad_aug: Tensor::zeros(&[0]),
                    grad_adv: Tensor::zeros(&[0]),
                },
                top1,
            })
        }
        TrainMode::Augrmixat => {
            // augment-and-mix view
            let xbar = augment_batch(x, cfg, epoch, batch)?;
            // adversarial view against the current parameters
            let mut attack_rng =
                stream(cfg.seed, &[streams::ATTACK, epoch as u64, batch as u64]);
            let spec = AttackSpec {
                loss: AttackLoss::KlConsistency,
                ..cfg.attack
            };
            let xhat = pgd_generate(stack, x, &spec, &mut attack_rng)?;
            observer.on_event(TrainEvent::AttackGenerated { epoch, batch });

            // one shared plan across the three views
            let (xp, xbp, xhp, yp) = if cfg.mix_enabled {
                let mut mix_rng = stream(cfg.seed, &[streams::MIX, epoch as u64, batch as u64]);
                let (a, b, c, yp, _plan) = rmix(x, &xbar, &xhat, &y, &mut mix_rng)?;
                (a, b, c, yp)
            } else {
                let plan = MixPlan::identity(x.shape()[0]);
                (
                    apply_mix_plan(x, &plan)?,
                    apply_mix_plan(&xbar, &plan)?,
                    apply_mix_plan(&xhat, &plan)?,
                    mix_labels(&y, &plan)?,
                )
            };
            observer.on_event(TrainEvent::RmixApplied { epoch, batch });

            let (logits_clean, trace_clean) = stack.forward_traced(&xp)?;
            let (logits_aug, trace_aug) = stack.forward_traced(&xbp)?;
            let (logits_adv, trace_adv) = stack.forward_traced(&xhp)?;
            let bd = augrmixat_loss(
                &logits_clean,
                &logits_aug,
                &logits_adv,
                &yp,
                cfg.lambda1,
                cfg.lambda2,
            )?;
            check_finite(bd.total, epoch)?;
            observer.on_event(TrainEvent::LossComputed { epoch, batch, total: bd.total as f64 });

            // gradients accumulate through all three forward passes;
            // zero-weight branches contribute exactly nothing
            let (mut grads, _) = stack.backward_traced(&trace_clean, &bd.grad_clean)?;
            if cfg.lambda1 > 0.0 {
                let (g, _) = stack.backward_traced(&trace_aug, &bd.grad_aug)?;
                for (a, b) in grads.iter_mut().zip(g) {
                    a.add_assign(&b)?;
                }
            }
            if cfg.lambda2 > 0.0 {
                let (g, _) = stack.backward_traced(&trace_adv, &bd.grad_adv)?;
                for (a, b) in grads.iter_mut().zip(g) {
                    a.add_assign(&b)?;
                }
            }
            opt.step(stack, &grads)?;
            observer.on_event(TrainEvent::StepApplied { epoch, batch });

            let ref_labels: Vec<u8> = argmax_rows(&yp).into_iter().map(|v| v as u8).collect();
            let top1 = top_k_accuracy(&logits_clean, &ref_labels, 1)?;
            Ok(BatchStats { breakdown: bd, top1 })
        }
    }
}

fn run(
    dataset: &Dataset,
    cfg: &TrainConfig,
    stack: &mut LayerStack<f32>,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let classes = dataset.num_classes;
    let mut opt = OptimizerState::new(stack, cfg.momentum, cfg.weight_decay, cfg.lr0);
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0 as f64)?;
        opt.lr = lr as f32;
        let order = stream(cfg.seed, &[streams::SHUFFLE, epoch as u64]).permutation(dataset.len());
        let mut sums = [0.0f64; 5]; // ce, js_aug, js_adv, total, top1
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = dataset.batch(chunk);
            let stats = run_batch(
                stack, &mut opt, cfg, &x, &labels, classes, epoch, batch_idx, observer,
            )
            .map_err(|e| match e {
                // a non-finite forward mid-training is a diverged run
                Error::NonFinite(_) => Error::Numeric(format!("diverged at epoch {epoch}")),
                other => other,
            })?;
            sums[0] += stats.breakdown.ce as f64;
            sums[1] += stats.breakdown.js_aug as f64;
            sums[2] += stats.breakdown.js_adv as f64;
            sums[3] += stats.breakdown.total as f64;
            sums[4] += stats.top1;
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let report = EpochReport {
            epoch,
            lr,
            ce: sums[0] * inv,
            js_aug: sums[1] * inv,
            js_adv: sums[2] * inv,
            total: sums[3] * inv,
            train_top1: sums[4] * inv,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        observer.on_epoch_end(stack, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Train from a fresh seed-initialized stack of `cfg.arch`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(LayerStack<f32>, Vec<EpochReport>)> {
    train_with_observer(dataset, cfg, &mut NoopObserver)
}

pub fn train_with_observer(
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(LayerStack<f32>, Vec<EpochReport>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let arch = cfg.arch_for(dataset.input_shape(), dataset.num_classes)?;
    let mut init_rng = stream(cfg.seed, &[streams::INIT]);
    let mut stack = LayerStack::<f32>::init(&arch, &mut init_rng)?;
    let reports = train_from_stack(dataset, cfg, &mut stack, observer)?;
    Ok((stack, reports))
}

/// Train a caller-supplied stack in place (resume, custom architectures).
pub fn train_from_stack(
    dataset: &Dataset,
    cfg: &TrainConfig,
    stack: &mut LayerStack<f32>,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run(dataset, cfg, stack, observer))
}

/// The per-model metric bundle of the sensitivity sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda1: f32,
    pub lambda2: f32,
    pub clean: f64,
    pub fgsm: f64,
    pub pgd10: f64,
    pub pgd20: f64,
    pub cw20: f64,
    /// Mean corruption accuracy (1 - mCE) over the generated suite.
    pub corr: f64,
    /// Mean of untargeted Top1 and targeted Top2 occlusion accuracy.
    pub occ: f64,
}

/// Clean/robust/corruption/occlusion evaluation used by the sweep and the
/// comparison experiments.
pub fn sweep_eval(stack: &LayerStack<f32>, eval: &Dataset, seed: u64) -> Result<SweepRow> {
    let classes = eval.num_classes;
    let clean = robustness::eval_accuracy(stack, &eval.images, &eval.labels, 1)?;
    let fgsm = adversarial::attack_accuracy(
        stack,
        None,
        &eval.images,
        &eval.labels,
        classes,
        AttackMethod::Fgsm,
        &AttackSpec::eval_pgd(0),
        derive_seed_path(seed, &[10]),
    )?;
    let pgd10 = adversarial::attack_accuracy(
        stack,
        None,
        &eval.images,
        &eval.labels,
        classes,
        AttackMethod::Pgd,
        &AttackSpec::eval_pgd(10),
        derive_seed_path(seed, &[11]),
    )?;
    let pgd20 = adversarial::attack_accuracy(
        stack,
        None,
        &eval.images,
        &eval.labels,
        classes,
        AttackMethod::Pgd,
        &AttackSpec::eval_pgd(20),
        derive_seed_path(seed, &[12]),
    )?;
    let cw20 = adversarial::attack_accuracy(
        stack,
        None,
        &eval.images,
        &eval.labels,
        classes,
        AttackMethod::Cw,
        &AttackSpec::eval_pgd(20),
        derive_seed_path(seed, &[13]),
    )?;
    let mut errors = Vec::new();
    for kind in CorruptionKind::ALL {
        errors.push(corruption_error(
            stack,
            eval,
            kind,
            derive_seed_path(seed, &[14]),
        )?);
    }
    let corr = 1.0 - robustness::mce(&errors);
    let occ_u = occlusion_accuracy(
        stack,
        eval,
        &OcclusionSpec::new(OcclusionMode::Untargeted, 0.4)?,
        derive_seed_path(seed, &[15]),
    )?;
    let occ_t = occlusion_accuracy(
        stack,
        eval,
        &OcclusionSpec::new(OcclusionMode::Targeted, 0.4)?,
        derive_seed_path(seed, &[16]),
    )?;
    Ok(SweepRow {
        lambda1: 0.0,
        lambda2: 0.0,
        clean,
        fgsm,
        pgd10,
        pgd20,
        cw20,
        corr,
        occ: 0.5 * (occ_u + occ_t),
    })
}

/// Train one model per lambda setting (each list varies one axis around the
/// base config) and evaluate the full metric set on the held-out split.
pub fn lambda_sweep(
    train_ds: &Dataset,
    eval_ds: &Dataset,
    base: &TrainConfig,
    lambda1_list: &[f32],
    lambda2_list: &[f32],
) -> Result<Vec<SweepRow>> {
    if lambda1_list.is_empty() && lambda2_list.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let mut pairs: Vec<(f32, f32)> = Vec::new();
    for &l1 in lambda1_list {
        pairs.push((l1, base.lambda2));
    }
    for &l2 in lambda2_list {
        pairs.push((base.lambda1, l2));
    }
    pairs.dedup_by(|a, b| a == b);
    let mut uniq: Vec<(f32, f32)> = Vec::new();
    for p in pairs {
        if !uniq.contains(&p) {
            uniq.push(p);
        }
    }
    let mut rows = Vec::with_capacity(uniq.len());
    for (l1, l2) in uniq {
        let cfg = TrainConfig {
            mode: TrainMode::Augrmixat,
            lambda1: l1,
            lambda2: l2,
            ..base.clone()
        };
        let (stack, _) = train(train_ds, &cfg)?;
        let mut row = sweep_eval(&stack, eval_ds, derive_seed_path(cfg.seed, &[99]))?;
        row.lambda1 = l1;
        row.lambda2 = l2;
        rows.push(row);
    }
    Ok(rows)
}
