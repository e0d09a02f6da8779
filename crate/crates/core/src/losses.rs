//! Training losses: soft cross-entropy, KL, Jensen-Shannon, and the
//! composite soft-CE + dual-JS objective, each returning gradients w.r.t.
//! its logit inputs.
//!
//! Probabilities are floored at 1e-12 inside logs so one-hot saturation
//! cannot produce infinities.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax, Element, Tensor};

const PROB_FLOOR: f64 = 1e-12;

/// Loss terms of the composite objective plus per-branch logit gradients.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T: Element> {
    pub ce: T,
    pub js_aug: T,
    pub js_adv: T,
    pub total: T,
    pub grad_clean: Tensor<T>,
    pub grad_aug: Tensor<T>,
    pub grad_adv: Tensor<T>,
}

fn check_rows_normalized<T: Element>(labels: &Tensor<T>) -> Result<()> {
    let k = labels.shape()[1];
    for i in 0..labels.shape()[0] {
        let s: f64 = labels.data()[i * k..(i + 1) * k]
            .iter()
            .map(|v| v.as_f64())
            .sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument(format!(
                "label row {i} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

fn check_same_nk<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Mean over the batch of `-sum_k y_k log softmax(z)_k`.
/// Gradient w.r.t. logits is `(softmax(z) - y) / N`.
pub fn soft_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    soft_labels: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let (n, _) = check_same_nk(logits, soft_labels, "soft_cross_entropy")?;
    check_rows_normalized(soft_labels)?;
    let logp = log_softmax(logits)?;
    let mut loss = 0.0f64;
    for (lp, &y) in logp.data().iter().zip(soft_labels.data()) {
        loss -= y.as_f64() * lp.as_f64();
    }
    loss /= n as f64;
    let p = logp.map(|v| v.exp());
    let inv_n = T::from_f64(1.0 / n as f64);
    let grad = p.zip_map(soft_labels, |pv, yv| (pv - yv) * inv_n)?;
    Ok((T::from_f64(loss), grad))
}

/// Mean over the batch of `KL(softmax(p_logits) || softmax(q_logits))`,
/// with the p branch treated as a constant. Gradient is w.r.t. q logits
/// only: `(q - p) / N`.
pub fn kl_divergence<T: Element>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let (n, _) = check_same_nk(p_logits, q_logits, "kl_divergence")?;
    let lp = log_softmax(p_logits)?;
    let lq = log_softmax(q_logits)?;
    let mut loss = 0.0f64;
    for (&lpv, &lqv) in lp.data().iter().zip(lq.data()) {
        loss += lpv.exp().as_f64() * (lpv.as_f64() - lqv.as_f64());
    }
    loss /= n as f64;
    let inv_n = T::from_f64(1.0 / n as f64);
    let grad = lq
        .map(|v| v.exp())
        .zip_map(&lp.map(|v| v.exp()), |qv, pv| (qv - pv) * inv_n)?;
    Ok((T::from_f64(loss.max(0.0)), grad))
}

/// JS divergence of two probability rows (value only), floored inside logs.
pub fn js_from_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut js = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        let m = 0.5 * (pv + qv);
        let lm = m.max(PROB_FLOOR).ln();
        if pv > 0.0 {
            js += 0.5 * pv * (pv.max(PROB_FLOOR).ln() - lm);
        }
        if qv > 0.0 {
            js += 0.5 * qv * (qv.max(PROB_FLOOR).ln() - lm);
        }
    }
    js.max(0.0)
}

/// Mean over the batch of `JS(softmax(p_logits), softmax(q_logits))` with
/// gradients flowing through both branches (including through the mixture).
///
/// Row gradient w.r.t. p logits: `p ⊙ (g - <g,p>)` with
/// `g_i = 0.5 ln(p_i/m_i)`; symmetric for q.
pub fn js_divergence<T: Element>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let (n, k) = check_same_nk(p_logits, q_logits, "js_divergence")?;
    let p = softmax(p_logits)?;
    let q = softmax(q_logits)?;
    let mut loss = 0.0f64;
    let mut grad_p = Tensor::zeros(p_logits.shape());
    let mut grad_q = Tensor::zeros(q_logits.shape());
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let pr = &p.data()[i * k..(i + 1) * k];
        let qr = &q.data()[i * k..(i + 1) * k];
        let pf: Vec<f64> = pr.iter().map(|v| v.as_f64()).collect();
        let qf: Vec<f64> = qr.iter().map(|v| v.as_f64()).collect();
        loss += js_from_probs(&pf, &qf);
        // dJS/dp_i = 0.5 ln(p_i / m_i); chain through softmax
        let gp: Vec<f64> = pf
            .iter()
            .zip(&qf)
            .map(|(&pv, &qv)| {
                0.5 * (pv.max(PROB_FLOOR).ln() - (0.5 * (pv + qv)).max(PROB_FLOOR).ln())
            })
            .collect();
        let gq: Vec<f64> = pf
            .iter()
            .zip(&qf)
            .map(|(&pv, &qv)| {
                0.5 * (qv.max(PROB_FLOOR).ln() - (0.5 * (pv + qv)).max(PROB_FLOOR).ln())
            })
            .collect();
        let dot_p: f64 = gp.iter().zip(&pf).map(|(a, b)| a * b).sum();
        let dot_q: f64 = gq.iter().zip(&qf).map(|(a, b)| a * b).sum();
        for j in 0..k {
            grad_p.data_mut()[i * k + j] = T::from_f64(pf[j] * (gp[j] - dot_p) * inv_n);
            grad_q.data_mut()[i * k + j] = T::from_f64(qf[j] * (gq[j] - dot_q) * inv_n);
        }
    }
    Ok((
        T::from_f64((loss * inv_n).max(0.0)),
        grad_p,
        grad_q,
    ))
}

/// Composite objective:
/// `CE(clean, y) + l1 * JS(clean, aug) + l2 * JS(clean, adv)`.
///
/// The clean-branch gradient accumulates all three terms. Terms with a
/// zero weight contribute exactly nothing to any gradient.
pub fn augrmixat_loss<T: Element>(
    logits_clean: &Tensor<T>,
    logits_aug: &Tensor<T>,
    logits_adv: &Tensor<T>,
    soft_labels: &Tensor<T>,
    lambda1: T,
    lambda2: T,
) -> Result<LossBreakdown<T>> {
    if lambda1 < T::zero() || lambda2 < T::zero() {
        return Err(Error::InvalidArgument(format!(
            "lambda weights must be nonnegative, got {lambda1}, {lambda2}"
        )));
    }
    check_same_nk(logits_clean, logits_aug, "augrmixat_loss clean/aug")?;
    check_same_nk(logits_clean, logits_adv, "augrmixat_loss clean/adv")?;
    let (ce, ce_grad) = soft_cross_entropy(logits_clean, soft_labels)?;
    let (js_aug, js_aug_p, js_aug_q) = js_divergence(logits_clean, logits_aug)?;
    let (js_adv, js_adv_p, js_adv_q) = js_divergence(logits_clean, logits_adv)?;

    let mut grad_clean = ce_grad;
    let mut grad_aug = Tensor::zeros(logits_aug.shape());
    let mut grad_adv = Tensor::zeros(logits_adv.shape());
    let mut total = ce;
    if lambda1 > T::zero() {
        grad_clean = grad_clean.zip_map(&js_aug_p, |a, b| a + lambda1 * b)?;
        grad_aug = js_aug_q.scale(lambda1);
        total = total + lambda1 * js_aug;
    }
    if lambda2 > T::zero() {
        grad_clean = grad_clean.zip_map(&js_adv_p, |a, b| a + lambda2 * b)?;
        grad_adv = js_adv_q.scale(lambda2);
        total = total + lambda2 * js_adv;
    }
    Ok(LossBreakdown {
        ce,
        js_aug,
        js_adv,
        total,
        grad_clean,
        grad_aug,
        grad_adv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t2(rows: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, vals.len() / rows], vals.to_vec()).unwrap()
    }

    #[test]
    fn ce_uniform_softmax_is_ln2() {
        let (loss, _) = soft_cross_entropy(&t2(1, &[0.0, 0.0]), &t2(1, &[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn ce_huge_correct_logit_vanishes() {
        let (loss, _) =
            soft_cross_entropy(&t2(1, &[100.0, 0.0]), &t2(1, &[1.0, 0.0])).unwrap();
        assert!(loss >= 0.0 && loss < 1e-6);
    }

    // Independent scalar evaluation: y=[0.7,0.3], z=[1,-1].
    // loss = -(0.7 ln s1 + 0.3 ln s2), s = softmax(z).
    #[test]
    fn ce_soft_label_direct_evaluation() {
        let z = [1.0f64, -1.0];
        let lse = (z[0].exp() + z[1].exp()).ln();
        let expect = -(0.7 * (z[0] - lse) + 0.3 * (z[1] - lse));
        let (loss, _) = soft_cross_entropy(&t2(1, &z), &t2(1, &[0.7, 0.3])).unwrap();
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
        // frozen value from the oracle above
        assert_abs_diff_eq!(loss, 0.726928, epsilon = 1e-6);
    }

    #[test]
    fn ce_rejects_unnormalized_labels() {
        assert!(soft_cross_entropy(&t2(1, &[0.0, 0.0]), &t2(1, &[0.9, 0.3])).is_err());
    }

    #[test]
    fn ce_one_hot_equals_negative_log_softmax() {
        let z = t2(2, &[0.3, -1.2, 0.9, 2.0, 0.0, -0.5]);
        let y = t2(2, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let (loss, _) = soft_cross_entropy(&z, &y).unwrap();
        let lp = crate::tensor::log_softmax(&z).unwrap();
        let expect = -(lp.data()[1] + lp.data()[3]) / 2.0;
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_at_equality() {
        let z = t2(2, &[0.5, -0.3, 1.0, 0.2, 0.2, 0.2]);
        let (loss, grad) = kl_divergence(&z, &z).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn kl_one_hot_limit_vs_uniform_is_ln2() {
        let p = t2(1, &[60.0, 0.0]); // softmax ~ [1, 0]
        let q = t2(1, &[0.0, 0.0]);
        let (loss, _) = kl_divergence(&p, &q).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn js_zero_at_equality_with_zero_grads() {
        let z = t2(1, &[0.4, -0.1, 0.7]);
        let (loss, gp, gq) = js_divergence(&z, &z).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gp.data().iter().all(|&g| g.abs() < 1e-15));
        assert!(gq.data().iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn js_disjoint_one_hot_limit_is_ln2() {
        let p = t2(1, &[80.0, 0.0]);
        let q = t2(1, &[0.0, 80.0]);
        let (loss, _, _) = js_divergence(&p, &q).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-9);
    }

    // Direct evaluation of 0.5 KL(p||m) + 0.5 KL(q||m) at p=[.5,.5], q=[1,0].
    #[test]
    fn js_probability_input_value() {
        let v = js_from_probs(&[0.5, 0.5], &[1.0, 0.0]);
        let m = [0.75f64, 0.25f64];
        let expect = 0.5 * (0.5 * (0.5 / m[0]).ln() + 0.5 * (0.5 / m[1]).ln())
            + 0.5 * (1.0 * (1.0 / m[0]).ln());
        assert_abs_diff_eq!(v, expect, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 0.215762, epsilon = 1e-5);
    }

    #[test]
    fn js_symmetric() {
        let p = t2(2, &[0.3, -0.8, 1.4, 0.0, 0.1, -0.2]);
        let q = t2(2, &[-0.5, 0.9, 0.2, 1.1, -0.3, 0.6]);
        let (a, _, _) = js_divergence(&p, &q).unwrap();
        let (b, _, _) = js_divergence(&q, &p).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        assert!(a >= 0.0 && a <= std::f64::consts::LN_2);
    }

    #[test]
    fn composite_reduces_to_ce_when_lambdas_zero() {
        let c = t2(2, &[0.2, -0.1, 0.4, 1.0, 0.3, -0.7]);
        let a = t2(2, &[1.2, 0.1, -0.4, 0.0, 0.3, 0.7]);
        let v = t2(2, &[-0.2, 0.5, 0.9, 0.1, -0.3, 0.2]);
        let y = t2(2, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let bd = augrmixat_loss(&c, &a, &v, &y, 0.0, 0.0).unwrap();
        let (ce, g) = soft_cross_entropy(&c, &y).unwrap();
        assert_eq!(bd.total, ce);
        assert_eq!(bd.grad_clean.data(), g.data());
        assert!(bd.grad_aug.data().iter().all(|&x| x == 0.0));
        assert!(bd.grad_adv.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn composite_js_vanishes_when_logits_equal() {
        let c = t2(1, &[0.2, -0.1, 0.4]);
        let y = t2(1, &[0.0, 1.0, 0.0]);
        let bd = augrmixat_loss(&c, &c, &c, &y, 1.0, 1.0).unwrap();
        assert_eq!(bd.js_aug, 0.0);
        assert_eq!(bd.js_adv, 0.0);
        assert_abs_diff_eq!(bd.total, bd.ce, epsilon = 1e-12);
    }

    // Recomposition: composite total equals the independently computed terms.
    #[test]
    fn composite_recomposes_from_parts() {
        let c = t2(4, &[0.2, -0.1, 0.4, 1.0, 0.3, -0.7, 0.0, 0.9, -1.1, 0.5, 0.5, 0.5]);
        let a = t2(4, &[1.2, 0.1, -0.4, 0.0, 0.3, 0.7, 0.2, -0.2, 0.8, -0.6, 0.1, 1.3]);
        let v = t2(4, &[-0.2, 0.5, 0.9, 0.1, -0.3, 0.2, 1.0, 0.0, -1.0, 0.4, 0.4, -0.4]);
        let y = t2(4, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.5, 0.25, 0.25, 0.0, 0.0, 1.0]);
        let (l1, l2) = (1.0, 1.0);
        let bd = augrmixat_loss(&c, &a, &v, &y, l1, l2).unwrap();
        let (ce, _) = soft_cross_entropy(&c, &y).unwrap();
        let (ja, _, _) = js_divergence(&c, &a).unwrap();
        let (jv, _, _) = js_divergence(&c, &v).unwrap();
        assert_abs_diff_eq!(bd.total, ce + l1 * ja + l2 * jv, epsilon = 1e-12);
        assert_abs_diff_eq!(
            bd.total,
            bd.ce + l1 * bd.js_aug + l2 * bd.js_adv,
            epsilon = 1e-6
        );
    }

    #[test]
    fn composite_rejects_negative_lambda() {
        let z = t2(1, &[0.0, 0.0]);
        let y = t2(1, &[1.0, 0.0]);
        assert!(augrmixat_loss(&z, &z, &z, &y, -1.0, 0.0).is_err());
    }
}
