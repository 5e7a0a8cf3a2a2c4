//! Loss zoo and the hybrid-distance objective.
//!
//! Scalar (slice) forms operate on single probability vectors and back the
//! bound sweeps; tensor forms operate on [batch, classes] probability
//! tensors on a tape (sum over classes, mean over samples) and drive
//! training. Both arrange KL so that `metric(pred, reference)` means
//! divergence from the reference to the prediction: with hard labels the
//! first outer term then reduces to cross-entropy and the (kl, kl) combo to
//! the classic robustness trade-off objective.

use crate::error::{CapError, Result};
use crate::tensor::{Element, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Floor applied before taking logs, mirroring the tape's `log` clamp.
const PROB_FLOOR: f64 = 1e-12;

/// Distance metric selector for either side of the min-max objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Se,
    Kl,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Metric> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(Metric::Se),
            "kl" => Ok(Metric::Kl),
            other => Err(CapError::Config(format!("unknown metric {other:?}, want se|kl"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Se => "se",
            Metric::Kl => "kl",
        }
    }
}

/// Outer (minimization) and inner (maximization) metric pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricCombo {
    pub outer: Metric,
    pub inner: Metric,
}

impl Default for MetricCombo {
    /// Hybrid default: square error outside, KL inside.
    fn default() -> Self {
        MetricCombo {
            outer: Metric::Se,
            inner: Metric::Kl,
        }
    }
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CapError::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Σ_c (p_c − target_c)² for one sample.
pub fn se_loss(p: &[f64], target: &[f64]) -> Result<f64> {
    check_len("se_loss", p, target)?;
    Ok(p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// KL(p ‖ q) = Σ p·log(p/q), with q floored before the log.
pub fn kl_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len("kl_loss", p, q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln())
            }
        })
        .sum())
}

/// −Σ y·log p for one sample.
pub fn ce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    check_len("ce_loss", p, y)?;
    Ok(-y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| yi * pi.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// metric(pred, reference): SE is symmetric; KL is divergence from the
/// reference distribution to the prediction.
fn metric_scalar(metric: Metric, pred: &[f64], reference: &[f64]) -> Result<f64> {
    match metric {
        Metric::Se => se_loss(pred, reference),
        Metric::Kl => kl_loss(reference, pred),
    }
}

/// Outer objective for one sample: metric(p_clean, ŷ) + β·metric(p_adv, p_clean).
pub fn cap_outer_loss(
    p_clean: &[f64],
    p_adv: &[f64],
    y_soft: &[f64],
    beta: f64,
    outer: Metric,
) -> Result<f64> {
    if beta < 0.0 {
        return Err(CapError::InvalidArgument(format!("beta {beta} must be >= 0")));
    }
    check_len("cap_outer_loss", p_clean, p_adv)?;
    Ok(metric_scalar(outer, p_clean, y_soft)? + beta * metric_scalar(outer, p_adv, p_clean)?)
}

// ── Tensor (tape) forms, batch [B, C] ───────────────────────────────────

fn check_batch<E: Element>(op: &'static str, p: &Tensor<E>, q: &Tensor<E>) -> Result<usize> {
    if p.dims().len() != 2 || p.dims() != q.dims() {
        return Err(CapError::Shape {
            op,
            lhs: p.dims().to_vec(),
            rhs: q.dims().to_vec(),
        });
    }
    Ok(p.dims()[0])
}

/// Mean over samples of Σ_c (p − target)².
pub fn se_loss_t<E: Element>(tape: &Tape<E>, p: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    let batch = check_batch("se_loss", p, target)?;
    let d = tape.sub(p, target)?;
    tape.scale(&tape.sum(&tape.square(&d)?)?, E::from_f64(1.0 / batch as f64))
}

/// Mean over samples of KL(p ‖ q).
pub fn kl_loss_t<E: Element>(tape: &Tape<E>, p: &Tensor<E>, q: &Tensor<E>) -> Result<Tensor<E>> {
    let batch = check_batch("kl_loss", p, q)?;
    let diff = tape.sub(&tape.log(p)?, &tape.log(q)?)?;
    let terms = tape.mul(p, &diff)?;
    tape.scale(&tape.sum(&terms)?, E::from_f64(1.0 / batch as f64))
}

/// Mean over samples of −Σ y·log p.
pub fn ce_loss_t<E: Element>(tape: &Tape<E>, p: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    let batch = check_batch("ce_loss", p, y)?;
    let terms = tape.mul(y, &tape.log(p)?)?;
    tape.scale(&tape.sum(&terms)?, E::from_f64(-1.0 / batch as f64))
}

fn metric_t<E: Element>(
    tape: &Tape<E>,
    metric: Metric,
    pred: &Tensor<E>,
    reference: &Tensor<E>,
) -> Result<Tensor<E>> {
    match metric {
        Metric::Se => se_loss_t(tape, pred, reference),
        Metric::Kl => kl_loss_t(tape, reference, pred),
    }
}

/// Batch outer objective on the tape.
///
/// `adv_vs_label` switches the second term to metric(p_adv, ŷ) — an
/// alternate reading of the robustness term, off by default.
pub fn cap_outer_loss_t<E: Element>(
    tape: &Tape<E>,
    p_clean: &Tensor<E>,
    p_adv: &Tensor<E>,
    y_soft: &Tensor<E>,
    beta: f64,
    outer: Metric,
    adv_vs_label: bool,
) -> Result<Tensor<E>> {
    if beta < 0.0 {
        return Err(CapError::InvalidArgument(format!("beta {beta} must be >= 0")));
    }
    check_batch("cap_outer_loss", p_clean, p_adv)?;
    let natural = metric_t(tape, outer, p_clean, y_soft)?;
    let robust = if adv_vs_label {
        metric_t(tape, outer, p_adv, y_soft)?
    } else {
        metric_t(tape, outer, p_adv, p_clean)?
    };
    tape.add(&natural, &tape.scale(&robust, E::from_f64(beta))?)
}

/// Inner (maximization) objective value for attack generation:
/// divergence of the adversarial prediction from the (fixed) clean one.
pub fn inner_loss_t<E: Element>(
    tape: &Tape<E>,
    metric: Metric,
    p_adv: &Tensor<E>,
    p_clean_const: &Tensor<E>,
) -> Result<Tensor<E>> {
    metric_t(tape, metric, p_adv, p_clean_const)
}

// ── Bound sweep ─────────────────────────────────────────────────────────

/// Result of a random sweep against the outer-loss envelope [0, 2+2β].
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub samples: usize,
    pub beta: f64,
    pub classes: usize,
    pub min_loss: f64,
    pub max_loss: f64,
    pub bound: f64,
    pub violations: usize,
    pub worst_violation: f64,
    /// Max relative error of the square-error expansion
    /// Σ(p−ψ)² = (1−p_y)² + Σ_{c≠y} p_c² over the sweep.
    pub decomposition_max_rel_err: f64,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.decomposition_max_rel_err < 1e-9
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    // Exponential spacings normalize to a uniform Dirichlet(1,..,1) draw.
    let mut v: Vec<f64> = (0..classes)
        .map(|_| -(rng.gen_range(1e-12..1.0f64)).ln())
        .collect();
    let s: f64 = v.iter().sum();
    for x in &mut v {
        *x /= s;
    }
    v
}

/// Sample random (p_clean, p_adv, ŷ) triples and check the SE outer loss
/// stays inside [0, 2+2β]; also verifies the square-error expansion
/// identity on every clean draw.
pub fn bound_check(n_samples: usize, beta: f64, classes: usize, seed: u64) -> Result<BoundReport> {
    if classes < 2 {
        return Err(CapError::InvalidArgument("need at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 2.0 + 2.0 * beta;
    let mut min_loss = f64::INFINITY;
    let mut max_loss = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut worst_violation = 0.0f64;
    let mut decomp_err = 0.0f64;

    for _ in 0..n_samples {
        let p_clean = random_simplex(&mut rng, classes);
        let p_adv = random_simplex(&mut rng, classes);
        let y_soft = random_simplex(&mut rng, classes);
        let loss = cap_outer_loss(&p_clean, &p_adv, &y_soft, beta, Metric::Se)?;
        min_loss = min_loss.min(loss);
        max_loss = max_loss.max(loss);
        if !(0.0..=bound).contains(&loss) {
            violations += 1;
            worst_violation = worst_violation.max((loss - bound).max(-loss));
        }

        // Expansion of Σ(p−ψ)² around a random true class.
        let label = rng.gen_range(0..classes);
        let onehot: Vec<f64> = (0..classes).map(|c| if c == label { 1.0 } else { 0.0 }).collect();
        let lhs = se_loss(&p_clean, &onehot)?;
        let rhs = (1.0 - p_clean[label]).powi(2)
            + p_clean
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != label)
                .map(|(_, &q)| q * q)
                .sum::<f64>();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
        decomp_err = decomp_err.max(rel);
    }

    Ok(BoundReport {
        samples: n_samples,
        beta,
        classes,
        min_loss,
        max_loss,
        bound,
        violations,
        worst_violation,
        decomposition_max_rel_err: decomp_err,
    })
}

/// The triple that pins the SE outer loss to its ceiling: clean prediction
/// one-hot on the wrong class, adversarial prediction one-hot opposite it.
pub fn worst_case_triple(classes: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert!(classes >= 2);
    let onehot = |i: usize| -> Vec<f64> {
        (0..classes).map(|c| if c == i { 1.0 } else { 0.0 }).collect()
    };
    (onehot(1), onehot(0), onehot(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_loss_examples() {
        assert_eq!(se_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = se_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = se_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "wrong one-hot pair must hit the per-term maximum");
    }

    #[test]
    fn kl_loss_examples() {
        assert_eq!(kl_loss(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let v = kl_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = random_simplex(&mut rng, 4);
            let q = random_simplex(&mut rng, 4);
            assert!(kl_loss(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn ce_loss_examples() {
        let v = ce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(v.abs() <= 1e-10);
        let v = ce_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        // ce(p,y) = kl(y || p) for one-hot y
        let p = [0.3, 0.6, 0.1];
        let y = [0.0, 1.0, 0.0];
        assert!((ce_loss(&p, &y).unwrap() - kl_loss(&y, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn se_symmetric_kl_not() {
        let p = [0.9, 0.1];
        let q = [0.4, 0.6];
        assert_eq!(se_loss(&p, &q).unwrap(), se_loss(&q, &p).unwrap());
        let forward = kl_loss(&p, &q).unwrap();
        let reverse = kl_loss(&q, &p).unwrap();
        assert!((forward - reverse).abs() > 0.1, "KL must be visibly asymmetric here");
    }

    #[test]
    fn cap_outer_zero_and_worst_case() {
        let p = [0.25, 0.75];
        assert_eq!(cap_outer_loss(&p, &p, &p, 6.0, Metric::Se).unwrap(), 0.0);

        for beta in [0.0, 1.0, 6.0] {
            let (p_clean, p_adv, y) = worst_case_triple(2);
            let v = cap_outer_loss(&p_clean, &p_adv, &y, beta, Metric::Se).unwrap();
            assert!((v - (2.0 + 2.0 * beta)).abs() < 1e-9, "beta={beta} gave {v}");
        }
    }

    #[test]
    fn bound_sweep_small() {
        let report = bound_check(10_000, 6.0, 2, 42).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_loss <= 14.0);
        assert!(report.min_loss >= 0.0);

        let report = bound_check(5_000, 0.0, 3, 7).unwrap();
        assert!(report.passed());
        assert!(report.max_loss <= 2.0);
    }

    #[test]
    fn trades_reduction_under_kl_combo_with_hard_labels() {
        // metric(p_clean, y) + β·metric(p_adv, p_clean) with KL and one-hot y
        // equals CE(p_clean, y) + β·KL(p_clean || p_adv).
        let p_clean = [0.7, 0.3];
        let p_adv = [0.55, 0.45];
        let y = [1.0, 0.0];
        let beta = 6.0;
        let combo = cap_outer_loss(&p_clean, &p_adv, &y, beta, Metric::Kl).unwrap();
        let trades = ce_loss(&p_clean, &y).unwrap() + beta * kl_loss(&p_clean, &p_adv).unwrap();
        assert!((combo - trades).abs() < 1e-12);
    }

    #[test]
    fn tensor_losses_match_slice_losses() {
        use crate::tensor::Tape;
        let p = vec![0.6f64, 0.4, 0.2, 0.8];
        let q = vec![0.5f64, 0.5, 0.3, 0.7];
        let tp = Tensor::new(vec![2, 2], p.clone()).unwrap();
        let tq = Tensor::new(vec![2, 2], q.clone()).unwrap();
        let tape = Tape::inference();

        let se = se_loss_t(&tape, &tp, &tq).unwrap().item();
        let want = (se_loss(&p[..2], &q[..2]).unwrap() + se_loss(&p[2..], &q[2..]).unwrap()) / 2.0;
        assert!((se - want).abs() < 1e-12);

        let kl = kl_loss_t(&tape, &tp, &tq).unwrap().item();
        let want = (kl_loss(&p[..2], &q[..2]).unwrap() + kl_loss(&p[2..], &q[2..]).unwrap()) / 2.0;
        assert!((kl - want).abs() < 1e-12);

        let y = vec![1.0f64, 0.0, 0.0, 1.0];
        let ty = Tensor::new(vec![2, 2], y.clone()).unwrap();
        let ce = ce_loss_t(&tape, &tp, &ty).unwrap().item();
        let want = (ce_loss(&p[..2], &y[..2]).unwrap() + ce_loss(&p[2..], &y[2..]).unwrap()) / 2.0;
        assert!((ce - want).abs() < 1e-12);

        let padv = vec![0.45f64, 0.55, 0.25, 0.75];
        let tpadv = Tensor::new(vec![2, 2], padv.clone()).unwrap();
        for outer in [Metric::Se, Metric::Kl] {
            let combo = cap_outer_loss_t(&tape, &tp, &tpadv, &ty, 6.0, outer, false)
                .unwrap()
                .item();
            let want = (cap_outer_loss(&p[..2], &padv[..2], &y[..2], 6.0, outer).unwrap()
                + cap_outer_loss(&p[2..], &padv[2..], &y[2..], 6.0, outer).unwrap())
                / 2.0;
            assert!((combo - want).abs() < 1e-12, "outer {outer:?}");
        }
    }

    #[test]
    fn per_sample_se_range_prop() {
        use proptest::prelude::*;
        proptest!(|(seed in 0u64..5000)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_simplex(&mut rng, 3);
            let q = random_simplex(&mut rng, 3);
            let v = se_loss(&p, &q).unwrap();
            prop_assert!((0.0..=2.0 + 1e-12).contains(&v));
        });
    }
}
