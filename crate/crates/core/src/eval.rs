//! Classification metrics, corruption error aggregates, and gradient
//! saliency maps.
//!
//! Zero-denominator metric cells are reported as NaN and survive into the
//! CSV output as the token `NAN`; they are never silently zeroed.

use crate::attacks::AttackSpec;
use crate::data::{corrupt, CorruptionKind, CorruptionSpec, Sample};
use crate::error::{CapError, Result};
use crate::fmt::fmt6;
use crate::image::GrayImage;
use crate::tensor::Tape;
use crate::trainer::{accuracy_on, adv_accuracy_on};
use crate::vit::{batch_tensor, Classifier, VitModel};
use rand_chacha::ChaCha8Rng;

/// One-vs-rest confusion counts per class.
#[derive(Debug, Clone)]
pub struct ConfusionTally {
    pub classes: usize,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub tn: Vec<usize>,
    pub fn_: Vec<usize>,
    pub total: usize,
}

impl ConfusionTally {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.is_empty() || preds.len() != labels.len() {
            return Err(CapError::InvalidArgument(format!(
                "metrics need equal nonempty inputs, got {} preds / {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut t = ConfusionTally {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            tn: vec![0; classes],
            fn_: vec![0; classes],
            total: preds.len(),
        };
        for (&p, &y) in preds.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(CapError::InvalidArgument(format!(
                    "class index out of range: pred {p}, label {y}"
                )));
            }
            for c in 0..classes {
                match (p == c, y == c) {
                    (true, true) => t.tp[c] += 1,
                    (true, false) => t.fp[c] += 1,
                    (false, true) => t.fn_[c] += 1,
                    (false, false) => t.tn[c] += 1,
                }
            }
        }
        Ok(t)
    }
}

/// Accuracy plus per-class specificity and F1 (NaN where undefined).
#[derive(Debug, Clone)]
pub struct Metrics {
    pub accuracy: f64,
    pub specificity: Vec<f64>,
    pub f1: Vec<f64>,
}

pub fn metrics(preds: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    let t = ConfusionTally::from_predictions(preds, labels, classes)?;
    let correct: usize = t.tp.iter().sum();
    let ratio = |num: usize, den: usize| -> f64 {
        if den == 0 {
            f64::NAN
        } else {
            num as f64 / den as f64
        }
    };
    Ok(Metrics {
        accuracy: correct as f64 / t.total as f64,
        specificity: (0..classes).map(|c| ratio(t.tn[c], t.tn[c] + t.fp[c])).collect(),
        f1: (0..classes)
            .map(|c| ratio(2 * t.tp[c], 2 * t.tp[c] + t.fp[c] + t.fn_[c]))
            .collect(),
    })
}

pub fn metrics_csv(m: &Metrics) -> String {
    let mut out = String::from("class,specificity,f1\n");
    for c in 0..m.specificity.len() {
        out.push_str(&format!("{c},{},{}\n", fmt6(m.specificity[c]), fmt6(m.f1[c])));
    }
    out.push_str(&format!("accuracy,{},\n", fmt6(m.accuracy)));
    out
}

// ── Corruption aggregates ───────────────────────────────────────────────

/// Per-(kind, severity) error rates and their severity means.
#[derive(Debug, Clone)]
pub struct CorruptionReport {
    pub kinds: Vec<CorruptionKind>,
    /// errors_clean[kind][severity-1]: error rate on corrupted inputs.
    pub errors_clean: Vec<[f64; 5]>,
    /// errors_adv[kind][severity-1]: error rate on attacked corrupted inputs.
    pub errors_adv: Vec<[f64; 5]>,
}

impl CorruptionReport {
    /// CCE per kind: severity-mean error on corrupted inputs.
    pub fn cce(&self) -> Vec<f64> {
        self.errors_clean.iter().map(|e| e.iter().sum::<f64>() / 5.0).collect()
    }

    /// ACE per kind: severity-mean error on attacked corrupted inputs.
    pub fn ace(&self) -> Vec<f64> {
        self.errors_adv.iter().map(|e| e.iter().sum::<f64>() / 5.0).collect()
    }

    pub fn mean_cce(&self) -> f64 {
        let c = self.cce();
        c.iter().sum::<f64>() / c.len().max(1) as f64
    }

    pub fn mean_ace(&self) -> f64 {
        let a = self.ace();
        a.iter().sum::<f64>() / a.len().max(1) as f64
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("kind,severity,clean_error,adv_error\n");
        for (k, kind) in self.kinds.iter().enumerate() {
            for s in 0..5 {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    kind.name(),
                    s + 1,
                    fmt6(self.errors_clean[k][s]),
                    fmt6(self.errors_adv[k][s])
                ));
            }
            out.push_str(&format!(
                "{},mean,{},{}\n",
                kind.name(),
                fmt6(self.cce()[k]),
                fmt6(self.ace()[k])
            ));
        }
        out.push_str(&format!("all,mean,{},{}\n", fmt6(self.mean_cce()), fmt6(self.mean_ace())));
        out
    }
}

/// Grade the model over every (kind, severity) cell: error on corrupted
/// inputs, then error on PGD-attacked corrupted inputs.
pub fn corruption_eval(
    model: &VitModel<f32>,
    samples: &[&Sample],
    kinds: &[CorruptionKind],
    attack: &AttackSpec,
    batch_size: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionReport> {
    let classes = model.config().num_classes;
    let mut errors_clean = Vec::with_capacity(kinds.len());
    let mut errors_adv = Vec::with_capacity(kinds.len());
    for (k, &kind) in kinds.iter().enumerate() {
        let mut clean_row = [0.0f64; 5];
        let mut adv_row = [0.0f64; 5];
        for severity in 1..=5u8 {
            let spec = CorruptionSpec { kind, severity };
            let corrupted: Vec<Sample> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    // Per-sample corruption stream keyed on (seed, kind, severity, index).
                    let mix = seed
                        ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15)
                        ^ (severity as u64) << 32
                        ^ (i as u64).wrapping_mul(0x2545f4914f6cdd1d);
                    Ok(Sample {
                        image: corrupt(&s.image, &spec, mix)?,
                        label: s.label,
                        lesion_mask: s.lesion_mask.clone(),
                        lung_mask: s.lung_mask.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = corrupted.iter().collect();
            clean_row[severity as usize - 1] = 1.0 - accuracy_on(model, &refs, batch_size, classes)?;
            adv_row[severity as usize - 1] =
                1.0 - adv_accuracy_on(model, &refs, attack, batch_size, classes, rng)?;
        }
        errors_clean.push(clean_row);
        errors_adv.push(adv_row);
    }
    Ok(CorruptionReport {
        kinds: kinds.to_vec(),
        errors_clean,
        errors_adv,
    })
}

// ── Saliency ────────────────────────────────────────────────────────────

/// Absolute input-gradient of the selected class logit (default: the
/// predicted class), min-max normalized to [0,1].
pub fn saliency<M: Classifier<f32>>(
    model: &M,
    image: &GrayImage,
    class: Option<usize>,
) -> Result<GrayImage> {
    let x = batch_tensor::<f32>(&[image])?;
    let target = match class {
        Some(c) => c,
        None => {
            let tape = Tape::inference();
            let logits = model.logits(&tape, &x)?;
            let row = logits.to_vec();
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        }
    };

    let x_t = x.detach();
    x_t.set_requires_grad(true);
    let tape = Tape::new();
    let logits = model.logits(&tape, &x_t)?;
    let classes = logits.dims()[1];
    if target >= classes {
        return Err(CapError::InvalidArgument(format!(
            "class {target} out of range for {classes} logits"
        )));
    }
    let picked = tape.slice(&logits, 1, target, target + 1)?;
    let scalar = tape.sum(&picked)?;
    tape.backward(&scalar)?;
    let grad = x_t
        .grad()
        .ok_or_else(|| CapError::NonFinite("missing input gradient".into()))?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(CapError::NonFinite("saliency gradient".into()));
    }

    let mag: Vec<f32> = grad.iter().map(|v| v.abs()).collect();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &mag {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let pixels = if range > 0.0 {
        mag.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; mag.len()]
    };
    GrayImage::new(image.height(), image.width(), pixels)
}

/// Fraction of positive samples whose lesion-mask mean saliency exceeds the
/// outside-lung mean saliency.
pub fn saliency_localization(model: &VitModel<f32>, samples: &[&Sample]) -> Result<f64> {
    let mut positives = 0usize;
    let mut hits = 0usize;
    for s in samples {
        if s.label != 1 || !s.lesion_mask.iter().any(|&m| m) {
            continue;
        }
        positives += 1;
        let map = saliency(model, &s.image, None)?;
        let mean_of = |mask: &dyn Fn(usize) -> bool| -> f64 {
            let (mut sum, mut cnt) = (0.0f64, 0usize);
            for (i, &v) in map.pixels().iter().enumerate() {
                if mask(i) {
                    sum += v as f64;
                    cnt += 1;
                }
            }
            if cnt == 0 {
                0.0
            } else {
                sum / cnt as f64
            }
        };
        let lesion_mean = mean_of(&|i| s.lesion_mask[i]);
        let outside_lung_mean = mean_of(&|i| !s.lung_mask[i]);
        if lesion_mean > outside_lung_mean {
            hits += 1;
        }
    }
    if positives == 0 {
        return Err(CapError::InvalidArgument("no positive samples with lesions".into()));
    }
    Ok(hits as f64 / positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn metrics_all_correct() {
        let m = metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.f1.iter().all(|&f| f == 1.0));
        assert!(m.specificity.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn metrics_nan_when_class_absent() {
        // Class 2 never predicted and never present: TP=FP=FN=0 -> F1 NaN.
        let m = metrics(&[0, 1, 0, 1], &[0, 1, 1, 0], 3).unwrap();
        assert!(m.f1[2].is_nan());
        assert_eq!(fmt6(m.f1[2]), "NAN");
        // Specificity of class 2 is well-defined (TN=4, FP=0).
        assert_eq!(m.specificity[2], 1.0);
    }

    #[test]
    fn metrics_hand_tally() {
        // 10 samples, 2 classes.
        let preds = [0, 0, 1, 1, 1, 0, 1, 0, 1, 1];
        let labels = [0, 1, 1, 1, 0, 0, 1, 0, 0, 1];
        // class 1: TP=4 (idx 2,3,6,9), FP=2 (4,8), FN=1 (1), TN=3
        let m = metrics(&preds, &labels, 2).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.f1[1] - 2.0 * 4.0 / (2.0 * 4.0 + 2.0 + 1.0)).abs() < 1e-12);
        assert!((m.specificity[1] - 3.0 / 5.0).abs() < 1e-12);

        // Accuracy equals support-weighted mean of per-class recall.
        let recall1 = 4.0 / 5.0;
        let recall0 = 3.0 / 5.0;
        assert!((m.accuracy - (5.0 * recall0 + 5.0 * recall1) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_reject_empty_or_mismatched() {
        assert!(metrics(&[], &[], 2).is_err());
        assert!(metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn cce_ace_are_severity_means() {
        let report = CorruptionReport {
            kinds: vec![CorruptionKind::GaussianNoise],
            errors_clean: vec![[0.1, 0.2, 0.3, 0.4, 0.5]],
            errors_adv: vec![[0.2, 0.3, 0.4, 0.5, 0.6]],
        };
        assert!((report.cce()[0] - 0.3).abs() < 1e-12);
        assert!((report.ace()[0] - 0.4).abs() < 1e-12);
        assert!((report.mean_cce() - 0.3).abs() < 1e-12);
        assert!((report.mean_ace() - 0.4).abs() < 1e-12);
    }

    /// Classifier with constant logits: saliency must be exactly zero.
    struct Flat;
    impl Classifier<f32> for Flat {
        fn logits(&self, tape: &Tape<f32>, x: &Tensor<f32>) -> crate::Result<Tensor<f32>> {
            let b = x.dims()[0];
            let base = Tensor::new(vec![b, 2], vec![0.3; b * 2])?;
            let zero = tape.scale(&tape.sum(&tape.reshape(x, vec![x.len()])?)?, 0.0)?;
            let z = tape.reshape(&tape.tile(&zero, b * 2)?, vec![b, 2])?;
            tape.add(&base, &z)
        }
    }

    #[test]
    fn saliency_properties() {
        let img = GrayImage::constant(8, 8, 0.4);
        let map = saliency(&Flat, &img, None).unwrap();
        assert!(map.pixels().iter().all(|&v| v == 0.0), "constant model gives a zero map");

        let model = crate::vit::VitModel::<f32>::new(
            crate::vit::VitConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 16,
                num_heads: 2,
                depth: 2,
                mlp_ratio: 2,
                num_classes: 2,
            },
            5,
        )
        .unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = GrayImage::from_fn(8, 8, |_, _| rng.gen_range(0.0..=1.0));
        let a = saliency(&model, &img, None).unwrap();
        let b = saliency(&model, &img, None).unwrap();
        assert_eq!(a.pixels(), b.pixels(), "same input, same map");
        assert_eq!((a.height(), a.width()), (8, 8));
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
