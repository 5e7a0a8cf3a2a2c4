//! Attention parameter regularization.
//!
//! Per batch: a mirror of the current model scores the surrogate loss
//! CE(f(x), y) − β·KL(f(x̃) ‖ f(x)), its attention-weight gradients are
//! normalized into noise ξ with per-layer magnitude η·γ·‖α‖₂, ξ is added to
//! the target's MSA projections for the adversarial update, and subtracted
//! again before the optimizer step.

use crate::error::{CapError, Result};
use crate::objectives::{ce_loss_t, kl_loss_t};
use crate::tensor::{Tape, Tensor};
use crate::vit::{Classifier, VitModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprConfig {
    pub enabled: bool,
    /// Trade-off in the surrogate loss.
    pub beta_sur: f64,
    /// Scaled ratio bounding the noise amplitude.
    pub gamma: f64,
    /// Use the current optimizer learning rate as η; otherwise η = 1.
    pub use_lr_as_eta: bool,
    /// Soft-label mixing coefficient: ŷ = λ·f(x̃) + (1−λ)·y.
    pub lambda_soft: f64,
    /// Normalize gradients per attention layer; the global alternative
    /// pools every layer into one norm.
    pub per_layer_norm: bool,
}

impl Default for AprConfig {
    fn default() -> Self {
        AprConfig {
            enabled: true,
            beta_sur: 6.0,
            gamma: 1e-4,
            use_lr_as_eta: true,
            lambda_soft: 8.0 / 255.0,
            per_layer_norm: true,
        }
    }
}

impl AprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(CapError::InvalidArgument(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda_soft) {
            return Err(CapError::InvalidArgument(format!(
                "lambda_soft {} outside [0,1]",
                self.lambda_soft
            )));
        }
        Ok(())
    }
}

/// Additive per-layer noise aligned with `attention_weight_handles()`.
#[derive(Debug, Clone)]
pub struct AttentionNoise {
    noise: Vec<Vec<f32>>,
    pub eta: f64,
    pub gamma: f64,
    /// ‖α_l‖₂ of each attention weight at computation time.
    pub weight_norms: Vec<f64>,
}

impl AttentionNoise {
    pub fn zero(model: &VitModel<f32>) -> Self {
        let handles = model.attention_weight_handles();
        AttentionNoise {
            noise: handles.iter().map(|h| vec![0.0; h.len()]).collect(),
            eta: 0.0,
            gamma: 0.0,
            weight_norms: handles.iter().map(|h| l2(&h.data())).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.noise.len()
    }

    /// ‖ξ_l‖₂ per layer.
    pub fn noise_norms(&self) -> Vec<f64> {
        self.noise.iter().map(|n| l2(n)).collect()
    }

    pub fn layer(&self, l: usize) -> &[f32] {
        &self.noise[l]
    }

    pub fn max_abs(&self) -> f32 {
        self.noise
            .iter()
            .flat_map(|n| n.iter())
            .fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Surrogate objective on the given tape: CE(f(x), y) − β·KL(f(x̃) ‖ f(x)).
/// `y_onehot` is [batch, classes].
pub fn surrogate_loss<M: Classifier<f32>>(
    tape: &Tape<f32>,
    model: &M,
    x: &Tensor<f32>,
    x_filtered: &Tensor<f32>,
    y_onehot: &Tensor<f32>,
    beta_sur: f64,
) -> Result<Tensor<f32>> {
    let p_clean = tape.softmax(&model.logits(tape, x)?, 1)?;
    let ce = ce_loss_t(tape, &p_clean, y_onehot)?;
    if beta_sur == 0.0 {
        return Ok(ce);
    }
    let p_filtered = tape.softmax(&model.logits(tape, x_filtered)?, 1)?;
    let kl = kl_loss_t(tape, &p_filtered, &p_clean)?;
    tape.sub(&ce, &tape.scale(&kl, beta_sur as f32)?)
}

/// Shape the surrogate's accumulated attention gradients into noise:
/// ξ_l = η · (g_l / ‖g_l‖₂) · γ‖α_l‖₂, with ξ_l = 0 where the gradient
/// vanishes. With `per_layer_norm` off, one pooled gradient norm and one
/// pooled weight norm are used instead.
pub fn compute_noise(
    surrogate: &VitModel<f32>,
    eta: f64,
    gamma: f64,
    per_layer_norm: bool,
) -> Result<AttentionNoise> {
    let handles = surrogate.attention_weight_handles();
    let mut grads: Vec<Vec<f32>> = Vec::with_capacity(handles.len());
    for h in &handles {
        let g = h.grad().unwrap_or_else(|| vec![0.0; h.len()]);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CapError::NonFinite("surrogate attention gradient".into()));
        }
        grads.push(g);
    }
    let weight_norms: Vec<f64> = handles.iter().map(|h| l2(&h.data())).collect();
    let grad_norms: Vec<f64> = grads.iter().map(|g| l2(g)).collect();

    let (pooled_grad, pooled_weight) = if per_layer_norm {
        (0.0, 0.0)
    } else {
        (
            grad_norms.iter().map(|n| n * n).sum::<f64>().sqrt(),
            weight_norms.iter().map(|n| n * n).sum::<f64>().sqrt(),
        )
    };

    let mut noise = Vec::with_capacity(grads.len());
    for (l, g) in grads.into_iter().enumerate() {
        let gn = if per_layer_norm { grad_norms[l] } else { pooled_grad };
        let wn = if per_layer_norm { weight_norms[l] } else { pooled_weight };
        if gn == 0.0 || gamma == 0.0 {
            noise.push(vec![0.0; g.len()]);
        } else {
            let scale = (eta * gamma * wn / gn) as f32;
            noise.push(g.into_iter().map(|v| v * scale).collect());
        }
    }
    Ok(AttentionNoise {
        noise,
        eta,
        gamma,
        weight_norms,
    })
}

fn check_alignment(model: &VitModel<f32>, noise: &AttentionNoise) -> Result<Vec<Tensor<f32>>> {
    let handles = model.attention_weight_handles();
    if handles.len() != noise.noise.len()
        || handles.iter().zip(&noise.noise).any(|(h, n)| h.len() != n.len())
    {
        return Err(CapError::InvalidArgument(format!(
            "attention noise misaligned: {} layers vs {} handles",
            noise.noise.len(),
            handles.len()
        )));
    }
    Ok(handles)
}

/// Add ξ to the model's attention weights.
pub fn inject(model: &VitModel<f32>, noise: &AttentionNoise) -> Result<()> {
    let handles = check_alignment(model, noise)?;
    for (h, n) in handles.iter().zip(&noise.noise) {
        h.update_data(|w| {
            for (wv, &nv) in w.iter_mut().zip(n) {
                *wv += nv;
            }
        });
    }
    Ok(())
}

/// Subtract the same ξ, moving the weights back to center.
pub fn restore(model: &VitModel<f32>, noise: &AttentionNoise) -> Result<()> {
    let handles = check_alignment(model, noise)?;
    for (h, n) in handles.iter().zip(&noise.noise) {
        h.update_data(|w| {
            for (wv, &nv) in w.iter_mut().zip(n) {
                *wv -= nv;
            }
        });
    }
    Ok(())
}

/// ŷ = λ·f(x̃) + (1−λ)·onehot(y). `probs_filtered` must already be detached;
/// the result never carries gradient.
pub fn soft_label(probs_filtered: &Tensor<f32>, labels: &[usize], lambda: f64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CapError::InvalidArgument(format!("lambda {lambda} outside [0,1]")));
    }
    let dims = probs_filtered.dims().to_vec();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(CapError::InvalidArgument(format!(
            "soft_label: probs {dims:?} vs {} labels",
            labels.len()
        )));
    }
    let classes = dims[1];
    let lam = lambda as f32;
    let p = probs_filtered.data();
    let mut out = Vec::with_capacity(p.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CapError::InvalidArgument(format!("label {y} out of range")));
        }
        for c in 0..classes {
            let hard = if c == y { 1.0 } else { 0.0 };
            out.push(lam * p[i * classes + c] + (1.0 - lam) * hard);
        }
    }
    Tensor::new(dims, out)
}
