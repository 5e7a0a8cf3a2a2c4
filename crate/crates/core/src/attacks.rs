//! White-box input-space adversaries under the l∞ threat model.
//!
//! All four methods and the training-time inner maximization run through one
//! projected sign-ascent engine, so their budget and range contracts are
//! enforced in a single place: after every step the perturbation is clipped
//! to the ε-ball and the iterate to [0,1].

use crate::error::{CapError, Result};
use crate::objectives::{ce_loss_t, inner_loss_t, Metric};
use crate::tensor::{Tape, Tensor};
use crate::vit::Classifier;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Rfgsm,
    Pgd,
    Mim,
}

impl AttackMethod {
    pub fn parse(s: &str) -> Result<AttackMethod> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "rfgsm" | "r-fgsm" => Ok(AttackMethod::Rfgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            "mim" => Ok(AttackMethod::Mim),
            other => Err(CapError::Config(format!(
                "unknown attack method {other:?}, want fgsm|rfgsm|pgd|mim"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Rfgsm => "rfgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mim => "mim",
        }
    }
}

/// Loss maximized by the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackLoss {
    /// Cross-entropy against the provided labels.
    Ce,
    /// KL divergence of the adversarial prediction from the clean one
    /// (labels unused; the clean prediction is held constant).
    KlVsClean,
}

/// Threat-model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub epsilon: f32,
    pub step_size: f32,
    pub steps: usize,
    /// Momentum decay (MIM only).
    pub momentum: f32,
    pub loss: AttackLoss,
    /// Uniform start in [-ε, ε] (PGD evaluation convention).
    pub random_start: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            method: AttackMethod::Pgd,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            momentum: 1.0,
            loss: AttackLoss::Ce,
            random_start: true,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(CapError::InvalidArgument(format!(
                "epsilon {} outside (0, 1]",
                self.epsilon
            )));
        }
        let iterative = !matches!(self.method, AttackMethod::Fgsm | AttackMethod::Rfgsm);
        if iterative && !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(CapError::InvalidArgument(format!(
                "step size {} outside (0, epsilon={}]",
                self.step_size, self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(CapError::InvalidArgument("steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `loss(logits(x0+δ))` with respect to the input, at the
/// current iterate.
fn input_grad<M: Classifier<f32>>(
    model: &M,
    dims: &[usize],
    x_adv: &[f32],
    loss: &impl Fn(&Tape<f32>, &Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<f32>> {
    let x_t = Tensor::new(dims.to_vec(), x_adv.to_vec())?;
    x_t.set_requires_grad(true);
    let tape = Tape::new();
    let logits = model.logits(&tape, &x_t)?;
    let l = loss(&tape, &logits)?;
    tape.backward(&l)?;
    let g = x_t.grad().unwrap_or_else(|| vec![0.0; x_adv.len()]);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(CapError::NonFinite("attack input gradient".into()));
    }
    Ok(g)
}

/// Projected sign-ascent shared by every attack. Returns each iterate
/// (including the start), so contracts can be checked at every step, with
/// the final adversarial batch last.
#[allow(clippy::too_many_arguments)]
pub fn iterative_ascent<M: Classifier<f32>>(
    model: &M,
    x0: &Tensor<f32>,
    init_delta: Vec<f32>,
    epsilon: f32,
    step_size: f32,
    steps: usize,
    momentum: Option<f32>,
    loss: impl Fn(&Tape<f32>, &Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<Vec<f32>>> {
    let dims = x0.dims().to_vec();
    let clean = x0.to_vec();
    let n = clean.len();
    let per_sample = if dims.len() == 3 { dims[1] * dims[2] } else { n };
    let mut delta = init_delta;
    assert_eq!(delta.len(), n);

    let project = |delta: &mut [f32]| {
        for (d, &x) in delta.iter_mut().zip(&clean) {
            *d = d.clamp(-epsilon, epsilon);
            *d = (x + *d).clamp(0.0, 1.0) - x;
        }
    };
    project(&mut delta);

    let iterate = |delta: &[f32]| -> Vec<f32> {
        clean.iter().zip(delta).map(|(&x, &d)| (x + d).clamp(0.0, 1.0)).collect()
    };

    let mut trace = vec![iterate(&delta)];
    let mut grad_acc = vec![0.0f32; n];
    for _ in 0..steps {
        let x_adv = trace.last().unwrap();
        let g = input_grad(model, &dims, x_adv, &loss)?;
        let direction: &[f32] = if let Some(mu) = momentum {
            for (sample, acc) in g.chunks(per_sample).zip(grad_acc.chunks_mut(per_sample)) {
                let l1: f32 = sample.iter().map(|v| v.abs()).sum();
                let scale = if l1 > 0.0 { 1.0 / l1 } else { 0.0 };
                for (a, &gv) in acc.iter_mut().zip(sample) {
                    *a = mu * *a + gv * scale;
                }
            }
            &grad_acc
        } else {
            &g
        };
        for (d, &dir) in delta.iter_mut().zip(direction) {
            *d += step_size * sign(dir);
        }
        project(&mut delta);
        trace.push(iterate(&delta));
    }
    Ok(trace)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CapError::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn clean_probs<M: Classifier<f32>>(model: &M, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::inference();
    let logits = model.logits(&tape, x)?;
    tape.softmax(&logits, 1)
}

/// Run the configured attack. `x` is [batch, H, W] in [0,1]; `classes` sizes
/// the one-hot target for the CE loss. Model weights are left untouched.
pub fn attack<M: Classifier<f32>>(
    model: &M,
    x: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let trace = attack_trace(model, x, labels, classes, spec, rng)?;
    Tensor::new(x.dims().to_vec(), trace.into_iter().last().unwrap())
}

/// Like [`attack`], but returns every iterate for contract inspection.
pub fn attack_trace<M: Classifier<f32>>(
    model: &M,
    x: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f32>>> {
    spec.validate()?;
    let n = x.len();
    let eps = spec.epsilon;

    let y = one_hot(labels, classes)?;
    let p_clean = match spec.loss {
        AttackLoss::KlVsClean => Some(clean_probs(model, x)?.detach()),
        AttackLoss::Ce => None,
    };
    let loss = move |tape: &Tape<f32>, logits: &Tensor<f32>| -> Result<Tensor<f32>> {
        let probs = tape.softmax(logits, 1)?;
        match &p_clean {
            Some(pc) => inner_loss_t(tape, Metric::Kl, &probs, pc),
            None => ce_loss_t(tape, &probs, &y),
        }
    };

    match spec.method {
        AttackMethod::Fgsm => {
            iterative_ascent(model, x, vec![0.0; n], eps, eps, 1, None, loss)
        }
        AttackMethod::Rfgsm => {
            // Random half-step from Gaussian sign noise, then one FGSM
            // half-step from there.
            let init: Vec<f32> = (0..n).map(|_| 0.5 * eps * sign(gaussian(rng))).collect();
            iterative_ascent(model, x, init, eps, 0.5 * eps, 1, None, loss)
        }
        AttackMethod::Pgd => {
            let init = if spec.random_start {
                (0..n).map(|_| rng.gen_range(-eps..=eps)).collect()
            } else {
                vec![0.0; n]
            };
            iterative_ascent(model, x, init, eps, spec.step_size, spec.steps, None, loss)
        }
        AttackMethod::Mim => {
            iterative_ascent(
                model,
                x,
                vec![0.0; n],
                eps,
                spec.step_size,
                spec.steps,
                Some(spec.momentum),
                loss,
            )
        }
    }
}

/// Training-time inner maximization: ascend the divergence of the
/// adversarial prediction from the frozen clean prediction. `start_scale`
/// scales the uniform random start as a fraction of ε (0 disables it).
pub fn inner_max<M: Classifier<f32>>(
    model: &M,
    x: &Tensor<f32>,
    metric: Metric,
    epsilon: f32,
    step_size: f32,
    steps: usize,
    start_scale: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let n = x.len();
    let p_clean = clean_probs(model, x)?.detach();
    let loss = move |tape: &Tape<f32>, logits: &Tensor<f32>| -> Result<Tensor<f32>> {
        let probs = tape.softmax(logits, 1)?;
        inner_loss_t(tape, metric, &probs, &p_clean)
    };
    let init = if start_scale > 0.0 {
        let lim = epsilon * start_scale;
        (0..n).map(|_| rng.gen_range(-lim..=lim)).collect()
    } else {
        vec![0.0; n]
    };
    let trace = iterative_ascent(model, x, init, epsilon, step_size, steps, None, loss)?;
    Tensor::new(x.dims().to_vec(), trace.into_iter().last().unwrap())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use crate::vit::{batch_tensor, VitConfig, VitModel};
    use rand::SeedableRng;

    /// w·x scorer on flattened pixels, one weight row per class.
    struct LinearScorer {
        w: Tensor<f32>, // [HW, C]
    }

    impl Classifier<f32> for LinearScorer {
        fn logits(&self, tape: &Tape<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
            let d = x.dims();
            let flat = tape.reshape(x, vec![d[0], d[1] * d[2]])?;
            tape.matmul(&flat, &self.w)
        }
    }

    fn tiny_model(seed: u64) -> VitModel<f32> {
        VitModel::new(
            VitConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 16,
                num_heads: 2,
                depth: 2,
                mlp_ratio: 2,
                num_classes: 2,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_batch(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<GrayImage> = (0..n)
            .map(|_| GrayImage::from_fn(8, 8, |_, _| rng.gen_range(0.0..=1.0)))
            .collect();
        batch_tensor(&images.iter().collect::<Vec<_>>()).unwrap()
    }

    fn spec(method: AttackMethod) -> AttackSpec {
        AttackSpec {
            method,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 5,
            momentum: 1.0,
            loss: AttackLoss::Ce,
            random_start: false,
        }
    }

    #[test]
    fn fgsm_closed_form_on_linear_model() {
        // CE gradient toward the wrong class points along w_wrong - w_right;
        // with two classes sign(grad) = sign(w_0 - w_1) when labels say 1.
        let hw = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wdata: Vec<f32> = (0..hw * 2).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let model = LinearScorer {
            w: Tensor::new(vec![hw, 2], wdata.clone()).unwrap(),
        };
        let x = Tensor::new(vec![1, 8, 8], vec![0.5f32; hw]).unwrap();
        let eps = 8.0 / 255.0;
        let out = attack(&model, &x, &[1], 2, &spec(AttackMethod::Fgsm), &mut rng).unwrap();
        for (i, (&xo, &xn)) in x.to_vec().iter().zip(out.to_vec().iter()).enumerate() {
            // maximizing CE(y=1) moves along sign(w[:,0]-w[:,1])
            let want = xo + eps * sign(wdata[i * 2] - wdata[i * 2 + 1]);
            assert!((xn - want).abs() < 1e-6, "pixel {i}: {xn} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_input_unchanged() {
        // Constant scorer: zero weights give identically zero input gradient.
        let model = LinearScorer {
            w: Tensor::new(vec![64, 2], vec![0.0; 128]).unwrap(),
        };
        let x = tiny_batch(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = attack(&model, &x, &[0, 1], 2, &spec(AttackMethod::Fgsm), &mut rng).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());

        // R-FGSM still takes its random half-step, but stays inside the
        // ball. Mid-gray input keeps the range clamp out of the picture.
        let mid = Tensor::new(vec![2, 8, 8], vec![0.5f32; 128]).unwrap();
        let out = attack(&model, &mid, &[0, 1], 2, &spec(AttackMethod::Rfgsm), &mut rng).unwrap();
        let eps = 8.0f32 / 255.0;
        for (&xo, &xn) in mid.to_vec().iter().zip(out.to_vec().iter()) {
            let d = (xn - xo).abs();
            assert!(d <= eps + 1e-7);
            assert!((d - 0.5 * eps).abs() < 1e-6, "half-step of magnitude eps/2 expected, got {d}");
        }
    }

    #[test]
    fn pgd_single_step_equals_fgsm() {
        let model = tiny_model(7);
        let x = tiny_batch(3, 5);
        let labels = [0, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fgsm = attack(&model, &x, &labels, 2, &spec(AttackMethod::Fgsm), &mut rng).unwrap();
        let mut pgd1 = spec(AttackMethod::Pgd);
        pgd1.steps = 1;
        pgd1.step_size = pgd1.epsilon;
        let pgd = attack(&model, &x, &labels, 2, &pgd1, &mut rng).unwrap();
        assert_eq!(fgsm.to_vec(), pgd.to_vec());
    }

    #[test]
    fn mim_without_momentum_equals_pgd() {
        let model = tiny_model(9);
        let x = tiny_batch(2, 6);
        let labels = [1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mim = spec(AttackMethod::Mim);
        mim.momentum = 0.0;
        let a = attack(&model, &x, &labels, 2, &mim, &mut rng).unwrap();
        let b = attack(&model, &x, &labels, 2, &spec(AttackMethod::Pgd), &mut rng).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn mim_matches_pgd_on_constant_sign_gradients() {
        // Linear scorer: the CE input-gradient sign never changes, so the
        // momentum direction equals the plain gradient direction every step.
        let hw = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wdata: Vec<f32> = (0..hw * 2).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let model = LinearScorer {
            w: Tensor::new(vec![hw, 2], wdata).unwrap(),
        };
        let x = Tensor::new(vec![1, 8, 8], vec![0.5f32; hw]).unwrap();
        let a = attack(&model, &x, &[0], 2, &spec(AttackMethod::Mim), &mut rng).unwrap();
        let b = attack(&model, &x, &[0], 2, &spec(AttackMethod::Pgd), &mut rng).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn budget_and_range_hold_at_every_step_for_all_methods() {
        let model = tiny_model(13);
        let x = tiny_batch(2, 14);
        let clean = x.to_vec();
        let labels = [0, 1];
        for method in [AttackMethod::Fgsm, AttackMethod::Rfgsm, AttackMethod::Pgd, AttackMethod::Mim] {
            let mut s = spec(method);
            s.random_start = true;
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let trace = attack_trace(&model, &x, &labels, 2, &s, &mut rng).unwrap();
            for (step, iterate) in trace.iter().enumerate() {
                for (&xa, &xc) in iterate.iter().zip(&clean) {
                    assert!((xa - xc).abs() <= s.epsilon + 1e-7, "{method:?} step {step}");
                    assert!((0.0..=1.0).contains(&xa), "{method:?} step {step}");
                }
            }
        }
    }

    #[test]
    fn attacks_do_not_mutate_weights_and_are_seeded() {
        let model = tiny_model(17);
        let x = tiny_batch(2, 18);
        let labels = [0, 1];
        let hash_before = model.weight_hash();
        let mut s = spec(AttackMethod::Pgd);
        s.random_start = true;
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            attack(&model, &x, &labels, 2, &s, &mut rng).unwrap().to_vec()
        };
        let (a, b, c) = (run(5), run(5), run(6));
        assert_eq!(a, b, "same seed, same output");
        assert_ne!(a, c, "different random starts should differ");
        assert_eq!(model.weight_hash(), hash_before);
    }

    #[test]
    fn inner_max_contract_and_ascent() {
        let model = tiny_model(23);
        let x = tiny_batch(2, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = 8.0 / 255.0;
        let adv = inner_max(&model, &x, Metric::Kl, eps, 2.0 / 255.0, 5, 0.0, &mut rng).unwrap();
        for (&xa, &xc) in adv.to_vec().iter().zip(x.to_vec().iter()) {
            assert!((xa - xc).abs() <= eps + 1e-7);
        }
        // KL after ascent is at least the value at delta=0 (which is 0).
        let p0 = model.predict(&x).unwrap().to_vec();
        let p1 = model.predict(&adv).unwrap().to_vec();
        let mut kl = 0.0f64;
        for (pc, pa) in p0.chunks(2).zip(p1.chunks(2)) {
            kl += crate::objectives::kl_loss(
                &pc.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &pa.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            )
            .unwrap();
        }
        assert!(kl >= 0.0);

        // Flat model: divergence stays zero, input unchanged.
        let flat = LinearScorer {
            w: Tensor::new(vec![64, 2], vec![0.0; 128]).unwrap(),
        };
        let adv = inner_max(&flat, &x, Metric::Kl, eps, 2.0 / 255.0, 3, 0.0, &mut rng).unwrap();
        assert_eq!(adv.to_vec(), x.to_vec());
    }

    #[test]
    fn inner_engine_with_ce_equals_pgd_on_predicted_labels() {
        let model = tiny_model(31);
        let x = tiny_batch(2, 32);
        // Pseudo-labels from the clean prediction.
        let probs = model.predict(&x).unwrap().to_vec();
        let labels: Vec<usize> = probs
            .chunks(2)
            .map(|r| if r[1] > r[0] { 1 } else { 0 })
            .collect();

        let y = one_hot(&labels, 2).unwrap();
        let engine = iterative_ascent(
            &model,
            &x,
            vec![0.0; x.len()],
            8.0 / 255.0,
            2.0 / 255.0,
            5,
            None,
            |tape, logits| {
                let p = tape.softmax(logits, 1)?;
                ce_loss_t(tape, &p, &y)
            },
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pgd = attack(&model, &x, &labels, 2, &spec(AttackMethod::Pgd), &mut rng).unwrap();
        assert_eq!(engine.last().unwrap(), &pgd.to_vec());
    }
}
