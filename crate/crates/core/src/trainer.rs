//! Training orchestration: vanilla / trades / cap loops, AdamW, the LR
//! schedule, and binary checkpoints.
//!
//! The cap step runs, in order: filter → surrogate backward → noise ξ →
//! inject → inner maximization at the perturbed weights → soft labels →
//! outer backward at the perturbed weights → restore → optimizer update.
//! The trades step is the same loop with filter, noise and soft labels
//! switched off; vanilla drops the adversarial machinery entirely.

use crate::apr::{self, AprConfig, AttentionNoise};
use crate::attacks::{self, AttackSpec};
use crate::data::Sample;
use crate::error::{CapError, Result};
use crate::filter::{self, FilterConfig};
use crate::fmt::fmt6;
use crate::image::GrayImage;
use crate::objectives::{cap_outer_loss_t, ce_loss_t, MetricCombo};
use crate::tensor::{Tape, Tensor};
use crate::vit::{batch_tensor, VitConfig, VitModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Vanilla,
    Trades,
    Cap,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(TrainMode::Vanilla),
            "trades" => Ok(TrainMode::Trades),
            "cap" => Ok(TrainMode::Cap),
            other => Err(CapError::Config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Trades => "trades",
            TrainMode::Cap => "cap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Cosine,
    /// Multiply the learning rate by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
}

/// Inner-maximization parameters for training (the evaluation attack is a
/// full [`AttackSpec`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainAttack {
    pub epsilon: f32,
    pub step_size: f32,
    pub steps: usize,
    /// Uniform random start as a fraction of ε (0 disables).
    pub start_scale: f32,
}

impl Default for TrainAttack {
    fn default() -> Self {
        TrainAttack {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            start_scale: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub mode: TrainMode,
    pub model: VitConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Outer trade-off β.
    pub beta: f64,
    pub combo: MetricCombo,
    /// Alternate robustness term metric(p_adv, ŷ) instead of metric(p_adv, p_clean).
    pub adv_vs_label: bool,
    pub attack_train: TrainAttack,
    pub eval_attack: AttackSpec,
    /// Per-epoch adversarial evaluation subset (0 skips it).
    pub eval_subset: usize,
    pub apr: AprConfig,
    pub filter: FilterConfig,
    pub filter_enabled: bool,
    pub seed: u64,
}

impl Default for TrainPlan {
    /// Desk-scale defaults: 30 epochs, 5-step inner maximization, PGD-10
    /// evaluation.
    fn default() -> Self {
        TrainPlan {
            mode: TrainMode::Cap,
            model: VitConfig::default(),
            epochs: 30,
            batch_size: 64,
            lr: 5e-4,
            schedule: Schedule::Cosine,
            weight_decay: 0.05,
            grad_clip: 1.0,
            beta: 6.0,
            combo: MetricCombo::default(),
            adv_vs_label: false,
            attack_train: TrainAttack {
                steps: 5,
                ..TrainAttack::default()
            },
            eval_attack: AttackSpec::default(),
            eval_subset: 64,
            apr: AprConfig::default(),
            filter: FilterConfig::default(),
            filter_enabled: true,
            seed: 0,
        }
    }
}

impl TrainPlan {
    /// Mode lattice: vanilla keeps attack/apr/filter inert, trades keeps
    /// apr and the filter inert. Returns the effective plan.
    pub fn normalized(mut self) -> Self {
        match self.mode {
            TrainMode::Vanilla => {
                self.apr.enabled = false;
                self.filter_enabled = false;
                self.apr.lambda_soft = 0.0;
            }
            TrainMode::Trades => {
                self.apr.enabled = false;
                self.filter_enabled = false;
                self.apr.lambda_soft = 0.0;
            }
            TrainMode::Cap => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.apr.validate()?;
        self.eval_attack.validate()?;
        if self.batch_size == 0 {
            return Err(CapError::InvalidArgument("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 || self.beta < 0.0 {
            return Err(CapError::InvalidArgument("lr must be > 0 and beta >= 0".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps` under cosine annealing.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(CapError::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(CapError::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    Ok(base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

fn lr_at(plan: &TrainPlan, opt_step: usize, total_steps: usize, epoch: usize) -> Result<f64> {
    match plan.schedule {
        // Steps beyond the plan horizon stay at the annealed floor.
        Schedule::Cosine => cosine_lr(opt_step.min(total_steps.max(1)), total_steps.max(1), plan.lr),
        Schedule::Step { every, factor } => {
            let drops = if every == 0 { 0 } else { epoch / every };
            Ok(plan.lr * factor.powi(drops as i32))
        }
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay. Layer-norm parameters and the class
/// token are excluded from decay.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    decay: Vec<bool>,
}

fn decays(name: &str) -> bool {
    !(name.contains(".ln1.") || name.contains(".ln2.") || name.starts_with("ln_final") || name == "cls_token")
}

impl AdamW {
    pub fn new(model: &VitModel<f32>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            decay: model.params().iter().map(|(n, _)| decays(n)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients accumulated on the model.
    /// Gradients are clipped to `grad_clip` global norm first (0 disables).
    pub fn step(&mut self, model: &VitModel<f32>, lr: f64, grad_clip: f64) -> Result<()> {
        let grads: Vec<Vec<f32>> = model
            .params()
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let mut scale = 1.0f64;
        if grad_clip > 0.0 {
            let total: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum();
            let norm = total.sqrt();
            if norm > grad_clip {
                scale = grad_clip / norm;
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for ((((g, (_, t)), m), v), &decays) in grads
            .iter()
            .zip(model.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(&self.decay)
        {
            let decay = if decays { self.weight_decay } else { 0.0 };
            t.update_data(|w| {
                for i in 0..w.len() {
                    let gi = g[i] * scale as f32;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let mhat = m[i] as f64 / bc1;
                    let vhat = v[i] as f64 / bc2;
                    let upd = mhat / (vhat.sqrt() + self.eps) + decay * w[i] as f64;
                    w[i] -= (lr * upd) as f32;
                }
            });
        }
        Ok(())
    }
}

// ── Step metrics and epoch log ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub loss: f64,
    pub batch: usize,
    pub clean_correct: usize,
    pub adv_correct: usize,
    /// (‖ξ_l‖₂, ‖α_l‖₂) per attention layer, with the η used.
    pub xi_norms: Vec<(f64, f64)>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub adv_acc: f64,
}

pub fn write_epoch_log(path: impl AsRef<Path>, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,clean_acc,adv_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            fmt6(r.lr),
            fmt6(r.train_loss),
            fmt6(r.clean_acc),
            fmt6(r.adv_acc)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── Train loop ──────────────────────────────────────────────────────────

/// One training batch: clean pixels, filtered pixels (equal to clean when
/// the filter is off), labels and their one-hot form.
pub struct Batch {
    pub x: Tensor<f32>,
    pub x_filtered: Tensor<f32>,
    pub labels: Vec<usize>,
    pub y_onehot: Tensor<f32>,
}

impl Batch {
    pub fn gather(
        samples: &[&Sample],
        filtered: Option<&[GrayImage]>,
        idx: &[usize],
        classes: usize,
    ) -> Result<Batch> {
        let images: Vec<&GrayImage> = idx.iter().map(|&i| &samples[i].image).collect();
        let x = batch_tensor::<f32>(&images)?;
        let x_filtered = match filtered {
            Some(f) => {
                let fimg: Vec<&GrayImage> = idx.iter().map(|&i| &f[i]).collect();
                batch_tensor::<f32>(&fimg)?
            }
            None => x.clone(),
        };
        let labels: Vec<usize> = idx.iter().map(|&i| samples[i].label).collect();
        let mut onehot = vec![0.0f32; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(CapError::InvalidArgument(format!("label {y} out of range")));
            }
            onehot[i * classes + y] = 1.0;
        }
        let y_onehot = Tensor::new(vec![labels.len(), classes], onehot)?;
        Ok(Batch {
            x,
            x_filtered,
            labels,
            y_onehot,
        })
    }
}

fn count_correct(probs: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = probs.dims()[1];
    probs
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            pred == y
        })
        .count()
}

/// One vanilla step: CE on clean inputs.
fn train_step_vanilla(
    model: &VitModel<f32>,
    opt: &mut AdamW,
    batch: &Batch,
    lr: f64,
    grad_clip: f64,
) -> Result<StepMetrics> {
    let tape = Tape::new();
    let logits = model.forward(&tape, &batch.x)?;
    let probs = tape.softmax(&logits, 1)?;
    let loss = ce_loss_t(&tape, &probs, &batch.y_onehot)?;
    let loss_val = loss.item() as f64;
    if !loss_val.is_finite() {
        return Err(CapError::NonFinite("vanilla training loss".into()));
    }
    model.zero_grads();
    tape.backward(&loss)?;
    let clean_correct = count_correct(&probs, &batch.labels);
    opt.step(model, lr, grad_clip)?;
    Ok(StepMetrics {
        loss: loss_val,
        batch: batch.labels.len(),
        clean_correct,
        adv_correct: clean_correct,
        xi_norms: Vec::new(),
        eta: 0.0,
    })
}

/// One adversarial step (trades and cap share this path; trades runs it
/// with the filter, noise and soft labels inert).
#[allow(clippy::too_many_arguments)]
pub fn train_step_cap(
    model: &VitModel<f32>,
    opt: &mut AdamW,
    batch: &Batch,
    plan: &TrainPlan,
    lr: f64,
    attack_rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    // (1)-(2) surrogate pass -> noise; the filtered prediction feeds ŷ.
    let eta = if plan.apr.use_lr_as_eta { lr } else { 1.0 };
    let (xi, p_filtered) = if plan.apr.enabled {
        let surrogate = model.mirror();
        let tape = Tape::new();
        let p_clean = tape.softmax(&surrogate.forward(&tape, &batch.x)?, 1)?;
        let p_filt = tape.softmax(&surrogate.forward(&tape, &batch.x_filtered)?, 1)?;
        let ce = ce_loss_t(&tape, &p_clean, &batch.y_onehot)?;
        let kl = crate::objectives::kl_loss_t(&tape, &p_filt, &p_clean)?;
        let l_sur = tape.sub(&ce, &tape.scale(&kl, plan.apr.beta_sur as f32)?)?;
        tape.backward(&l_sur)?;
        let xi = apr::compute_noise(&surrogate, eta, plan.apr.gamma, plan.apr.per_layer_norm)?;
        (xi, Some(p_filt.detach()))
    } else if plan.filter_enabled && plan.apr.lambda_soft > 0.0 {
        (AttentionNoise::zero(model), Some(model.predict(&batch.x_filtered)?.detach()))
    } else {
        (AttentionNoise::zero(model), None)
    };

    // (5) soft labels from the filtered prediction, before ξ lands.
    let y_soft = match (&p_filtered, plan.apr.lambda_soft > 0.0) {
        (Some(p), true) => apr::soft_label(p, &batch.labels, plan.apr.lambda_soft)?,
        _ => batch.y_onehot.clone(),
    };

    // (3) push the weights off-center.
    apr::inject(model, &xi)?;

    // (4) inner maximization at θ+ξ.
    let x_adv = attacks::inner_max(
        model,
        &batch.x,
        plan.combo.inner,
        plan.attack_train.epsilon,
        plan.attack_train.step_size,
        plan.attack_train.steps,
        plan.attack_train.start_scale,
        attack_rng,
    )?;

    // (6) outer objective at θ+ξ.
    let tape = Tape::new();
    let p_clean = tape.softmax(&model.forward(&tape, &batch.x)?, 1)?;
    let p_adv = tape.softmax(&model.forward(&tape, &x_adv)?, 1)?;
    let loss = cap_outer_loss_t(
        &tape,
        &p_clean,
        &p_adv,
        &y_soft,
        plan.beta,
        plan.combo.outer,
        plan.adv_vs_label,
    )?;
    let loss_val = loss.item() as f64;
    if !loss_val.is_finite() {
        apr::restore(model, &xi)?;
        return Err(CapError::NonFinite(format!(
            "outer loss (batch of {}, combo {}/{})",
            batch.labels.len(),
            plan.combo.outer.name(),
            plan.combo.inner.name()
        )));
    }
    model.zero_grads();
    tape.backward(&loss)?;

    // (7) move the weights back to center, (8) descend.
    apr::restore(model, &xi)?;
    let xi_norms = xi
        .noise_norms()
        .into_iter()
        .zip(xi.weight_norms.iter().copied())
        .collect();
    let clean_correct = count_correct(&p_clean, &batch.labels);
    let adv_correct = count_correct(&p_adv, &batch.labels);
    opt.step(model, lr, plan.grad_clip)?;
    Ok(StepMetrics {
        loss: loss_val,
        batch: batch.labels.len(),
        clean_correct,
        adv_correct,
        xi_norms,
        eta,
    })
}

/// Shared state for a full run: model, optimizer, RNG streams.
pub struct Trainer {
    pub model: VitModel<f32>,
    pub opt: AdamW,
    plan: TrainPlan,
    shuffle_rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    epoch: usize,
    opt_steps_done: usize,
}

impl Trainer {
    pub fn new(plan: TrainPlan) -> Result<Self> {
        let plan = plan.normalized();
        plan.validate()?;
        let model = VitModel::new(plan.model, plan.seed)?;
        let opt = AdamW::new(&model, plan.weight_decay);
        let mk = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(plan.seed);
            r.set_stream(stream);
            r
        };
        Ok(Trainer {
            model,
            opt,
            shuffle_rng: mk(1),
            attack_rng: mk(2),
            eval_rng: mk(3),
            plan,
            epoch: 0,
            opt_steps_done: 0,
        })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Filter the whole training set once; the transform is deterministic,
    /// so per-step filtering would recompute identical images.
    fn prefilter(&self, train: &[&Sample]) -> Result<Option<Vec<GrayImage>>> {
        if !self.plan.filter_enabled {
            return Ok(None);
        }
        train
            .iter()
            .map(|s| filter::self_guided_filter(&s.image, &self.plan.filter))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Run the remaining epochs of the plan (resume-aware), returning one
    /// log row per epoch. Evaluation rows use the held-out set: full clean
    /// accuracy plus adversarial accuracy on a seeded subset.
    pub fn train(&mut self, train: &[&Sample], test: &[&Sample]) -> Result<Vec<EpochRow>> {
        let remaining = self.plan.epochs.saturating_sub(self.epoch);
        self.train_epochs(train, test, remaining, &mut |_, _, _| {})
    }

    /// Run up to `epochs` further epochs (never past the plan horizon, which
    /// anchors the cosine schedule), invoking the observer after every
    /// optimizer step with (global step index, step metrics, model).
    pub fn train_epochs(
        &mut self,
        train: &[&Sample],
        test: &[&Sample],
        epochs: usize,
        observer: &mut dyn FnMut(usize, &StepMetrics, &VitModel<f32>),
    ) -> Result<Vec<EpochRow>> {
        if train.is_empty() {
            return Err(CapError::InvalidArgument("empty training set".into()));
        }
        crate::parallel::init();
        let filtered = self.prefilter(train)?;
        let classes = self.plan.model.num_classes;
        let steps_per_epoch = train.len().div_ceil(self.plan.batch_size);
        let total_steps = steps_per_epoch * self.plan.epochs;
        let run = epochs.min(self.plan.epochs.saturating_sub(self.epoch));
        let mut rows = Vec::with_capacity(run);

        for _ in 0..run {
            let mut order: Vec<usize> = (0..train.len()).collect();
            for i in (1..order.len()).rev() {
                let j = self.shuffle_rng.gen_range(0..=i);
                order.swap(i, j);
            }

            let mut loss_sum = 0.0f64;
            let mut seen = 0usize;
            let mut lr_last = self.plan.lr;
            for chunk in order.chunks(self.plan.batch_size) {
                let lr = lr_at(&self.plan, self.opt_steps_done, total_steps, self.epoch)?;
                lr_last = lr;
                let batch = Batch::gather(train, filtered.as_deref(), chunk, classes)?;
                let metrics = match self.plan.mode {
                    TrainMode::Vanilla => train_step_vanilla(
                        &self.model,
                        &mut self.opt,
                        &batch,
                        lr,
                        self.plan.grad_clip,
                    )?,
                    TrainMode::Trades | TrainMode::Cap => train_step_cap(
                        &self.model,
                        &mut self.opt,
                        &batch,
                        &self.plan,
                        lr,
                        &mut self.attack_rng,
                    )?,
                };
                loss_sum += metrics.loss * metrics.batch as f64;
                seen += metrics.batch;
                observer(self.opt_steps_done, &metrics, &self.model);
                self.opt_steps_done += 1;
            }
            self.epoch += 1;

            let (clean_acc, adv_acc) = self.evaluate_epoch(test)?;
            rows.push(EpochRow {
                epoch: self.epoch,
                lr: lr_last,
                train_loss: loss_sum / seen.max(1) as f64,
                clean_acc,
                adv_acc,
            });
        }
        Ok(rows)
    }

    fn evaluate_epoch(&mut self, test: &[&Sample]) -> Result<(f64, f64)> {
        if test.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let classes = self.plan.model.num_classes;
        let clean = accuracy_on(&self.model, test, self.plan.batch_size, classes)?;
        if self.plan.eval_subset == 0 {
            return Ok((clean, f64::NAN));
        }
        let subset: Vec<&Sample> = test.iter().take(self.plan.eval_subset).copied().collect();
        let adv = adv_accuracy_on(
            &self.model,
            &subset,
            &self.plan.eval_attack,
            self.plan.batch_size,
            classes,
            &mut self.eval_rng,
        )?;
        Ok((clean, adv))
    }
}

/// Clean accuracy over a sample set.
pub fn accuracy_on(
    model: &VitModel<f32>,
    samples: &[&Sample],
    batch_size: usize,
    _classes: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let x = batch_tensor::<f32>(&images)?;
        let probs = model.predict(&x)?;
        correct += count_correct(&probs, &labels);
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Robust accuracy under the given attack.
pub fn adv_accuracy_on(
    model: &VitModel<f32>,
    samples: &[&Sample],
    spec: &AttackSpec,
    batch_size: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    model.set_trainable(false);
    let result = (|| {
        let mut correct = 0usize;
        for chunk in samples.chunks(batch_size.max(1)) {
            let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            let x = batch_tensor::<f32>(&images)?;
            let x_adv = attacks::attack(model, &x, &labels, classes, spec, rng)?;
            let probs = model.predict(&x_adv)?;
            correct += count_correct(&probs, &labels);
        }
        Ok(correct as f64 / samples.len().max(1) as f64)
    })();
    model.set_trainable(true);
    result
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"CAPT";
const VERSION: u32 = 1;

/// Serialized training state: weights, optimizer moments, RNG streams and
/// the epoch counter. Loading restores a forward-bit-identical model.
pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = trainer.model.config();
    for v in [
        cfg.image_size,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.num_heads,
        cfg.depth,
        cfg.mlp_ratio,
        cfg.num_classes,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(trainer.epoch as u32).to_le_bytes());

    // Named tensor records.
    buf.extend_from_slice(&(trainer.model.params().len() as u32).to_le_bytes());
    for (name, t) in trainer.model.params() {
        write_tensor_record(&mut buf, name, t.dims(), &t.data());
    }

    // Optimizer state: step count then m/v aligned with the weight order.
    buf.extend_from_slice(&trainer.opt.step_count.to_le_bytes());
    for vecs in [&trainer.opt.m, &trainer.opt.v] {
        for v in vecs.iter() {
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    // RNG streams and progress.
    for rng in [&trainer.shuffle_rng, &trainer.attack_rng, &trainer.eval_rng] {
        buf.extend_from_slice(&rng.get_seed());
        buf.extend_from_slice(&rng.get_stream().to_le_bytes());
        buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    }
    buf.extend_from_slice(&(trainer.opt_steps_done as u64).to_le_bytes());

    std::fs::write(path, buf)?;
    Ok(())
}

fn write_tensor_record(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CapError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Restore a [`Trainer`] (model + optimizer + RNG state) from disk. The
/// plan supplies the hyperparameters, which are not stored in the file.
pub fn load_checkpoint(path: impl AsRef<Path>, plan: TrainPlan) -> Result<Trainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(CapError::Checkpoint("bad magic, want CAPT".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CapError::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = VitConfig {
        image_size: r.u32()? as usize,
        patch_size: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        depth: r.u32()? as usize,
        mlp_ratio: r.u32()? as usize,
        num_classes: r.u32()? as usize,
    };
    let epoch = r.u32()? as usize;

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CapError::Checkpoint(format!("bad tensor name: {e}")))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data = r.f32s(n)?;
        params.push((name, Tensor::new(dims, data)?));
    }
    let model = VitModel::from_params(cfg, params)?;

    let mut plan = plan.normalized();
    plan.model = cfg;
    plan.validate()?;
    let mut opt = AdamW::new(&model, plan.weight_decay);
    opt.step_count = r.u64()?;
    for store in [&mut opt.m, &mut opt.v] {
        for slot in store.iter_mut() {
            let n = r.u32()? as usize;
            if n != slot.len() {
                return Err(CapError::Checkpoint("optimizer state shape mismatch".into()));
            }
            *slot = r.f32s(n)?;
        }
    }

    let mut rngs = Vec::with_capacity(3);
    for _ in 0..3 {
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        rngs.push(rng);
    }
    let opt_steps_done = r.u64()? as usize;
    let eval_rng = rngs.pop().unwrap();
    let attack_rng = rngs.pop().unwrap();
    let shuffle_rng = rngs.pop().unwrap();

    Ok(Trainer {
        model,
        opt,
        plan,
        shuffle_rng,
        attack_rng,
        eval_rng,
        epoch,
        opt_steps_done,
    })
}

/// Convenience: load only the model from a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<VitModel<f32>> {
    let trainer = load_checkpoint(path, TrainPlan::default())?;
    Ok(trainer.model)
}

#[cfg(test)]
mod tests;
