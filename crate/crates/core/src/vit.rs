//! Tiny pre-norm vision transformer with a class token.
//!
//! The multi-head self-attention projection weights (q, k, v, out of each
//! block) are individually addressable through [`VitModel::attention_weight_handles`];
//! additive parameter noise is injected there and nowhere else. Layer norms,
//! MLPs, embeddings and the head stay untouched.

use crate::error::{CapError, Result};
use crate::image::GrayImage;
use crate::tensor::{Element, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 2,
            num_classes: 2,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CapError::InvalidArgument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(CapError::InvalidArgument(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes < 2 {
            return Err(CapError::InvalidArgument("depth, mlp_ratio >= 1 and classes >= 2".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }
}

/// Anything that turns a [batch, H, W] pixel tensor into logits on a tape.
/// Attacks and saliency differentiate through this surface.
pub trait Classifier<E: Element> {
    fn logits(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>>;
}

pub struct VitModel<E: Element> {
    config: VitConfig,
    params: Vec<(String, Tensor<E>)>,
}

impl<E: Element> Classifier<E> for VitModel<E> {
    fn logits(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.forward(tape, x)
    }
}

const LN_EPS: f64 = 1e-5;

impl<E: Element> VitModel<E> {
    /// Seeded init: truncated normal (σ=0.02, cut at ±2σ) for weights and
    /// embeddings, zeros for biases, ones/zeros for layer-norm gain/shift.
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let p2 = config.patch_size * config.patch_size;
        let mut params: Vec<(String, Tensor<E>)> = Vec::new();

        let push_normal = |params: &mut Vec<(String, Tensor<E>)>, name: String, dims: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| E::from_f64(trunc_normal(rng, 0.02))).collect();
            params.push((name, Tensor::param(dims, data).expect("init dims")));
        };
        let push_const = |params: &mut Vec<(String, Tensor<E>)>, name: String, dims: Vec<usize>, v: f64| {
            let n: usize = dims.iter().product();
            params.push((
                name,
                Tensor::param(dims, vec![E::from_f64(v); n]).expect("init dims"),
            ));
        };

        push_normal(&mut params, "patch_embed.weight".into(), vec![p2, d], &mut rng);
        push_const(&mut params, "patch_embed.bias".into(), vec![d], 0.0);
        push_normal(&mut params, "cls_token".into(), vec![1, d], &mut rng);
        push_normal(&mut params, "pos_embed".into(), vec![config.seq_len(), d], &mut rng);

        for b in 0..config.depth {
            push_const(&mut params, format!("block{b}.ln1.gain"), vec![d], 1.0);
            push_const(&mut params, format!("block{b}.ln1.shift"), vec![d], 0.0);
            for proj in ["q", "k", "v", "out"] {
                push_normal(&mut params, format!("block{b}.attn.{proj}.weight"), vec![d, d], &mut rng);
                push_const(&mut params, format!("block{b}.attn.{proj}.bias"), vec![d], 0.0);
            }
            push_const(&mut params, format!("block{b}.ln2.gain"), vec![d], 1.0);
            push_const(&mut params, format!("block{b}.ln2.shift"), vec![d], 0.0);
            push_normal(&mut params, format!("block{b}.mlp.fc1.weight"), vec![d, d * config.mlp_ratio], &mut rng);
            push_const(&mut params, format!("block{b}.mlp.fc1.bias"), vec![d * config.mlp_ratio], 0.0);
            push_normal(&mut params, format!("block{b}.mlp.fc2.weight"), vec![d * config.mlp_ratio, d], &mut rng);
            push_const(&mut params, format!("block{b}.mlp.fc2.bias"), vec![d], 0.0);
        }

        push_const(&mut params, "ln_final.gain".into(), vec![d], 1.0);
        push_const(&mut params, "ln_final.shift".into(), vec![d], 0.0);
        push_normal(&mut params, "head.weight".into(), vec![d, config.num_classes], &mut rng);
        push_const(&mut params, "head.bias".into(), vec![config.num_classes], 0.0);

        Ok(VitModel { config, params })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<E>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<E>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CapError::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuild a model around externally supplied tensors (checkpoint load).
    pub fn from_params(config: VitConfig, params: Vec<(String, Tensor<E>)>) -> Result<Self> {
        let fresh = VitModel::<E>::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(CapError::Checkpoint(format!(
                "expected {} parameters, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in fresh.params.iter().zip(&params) {
            if wn != gn || wt.dims() != gt.dims() {
                return Err(CapError::Checkpoint(format!(
                    "parameter mismatch: want {wn} {:?}, got {gn} {:?}",
                    wt.dims(),
                    gt.dims()
                )));
            }
            gt.set_requires_grad(true);
        }
        Ok(VitModel { config, params })
    }

    /// The q/k/v/out projection weights of every block, in block order.
    /// Biases, norms, MLPs, embeddings and the head are never included.
    pub fn attention_weight_handles(&self) -> Vec<Tensor<E>> {
        let mut handles = Vec::with_capacity(self.config.depth * 4);
        for b in 0..self.config.depth {
            for proj in ["q", "k", "v", "out"] {
                let name = format!("block{b}.attn.{proj}.weight");
                handles.push(self.param(&name).expect("attention weight").clone());
            }
        }
        handles
    }

    /// Deep copy: forward-identical, gradient- and storage-independent.
    pub fn mirror(&self) -> VitModel<E> {
        VitModel {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.deep_clone()))
                .collect(),
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    /// Toggle gradient tracking of every parameter (attacks freeze weights
    /// so backward work is spent on the input path only).
    pub fn set_trainable(&self, trainable: bool) {
        for (_, t) in &self.params {
            t.set_requires_grad(trainable);
        }
    }

    /// SHA-256 over dims and little-endian parameter bytes.
    pub fn weight_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in &self.params {
            hasher.update(name.as_bytes());
            for d in t.dims() {
                hasher.update((*d as u32).to_le_bytes());
            }
            for v in t.data().iter() {
                hasher.update(v.to_f64().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Logits [batch, classes] for a [batch, H, W] pixel tensor.
    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let cfg = &self.config;
        let dims = x.dims().to_vec();
        if dims.len() != 3 || dims[1] != cfg.image_size || dims[2] != cfg.image_size {
            return Err(CapError::InvalidArgument(format!(
                "input dims {dims:?} do not match expected [batch, {}, {}]",
                cfg.image_size, cfg.image_size
            )));
        }
        let batch = dims[0];
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        let side = cfg.image_size / p;
        let t = cfg.num_patches();
        let s = cfg.seq_len();
        let heads = cfg.num_heads;
        let dh = d / heads;

        // Patchify: [B,H,W] -> [B, side, p, side, p] -> [B, side, side, p, p] -> [B*T, p*p]
        let xp = tape.reshape(x, vec![batch, side, p, side, p])?;
        let xp = tape.transpose(&xp, &[0, 1, 3, 2, 4])?;
        let xp = tape.reshape(&xp, vec![batch * t, p * p])?;

        let tok = tape.matmul(&xp, self.param("patch_embed.weight")?)?;
        let tok = tape.add_bias(&tok, self.param("patch_embed.bias")?)?;
        let tok = tape.reshape(&tok, vec![batch, t, d])?;

        let cls = tape.tile(self.param("cls_token")?, batch)?; // [B,1,D]
        let mut h = tape.concat(&[&cls, &tok], 1)?; // [B,S,D]

        let pos_idx: Vec<usize> = (0..s).collect();
        let pos = tape.embedding_lookup(self.param("pos_embed")?, &pos_idx)?;
        let pos = tape.tile(&pos, batch)?; // [B,S,D]
        h = tape.add(&h, &pos)?;

        let inv_sqrt_dh = E::from_f64(1.0 / (dh as f64).sqrt());
        for b in 0..cfg.depth {
            let pre = |n: &str| format!("block{b}.{n}");

            // Attention sublayer
            let ln = tape.layer_norm(
                &h,
                self.param(&pre("ln1.gain"))?,
                self.param(&pre("ln1.shift"))?,
                LN_EPS,
            )?;
            let flat = tape.reshape(&ln, vec![batch * s, d])?;
            let split_heads = |tape: &Tape<E>, y: &Tensor<E>| -> Result<Tensor<E>> {
                let y = tape.reshape(y, vec![batch, s, heads, dh])?;
                let y = tape.transpose(&y, &[0, 2, 1, 3])?;
                tape.reshape(&y, vec![batch * heads, s, dh])
            };
            let proj = |tape: &Tape<E>, name: &str| -> Result<Tensor<E>> {
                let w = tape.matmul(&flat, self.param(&pre(&format!("attn.{name}.weight")))?)?;
                tape.add_bias(&w, self.param(&pre(&format!("attn.{name}.bias")))?)
            };
            let q = split_heads(tape, &proj(tape, "q")?)?;
            let k = split_heads(tape, &proj(tape, "k")?)?;
            let v = split_heads(tape, &proj(tape, "v")?)?;

            let kt = tape.transpose(&k, &[0, 2, 1])?; // [B*H, Dh, S]
            let scores = tape.scale(&tape.bmm(&q, &kt)?, inv_sqrt_dh)?;
            let attn = tape.softmax(&scores, 2)?;
            let ctx = tape.bmm(&attn, &v)?; // [B*H, S, Dh]
            let ctx = tape.reshape(&ctx, vec![batch, heads, s, dh])?;
            let ctx = tape.transpose(&ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(&ctx, vec![batch * s, d])?;
            let out = tape.matmul(&ctx, self.param(&pre("attn.out.weight"))?)?;
            let out = tape.add_bias(&out, self.param(&pre("attn.out.bias"))?)?;
            let out = tape.reshape(&out, vec![batch, s, d])?;
            h = tape.add(&h, &out)?;

            // MLP sublayer
            let ln = tape.layer_norm(
                &h,
                self.param(&pre("ln2.gain"))?,
                self.param(&pre("ln2.shift"))?,
                LN_EPS,
            )?;
            let flat = tape.reshape(&ln, vec![batch * s, d])?;
            let fc1 = tape.matmul(&flat, self.param(&pre("mlp.fc1.weight"))?)?;
            let fc1 = tape.add_bias(&fc1, self.param(&pre("mlp.fc1.bias"))?)?;
            let act = tape.gelu(&fc1)?;
            let fc2 = tape.matmul(&act, self.param(&pre("mlp.fc2.weight"))?)?;
            let fc2 = tape.add_bias(&fc2, self.param(&pre("mlp.fc2.bias"))?)?;
            let fc2 = tape.reshape(&fc2, vec![batch, s, d])?;
            h = tape.add(&h, &fc2)?;
        }

        let ln = tape.layer_norm(
            &h,
            self.param("ln_final.gain")?,
            self.param("ln_final.shift")?,
            LN_EPS,
        )?;
        // Classifier reads the class token only.
        let cls_out = tape.slice(&ln, 1, 0, 1)?;
        let cls_out = tape.reshape(&cls_out, vec![batch, d])?;
        let logits = tape.matmul(&cls_out, self.param("head.weight")?)?;
        tape.add_bias(&logits, self.param("head.bias")?)
    }

    /// Softmax class probabilities for a pixel batch, no recording.
    pub fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = Tape::inference();
        let logits = self.forward(&tape, x)?;
        tape.softmax(&logits, 1)
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    // Box-Muller, resampled until inside ±2σ.
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Stack images into a [batch, H, W] tensor.
pub fn batch_tensor<E: Element>(images: &[&GrayImage]) -> Result<Tensor<E>> {
    if images.is_empty() {
        return Err(CapError::InvalidArgument("empty image batch".into()));
    }
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(CapError::InvalidArgument("mixed image sizes in batch".into()));
        }
        data.extend(img.pixels().iter().map(|&p| E::from_f64(p as f64)));
    }
    Tensor::new(vec![images.len(), h, w], data)
}
