//! Synthetic lung phantoms and severity-graded corruptions.
//!
//! Phantoms: a bright body ellipse on a noisy background with two darker
//! lung cavities; positive samples carry 1–4 soft bright blobs strictly
//! inside the cavities. Lesion and lung masks are emitted alongside the
//! pixels so saliency localization can be scored.

use crate::error::{CapError, Result};
use crate::image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub num_samples: usize,
    pub positive_fraction: f64,
    pub lesion_count_range: (usize, usize),
    /// Additive peak brightness of a lesion blob.
    pub lesion_contrast_range: (f64, f64),
    pub background_noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 32,
            num_samples: 1000,
            positive_fraction: 0.5,
            lesion_count_range: (1, 4),
            lesion_contrast_range: (0.25, 0.45),
            background_noise_sigma: 0.03,
            seed: 0,
        }
    }
}

/// One phantom: pixels, binary label, and row-major masks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: GrayImage,
    pub label: usize,
    pub lesion_mask: Vec<bool>,
    pub lung_mask: Vec<bool>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic dataset keyed by (seed, index): sample i is generated on
/// ChaCha stream i, so generation order (or parallel split) cannot change
/// the content.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<Sample>> {
    if spec.image_size < 16 {
        return Err(CapError::InvalidArgument(format!(
            "image size {} too small for a phantom (min 16)",
            spec.image_size
        )));
    }
    if !(0.0..=1.0).contains(&spec.positive_fraction) {
        return Err(CapError::InvalidArgument("positive fraction outside [0,1]".into()));
    }
    if spec.lesion_count_range.0 > spec.lesion_count_range.1 || spec.lesion_count_range.0 == 0 {
        return Err(CapError::InvalidArgument("bad lesion count range".into()));
    }

    // Exact label balance: round(fraction * n) positives, order shuffled.
    let positives = (spec.positive_fraction * spec.num_samples as f64).round() as usize;
    let mut labels: Vec<usize> = (0..spec.num_samples).map(|i| usize::from(i < positives)).collect();
    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    label_rng.set_stream(u64::MAX); // keep the label shuffle off the per-sample streams
    for i in (1..labels.len()).rev() {
        let j = label_rng.gen_range(0..=i);
        labels.swap(i, j);
    }

    (0..spec.num_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            Ok(generate_one(spec, labels[i], &mut rng))
        })
        .collect()
}

fn generate_one(spec: &PhantomSpec, label: usize, rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.image_size;
    let s = n as f64;
    let mut px = vec![0.0f64; n * n];

    let cx = s / 2.0 + rng.gen_range(-0.03..0.03) * s;
    let cy = s / 2.0 + rng.gen_range(-0.03..0.03) * s;
    let body_rx = s * rng.gen_range(0.40..0.44);
    let body_ry = s * rng.gen_range(0.42..0.46);
    let body_val = 0.72 + rng.gen_range(-0.04..0.04);

    let lung_val = 0.24 + rng.gen_range(-0.03..0.03);
    let lung_ry = s * rng.gen_range(0.26..0.30);
    let lung_rx = s * rng.gen_range(0.13..0.15);
    let lung_off = s * rng.gen_range(0.17..0.20);
    let lungs = [(cx - lung_off, cy), (cx + lung_off, cy)];

    let inside = |x: f64, y: f64, ex: f64, ey: f64, rx: f64, ry: f64| -> bool {
        let dx = (x - ex) / rx;
        let dy = (y - ey) / ry;
        dx * dx + dy * dy <= 1.0
    };

    let mut lung_mask = vec![false; n * n];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut v = 0.10;
            if inside(x, y, cx, cy, body_rx, body_ry) {
                v = body_val;
            }
            for &(lx, ly) in &lungs {
                if inside(x, y, lx, ly, lung_rx, lung_ry) {
                    v = lung_val;
                    lung_mask[row * n + col] = true;
                }
            }
            px[row * n + col] = v;
        }
    }

    let mut lesion_mask = vec![false; n * n];
    if label == 1 {
        let count = rng.gen_range(spec.lesion_count_range.0..=spec.lesion_count_range.1);
        for _ in 0..count {
            let contrast = rng.gen_range(spec.lesion_contrast_range.0..spec.lesion_contrast_range.1);
            let radius = rng.gen_range(1.1..2.0);
            // Half-maximum radius bounds the mask extent.
            let core = radius * (2.0f64.ln() * 2.0).sqrt();
            // Rejection-place the blob so its half-max disk stays inside a lung.
            let mut placed = None;
            for _try in 0..200 {
                let which = usize::from(rng.gen_range(0.0..1.0) < 0.5);
                let (lx, ly) = lungs[which];
                let bx = lx + rng.gen_range(-0.8..0.8) * lung_rx;
                let by = ly + rng.gen_range(-0.8..0.8) * lung_ry;
                if disk_inside_mask(&lung_mask, n, bx, by, core) {
                    placed = Some((bx, by));
                    break;
                }
            }
            let Some((bx, by)) = placed else { continue };
            for row in 0..n {
                for col in 0..n {
                    if !lung_mask[row * n + col] {
                        continue; // lesions never leak outside the cavity
                    }
                    let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                    let d2 = (x - bx).powi(2) + (y - by).powi(2);
                    let blob = contrast * (-d2 / (2.0 * radius * radius)).exp();
                    px[row * n + col] += blob;
                    if blob >= contrast * 0.5 {
                        lesion_mask[row * n + col] = true;
                    }
                }
            }
        }
    }

    for v in px.iter_mut() {
        *v += spec.background_noise_sigma * gaussian(rng);
    }
    let image = GrayImage::new(
        n,
        n,
        px.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect(),
    )
    .expect("phantom dims");
    Sample {
        image,
        label,
        lesion_mask,
        lung_mask,
    }
}

fn disk_inside_mask(mask: &[bool], n: usize, cx: f64, cy: f64, radius: f64) -> bool {
    let r0 = ((cy - radius).floor().max(0.0)) as usize;
    let r1 = ((cy + radius).ceil().min(n as f64 - 1.0)) as usize;
    let c0 = ((cx - radius).floor().max(0.0)) as usize;
    let c1 = ((cx + radius).ceil().min(n as f64 - 1.0)) as usize;
    if cy - radius < 0.0 || cy + radius > n as f64 || cx - radius < 0.0 || cx + radius > n as f64 {
        return false;
    }
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            if (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius && !mask[row * n + col] {
                return false;
            }
        }
    }
    true
}

/// Accuracy of the best mean-brightness-inside-lungs threshold split; the
/// baseline the phantom contrast is calibrated against.
pub fn threshold_oracle_accuracy(samples: &[Sample]) -> f64 {
    let features: Vec<(f64, usize)> = samples
        .iter()
        .map(|s| {
            let (mut sum, mut cnt) = (0.0f64, 0usize);
            for (i, &in_lung) in s.lung_mask.iter().enumerate() {
                if in_lung {
                    sum += s.image.pixels()[i] as f64;
                    cnt += 1;
                }
            }
            (if cnt > 0 { sum / cnt as f64 } else { 0.0 }, s.label)
        })
        .collect();
    let mut best = 0usize;
    for &(threshold, _) in &features {
        let correct = features
            .iter()
            .filter(|&&(f, y)| usize::from(f > threshold) == y)
            .count();
        best = best.max(correct);
    }
    best as f64 / samples.len().max(1) as f64
}

// ── Corruptions ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Contrast,
    Brightness,
}

pub const ALL_CORRUPTIONS: [CorruptionKind; 5] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::Contrast,
    CorruptionKind::Brightness,
];

impl CorruptionKind {
    pub fn parse(s: &str) -> Result<CorruptionKind> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "shot_noise" => Ok(CorruptionKind::ShotNoise),
            "impulse_noise" => Ok(CorruptionKind::ImpulseNoise),
            "contrast" => Ok(CorruptionKind::Contrast),
            "brightness" => Ok(CorruptionKind::Brightness),
            other => Err(CapError::InvalidArgument(format!("unknown corruption {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }
}

/// Corruption with a severity grade 1..=5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

// Fixed per-kind parameter tables, one entry per severity 1..=5. These are
// the source of truth for corruption error reproducibility.
const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.06, 0.09, 0.13, 0.18];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_FRACTION: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.60, 0.45, 0.30, 0.20];
const BRIGHTNESS_DELTA: [f64; 5] = [0.05, 0.09, 0.13, 0.18, 0.22];

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(CapError::InvalidArgument(format!(
                "severity {} outside 1..=5",
                self.severity
            )));
        }
        Ok(())
    }
}

/// Apply a corruption; deterministic in (image, spec, seed).
pub fn corrupt(x: &GrayImage, spec: &CorruptionSpec, seed: u64) -> Result<GrayImage> {
    spec.validate()?;
    let idx = (spec.severity - 1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out: Vec<f32> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_SIGMA[idx];
            x.pixels()
                .iter()
                .map(|&v| (v as f64 + sigma * gaussian(&mut rng)) as f32)
                .collect()
        }
        CorruptionKind::ShotNoise => {
            let photons = SHOT_PHOTONS[idx];
            x.pixels()
                .iter()
                .map(|&v| (poisson(&mut rng, v as f64 * photons) / photons) as f32)
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let frac = IMPULSE_FRACTION[idx];
            x.pixels()
                .iter()
                .map(|&v| {
                    if rng.gen_range(0.0..1.0) < frac {
                        if rng.gen_range(0.0..1.0) < 0.5 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[idx];
            let mean = x.pixels().iter().map(|&v| v as f64).sum::<f64>() / x.pixels().len() as f64;
            x.pixels()
                .iter()
                .map(|&v| ((v as f64 - mean) * f + mean) as f32)
                .collect()
        }
        CorruptionKind::Brightness => {
            let d = BRIGHTNESS_DELTA[idx];
            x.pixels().iter().map(|&v| (v as f64 + d) as f32).collect()
        }
    };
    GrayImage::new(
        x.height(),
        x.width(),
        out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

// ── On-disk dataset layout ──────────────────────────────────────────────
//
//   <dir>/manifest.csv     path,label rows with paths relative to <dir>
//   <dir>/images/NNNNN.pgm pixels
//   <dir>/masks/NNNNN.pgm  0 = outside lung, 128 = lung, 255 = lesion

/// Write samples as PGM files plus a manifest; returns the file list.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<std::path::PathBuf>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut manifest = String::from("path,label\n");
    let mut written = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.pgm");
        let img_path = images.join(&name);
        crate::image::pgm_write(&img_path, &s.image)?;
        written.push(img_path);

        let mask = GrayImage::new(
            s.image.height(),
            s.image.width(),
            s.lung_mask
                .iter()
                .zip(&s.lesion_mask)
                .map(|(&lung, &lesion)| {
                    if lesion {
                        1.0
                    } else if lung {
                        128.0 / 255.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        )?;
        let mask_path = masks.join(&name);
        crate::image::pgm_write(&mask_path, &mask)?;
        written.push(mask_path);

        manifest.push_str(&format!("images/{name},{}\n", s.label));
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)?;
    written.push(manifest_path);
    Ok(written)
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line == "path,label" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label) = line.rsplit_once(',').ok_or_else(|| CapError::Parse {
            path: manifest_path.display().to_string(),
            offset: lineno,
            reason: format!("bad manifest row {line:?}"),
        })?;
        let label: usize = label.trim().parse().map_err(|e| CapError::Parse {
            path: manifest_path.display().to_string(),
            offset: lineno,
            reason: format!("bad label: {e}"),
        })?;
        let image = crate::image::pgm_read(dir.join(rel))?;
        let mask_rel = rel.replacen("images/", "masks/", 1);
        let mask_path = dir.join(&mask_rel);
        let (lung_mask, lesion_mask) = if mask_path.exists() {
            let m = crate::image::pgm_read(&mask_path)?;
            let lung: Vec<bool> = m.pixels().iter().map(|&v| v > 0.4).collect();
            let lesion: Vec<bool> = m.pixels().iter().map(|&v| v > 0.9).collect();
            (lung, lesion)
        } else {
            (vec![false; image.pixels().len()], vec![false; image.pixels().len()])
        };
        samples.push(Sample {
            image,
            label,
            lesion_mask,
            lung_mask,
        });
    }
    if samples.is_empty() {
        return Err(CapError::InvalidArgument(format!(
            "no samples in manifest {}",
            manifest_path.display()
        )));
    }
    Ok(samples)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    // Knuth's method; fine at the photon counts in the table.
    let l = (-lambda).exp();
    let mut k = 0u64;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen_range(0.0..1.0f64);
        if p <= l {
            return k as f64;
        }
        k += 1;
        if k > 10_000 {
            return k as f64;
        }
    }
}
