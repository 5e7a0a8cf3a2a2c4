//! Self-guided edge-preserving filter.
//!
//! Local linear model per window: x̃(j) = ā·x(j) + b̄ with per-window
//! coefficients a = σ²/(σ²+t), b = (1−a)·μ computed from window mean μ and
//! variance σ² of the image itself (self-guidance), then averaged over all
//! windows containing each pixel. Low-variance regions collapse toward the
//! window mean; high-variance (edge) regions pass through.

use crate::error::{CapError, Result};
use crate::image::GrayImage;

/// Window size and smoothing temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Side of the square window; odd, at least 3.
    pub window_size: usize,
    /// Smoothing regularizer added to window variance.
    pub temperature: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            window_size: 5,
            temperature: 0.003,
        }
    }
}

impl FilterConfig {
    fn validate(&self, img: &GrayImage) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(CapError::InvalidArgument(format!(
                "window size {} must be odd and >= 3",
                self.window_size
            )));
        }
        if self.temperature <= 0.0 {
            return Err(CapError::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if img.height() < self.window_size || img.width() < self.window_size {
            return Err(CapError::InvalidArgument(format!(
                "image {}x{} smaller than {}x{} window",
                img.height(),
                img.width(),
                self.window_size,
                self.window_size
            )));
        }
        Ok(())
    }
}

/// Mean over the s×s window centered at each pixel, with edge-replication
/// padding (every window has exactly s² contributors).
pub fn box_mean(x: &GrayImage, window_size: usize) -> Result<GrayImage> {
    let cfg = FilterConfig {
        window_size,
        temperature: 1.0,
    };
    cfg.validate(x)?;
    let data: Vec<f64> = x.pixels().iter().map(|&p| p as f64).collect();
    let out = box_mean_f64(&data, x.height(), x.width(), window_size);
    GrayImage::new(
        x.height(),
        x.width(),
        out.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect(),
    )
}

/// Separable sliding-window mean with clamped (replicated) borders.
fn box_mean_f64(data: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let r = s / 2;
    let inv = 1.0 / s as f64;
    let clamp = |i: isize, hi: usize| -> usize { i.clamp(0, hi as isize - 1) as usize };

    // Horizontal pass.
    let mut hpass = vec![0.0f64; h * w];
    for row in 0..h {
        let src = &data[row * w..(row + 1) * w];
        let mut sum = 0.0;
        for dc in -(r as isize)..=(r as isize) {
            sum += src[clamp(dc, w)];
        }
        hpass[row * w] = sum * inv;
        for c in 1..w {
            sum -= src[clamp(c as isize - 1 - r as isize, w)];
            sum += src[clamp(c as isize + r as isize, w)];
            hpass[row * w + c] = sum * inv;
        }
    }

    // Vertical pass.
    let mut out = vec![0.0f64; h * w];
    for c in 0..w {
        let mut sum = 0.0;
        for dr in -(r as isize)..=(r as isize) {
            sum += hpass[clamp(dr, h) * w + c];
        }
        out[c] = sum * inv;
        for row in 1..h {
            sum -= hpass[clamp(row as isize - 1 - r as isize, h) * w + c];
            sum += hpass[clamp(row as isize + r as isize, h) * w + c];
            out[row * w + c] = sum * inv;
        }
    }
    out
}

/// Contour-preserving augmentation: filter `x` against itself.
pub fn self_guided_filter(x: &GrayImage, cfg: &FilterConfig) -> Result<GrayImage> {
    cfg.validate(x)?;
    let (h, w, s) = (x.height(), x.width(), cfg.window_size);
    let t = cfg.temperature;
    let data: Vec<f64> = x.pixels().iter().map(|&p| p as f64).collect();
    let sq: Vec<f64> = data.iter().map(|&v| v * v).collect();

    let mu = box_mean_f64(&data, h, w, s);
    let mu2 = box_mean_f64(&sq, h, w, s);

    let mut a = vec![0.0f64; h * w];
    let mut b = vec![0.0f64; h * w];
    for i in 0..h * w {
        // Window variance; tiny negatives from cancellation are clipped.
        let var = (mu2[i] - mu[i] * mu[i]).max(0.0);
        a[i] = var / (var + t);
        b[i] = (1.0 - a[i]) * mu[i];
    }

    let abar = box_mean_f64(&a, h, w, s);
    let bbar = box_mean_f64(&b, h, w, s);

    let out: Vec<f32> = (0..h * w)
        .map(|i| ((abar[i] * data[i] + bbar[i]) as f32).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(h, w, out)
}

/// Reference evaluation of the same transform with literal per-window double
/// loops. Kept deliberately independent of the separable fast path; used by
/// the verification suite to pin the fast path down.
pub fn naive_self_guided_filter(x: &GrayImage, cfg: &FilterConfig) -> Result<GrayImage> {
    cfg.validate(x)?;
    let (h, w, s) = (x.height(), x.width(), cfg.window_size);
    let r = (s / 2) as isize;
    let t = cfg.temperature;
    let px = |row: isize, col: isize| -> f64 {
        let row = row.clamp(0, h as isize - 1) as usize;
        let col = col.clamp(0, w as isize - 1) as usize;
        x.get(row, col) as f64
    };

    let window = |cr: isize, cc: isize| -> (f64, f64) {
        // (mean, mean of squares) over the window centered at (cr, cc)
        let mut m = 0.0;
        let mut m2 = 0.0;
        for dr in -r..=r {
            for dc in -r..=r {
                let v = px(cr + dr, cc + dc);
                m += v;
                m2 += v * v;
            }
        }
        let n = (s * s) as f64;
        (m / n, m2 / n)
    };

    let mut a = vec![0.0f64; h * w];
    let mut b = vec![0.0f64; h * w];
    for row in 0..h {
        for col in 0..w {
            let (mu, mu2) = window(row as isize, col as isize);
            let var = (mu2 - mu * mu).max(0.0);
            let ak = var / (var + t);
            a[row * w + col] = ak;
            b[row * w + col] = (1.0 - ak) * mu;
        }
    }

    let coeff = |m: &[f64], row: isize, col: isize| -> f64 {
        let row = row.clamp(0, h as isize - 1) as usize;
        let col = col.clamp(0, w as isize - 1) as usize;
        m[row * w + col]
    };

    let mut out = vec![0.0f32; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut abar = 0.0;
            let mut bbar = 0.0;
            for dr in -r..=r {
                for dc in -r..=r {
                    abar += coeff(&a, row as isize + dr, col as isize + dc);
                    bbar += coeff(&b, row as isize + dr, col as isize + dc);
                }
            }
            let n = (s * s) as f64;
            abar /= n;
            bbar /= n;
            out[row * w + col] =
                ((abar * x.get(row, col) as f64 + bbar) as f32).clamp(0.0, 1.0);
        }
    }
    GrayImage::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(h, w, |_, _| rng.gen_range(0.0..=1.0))
    }

    #[test]
    fn constant_image_is_fixed_point() {
        for &c in &[0.0f32, 0.37, 0.6, 1.0] {
            let img = GrayImage::constant(12, 12, c);
            let out = self_guided_filter(&img, &FilterConfig::default()).unwrap();
            for &p in out.pixels() {
                assert!((p - c).abs() < 1e-7, "constant {c} drifted to {p}");
            }
        }
    }

    #[test]
    fn box_mean_impulse_and_naive_agreement() {
        // Single impulse spreads to 1/9 over its 3x3 neighborhood.
        let mut px = vec![0.0f32; 49];
        px[3 * 7 + 3] = 1.0;
        let img = GrayImage::new(7, 7, px).unwrap();
        let out = box_mean(&img, 3).unwrap();
        for r in 0..7usize {
            for c in 0..7usize {
                let inside = r.abs_diff(3) <= 1 && c.abs_diff(3) <= 1;
                let want = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((out.get(r, c) - want).abs() < 1e-7);
            }
        }

        // Random image: separable pass equals the naive double loop.
        let img = random_image(11, 14, 21);
        let fast = box_mean(&img, 5).unwrap();
        for r in 0..11isize {
            for c in 0..14isize {
                let mut sum = 0.0f64;
                for dr in -2..=2 {
                    for dc in -2..=2 {
                        let rr = (r + dr).clamp(0, 10) as usize;
                        let cc = (c + dc).clamp(0, 13) as usize;
                        sum += img.get(rr, cc) as f64;
                    }
                }
                let want = (sum / 25.0) as f32;
                assert!((fast.get(r as usize, c as usize) - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn fast_path_matches_naive_oracle() {
        let cfg = FilterConfig {
            window_size: 3,
            temperature: 0.003,
        };
        let img = random_image(8, 8, 5);
        let fast = self_guided_filter(&img, &cfg).unwrap();
        let naive = naive_self_guided_filter(&img, &cfg).unwrap();
        let max_diff = fast
            .pixels()
            .iter()
            .zip(naive.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-6, "fast vs naive diff {max_diff}");
    }

    #[test]
    fn high_temperature_limit_is_double_box_mean() {
        let img = random_image(16, 16, 8);
        let cfg = FilterConfig {
            window_size: 5,
            temperature: 1e9,
        };
        let out = self_guided_filter(&img, &cfg).unwrap();
        // a -> 0, b -> mu, so the output approaches box_mean(box_mean(x)).
        let double_box = box_mean(&box_mean(&img, 5).unwrap(), 5).unwrap();
        for (a, b) in out.pixels().iter().zip(double_box.pixels()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn step_edge_is_preserved() {
        let s = 5usize;
        let img = GrayImage::from_fn(24, 24, |_, c| if c < 12 { 0.0 } else { 1.0 });
        let cfg = FilterConfig {
            window_size: s,
            temperature: 1e-6,
        };
        let out = self_guided_filter(&img, &cfg).unwrap();
        for r in 0..24usize {
            for c in 0..24usize {
                let dist = c.abs_diff(12).min(c.abs_diff(11));
                if dist >= s {
                    let diff = (out.get(r, c) - img.get(r, c)).abs();
                    assert!(diff < 0.05, "pixel ({r},{c}) moved by {diff}");
                }
            }
        }
    }

    #[test]
    fn smoothing_reduces_total_variation_of_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise_sigma = 0.05f32;
        let img = GrayImage::from_fn(24, 24, |_, _| 0.5 + rng.gen_range(-noise_sigma..noise_sigma));
        let cfg = FilterConfig {
            window_size: 5,
            temperature: (noise_sigma as f64).powi(2).max(0.003),
        };
        let out = self_guided_filter(&img, &cfg).unwrap();
        assert!(out.total_variation() <= img.total_variation());
    }

    #[test]
    fn rejects_bad_configs() {
        let img = GrayImage::constant(8, 8, 0.5);
        assert!(self_guided_filter(
            &img,
            &FilterConfig {
                window_size: 4,
                temperature: 0.1
            }
        )
        .is_err());
        assert!(self_guided_filter(
            &img,
            &FilterConfig {
                window_size: 5,
                temperature: 0.0
            }
        )
        .is_err());
        let tiny = GrayImage::constant(3, 3, 0.5);
        assert!(self_guided_filter(&tiny, &FilterConfig::default()).is_err());
    }
}
