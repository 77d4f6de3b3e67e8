//! Frequency-domain augmentation: `α∘G + β` applied to the amplitude and/or
//! phase grid of each channel's spectrum, then inverted back to pixels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::image::Image;
use crate::spectral::{fft2d, from_polar, ifft2d, to_polar, wrap_phase};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid noise configuration: {0}")]
pub struct NoiseError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Amplitude,
    Phase,
    Both,
    None,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Amplitude => "amplitude",
            Target::Phase => "phase",
            Target::Both => "both",
            Target::None => "none",
        }
    }

    fn amplitude(self) -> bool {
        matches!(self, Target::Amplitude | Target::Both)
    }

    fn phase(self) -> bool {
        matches!(self, Target::Phase | Target::Both)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = NoiseError;
    fn from_str(s: &str) -> Result<Self, NoiseError> {
        match s {
            "amplitude" => Ok(Target::Amplitude),
            "phase" => Ok(Target::Phase),
            "both" | "amplitude+phase" => Ok(Target::Both),
            "none" => Ok(Target::None),
            _ => Err(NoiseError(format!("unknown target {s:?}"))),
        }
    }
}

/// Law of the additive field β.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Additive {
    Normal { mean: f64, sigma: f64 },
    /// Zero-mean Gaussian whose σ gives this SNR (dB) against the grid it is
    /// added to.
    SnrDb(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub target: Target,
    /// Multiplicative law U(a, b).
    pub uniform: (f64, f64),
    pub additive: Additive,
    pub probability: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            target: Target::Both,
            uniform: (0.5, 1.5),
            additive: Additive::SnrDb(30.0),
            probability: 0.5,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// α ≡ 1, β ≡ 0 on both grids, always applied.
    pub fn identity() -> Self {
        Self {
            target: Target::Both,
            uniform: (1.0, 1.0),
            additive: Additive::Normal { mean: 0.0, sigma: 0.0 },
            probability: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        let (a, b) = self.uniform;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(NoiseError(format!("uniform law needs finite a ≤ b, got ({a}, {b})")));
        }
        match self.additive {
            Additive::Normal { mean, sigma } if !(mean.is_finite() && sigma.is_finite() && sigma >= 0.0) => {
                return Err(NoiseError(format!("normal law needs finite μ and σ ≥ 0, got ({mean}, {sigma})")));
            }
            Additive::SnrDb(db) if db.is_nan() => return Err(NoiseError("snr_db is NaN".into())),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(NoiseError(format!("probability {} not in [0, 1]", self.probability)));
        }
        Ok(())
    }
}

/// Noise fields for one C×H×W grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseField {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Independent per-element draws: α ~ U(a, b), β ~ N(μ, σ²). Under an SNR
/// law β is drawn at unit scale and zero mean; [`perturb`] rescales it per
/// channel against the grid it perturbs.
pub fn sample_noise_field<R: Rng>(shape: [usize; 3], cfg: &NoiseConfig, rng: &mut R) -> NoiseField {
    let n = shape.iter().product();
    let (a, b) = cfg.uniform;
    let alpha = (0..n)
        .map(|_| if a == b { a } else { rng.random_range(a..b) })
        .collect();
    let (mean, sigma) = match cfg.additive {
        Additive::Normal { mean, sigma } => (mean, sigma),
        Additive::SnrDb(_) => (0.0, 1.0),
    };
    let beta = (0..n)
        .map(|_| {
            if sigma == 0.0 {
                mean
            } else {
                let z: f64 = StandardNormal.sample(rng);
                mean + sigma * z
            }
        })
        .collect();
    NoiseField { alpha, beta }
}

/// σ giving `snr_db` against the mean power of `signal`.
pub fn snr_to_sigma(signal: &[f64], snr_db: f64) -> f64 {
    assert!(!signal.is_empty(), "snr_to_sigma on an empty signal");
    let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
    if power == 0.0 {
        return 0.0;
    }
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

fn apply_field(grid: &mut [f64], alpha: &[f64], beta: &[f64], additive: Additive) {
    let scale = match additive {
        Additive::Normal { .. } => 1.0,
        Additive::SnrDb(db) => snr_to_sigma(grid, db),
    };
    for ((g, &a), &b) in grid.iter_mut().zip(alpha).zip(beta) {
        *g = a * *g + scale * b;
    }
}

/// Augment one image. With probability `1 − p` the input is returned
/// unchanged.
pub fn perturb<R: Rng>(image: &Image, cfg: &NoiseConfig, rng: &mut R) -> Image {
    if cfg.target == Target::None || cfg.probability == 0.0 || !rng.random_bool(cfg.probability) {
        return image.clone();
    }
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let amp_field = cfg.target.amplitude().then(|| sample_noise_field([c, h, w], cfg, rng));
    let phase_field = cfg.target.phase().then(|| sample_noise_field([c, h, w], cfg, rng));
    let plane = h * w;
    let mut out = image.clone();
    for ch in 0..c {
        let pixels: Vec<f64> = image.channel(ch).iter().map(|&v| v as f64).collect();
        let mut polar = to_polar(&fft2d(&pixels, h, w));
        let span = ch * plane..(ch + 1) * plane;
        if let Some(f) = &amp_field {
            apply_field(&mut polar.amplitude, &f.alpha[span.clone()], &f.beta[span.clone()], cfg.additive);
            polar.amplitude.iter_mut().for_each(|a| *a = a.max(0.0));
        }
        if let Some(f) = &phase_field {
            apply_field(&mut polar.phase, &f.alpha[span.clone()], &f.beta[span], cfg.additive);
            polar.phase.iter_mut().for_each(|p| *p = wrap_phase(*p));
        }
        let back = ifft2d(&from_polar(&polar));
        for (dst, v) in out.channel_mut(ch).iter_mut().zip(back.values) {
            *dst = (v as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// Augment a batch; image `i` uses its own stream seeded with `seed ⊕ i`.
pub fn perturb_batch(images: &[Image], cfg: &NoiseConfig, seed: u64) -> Vec<Image> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| perturb(img, cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 16 * 12).map(|_| rng.random::<f32>()).collect();
        Image::new(3, 16, 12, data).unwrap()
    }

    #[test]
    fn degenerate_laws_give_constant_fields() {
        let cfg = NoiseConfig::identity();
        let f = sample_noise_field([2, 3, 4], &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(f.alpha.iter().all(|&a| a == 1.0));
        assert!(f.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn uniform_mean_converges() {
        let cfg = NoiseConfig::default();
        let f = sample_noise_field([1, 1000, 1000], &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let mean = f.alpha.iter().sum::<f64>() / f.alpha.len() as f64;
        assert!((0.999..=1.001).contains(&mean), "mean {mean}");
        assert!(f.alpha.iter().all(|a| (0.5..1.5).contains(a)));
    }

    #[test]
    fn fields_are_seed_determined() {
        let cfg = NoiseConfig::default();
        let a = sample_noise_field([3, 8, 8], &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = sample_noise_field([3, 8, 8], &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn snr_examples() {
        let sig = vec![1000f64.sqrt(); 50];
        assert!((snr_to_sigma(&sig, 30.0) - 1.0).abs() < 1e-12);
        assert!((snr_to_sigma(&[2.0; 9], 0.0) - 2.0).abs() < 1e-12);
        assert_eq!(snr_to_sigma(&[0.0; 4], 30.0), 0.0);
        assert!(snr_to_sigma(&[1.0; 4], 400.0) < 1e-15);
    }

    #[test]
    fn identity_noise_round_trips() {
        let img = random_image(1);
        let out = perturb(&img, &NoiseConfig::identity(), &mut ChaCha8Rng::seed_from_u64(2));
        assert!(out.max_abs_diff(&img) <= 1e-4);
    }

    #[test]
    fn zero_probability_is_exact() {
        let img = random_image(3);
        let cfg = NoiseConfig {
            probability: 0.0,
            ..NoiseConfig::default()
        };
        assert_eq!(perturb(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), img);
        let none = NoiseConfig {
            target: Target::None,
            probability: 1.0,
            ..NoiseConfig::default()
        };
        assert_eq!(perturb(&img, &none, &mut ChaCha8Rng::seed_from_u64(0)), img);
    }

    #[test]
    fn amplitude_scaling_keeps_constant_image_constant() {
        let img = Image::filled(3, 8, 8, 0.4);
        let cfg = NoiseConfig {
            target: Target::Amplitude,
            additive: Additive::Normal { mean: 0.0, sigma: 0.0 },
            probability: 1.0,
            ..NoiseConfig::default()
        };
        let out = perturb(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(6));
        for c in 0..3 {
            let ch = out.channel(c);
            let first = ch[0];
            assert!(ch.iter().all(|v| (v - first).abs() <= 1e-4));
        }
    }

    #[test]
    fn outputs_stay_in_range_and_repeat() {
        let cfg = NoiseConfig {
            probability: 1.0,
            ..NoiseConfig::default()
        };
        let imgs: Vec<Image> = (0..6).map(random_image).collect();
        let a = perturb_batch(&imgs, &cfg, 9);
        let b = perturb_batch(&imgs, &cfg, 9);
        assert_eq!(a, b);
        for (o, i) in a.iter().zip(&imgs) {
            assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(o.max_abs_diff(i) > 0.0);
        }
    }

    #[test]
    fn validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        let bad = NoiseConfig {
            uniform: (2.0, 1.0),
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseConfig {
            probability: 1.5,
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseConfig {
            additive: Additive::Normal { mean: 0.0, sigma: -1.0 },
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("amplitude+phase".parse::<Target>().unwrap(), Target::Both);
    }
}
