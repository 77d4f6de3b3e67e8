use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::fdag::{Additive, NoiseConfig};
use crate::model::FfdiConfig;

/// Everything a training run depends on. Text form is `key = value` lines
/// with `#` comments; every field has a key.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: FfdiConfig,
    pub iterations: usize,
    pub batch_per_domain: usize,
    pub lr_classifier: f64,
    pub lr_body: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup: usize,
    pub milestones: Vec<usize>,
    /// Frequency-domain augmentation on/off; its laws live in `noise`.
    pub fdag: bool,
    pub noise: NoiseConfig,
    /// Apply the `noise` laws to pixels instead of the spectrum.
    pub time_domain_noise: bool,
    pub standard_augment: bool,
    pub seed: u64,
    pub held_out: String,
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub per_class: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: FfdiConfig::default(),
            iterations: 2000,
            batch_per_domain: 16,
            lr_classifier: 0.05,
            lr_body: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            warmup: 0,
            milestones: vec![800, 1400],
            fdag: true,
            noise: NoiseConfig::default(),
            time_domain_noise: false,
            standard_augment: true,
            seed: 0,
            held_out: "sketch".into(),
            data_dir: None,
            data_seed: 0,
            per_class: 120,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str) -> HarnessError {
    HarnessError::Usage(format!("bad value {value:?} for {key}"))
}

fn num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N, HarnessError> {
    value.parse().map_err(|_| bad(key, value))
}

fn boolean(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

/// Split `key = value` text into pairs, dropping comments and blank lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    /// DeepAll without frequency-domain augmentation.
    pub fn deep_all() -> Self {
        Self {
            model: FfdiConfig::deep_all(),
            fdag: false,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "batch_per_domain" => self.batch_per_domain = num(key, value)?,
            "lr_classifier" => self.lr_classifier = num(key, value)?,
            "lr_body" => self.lr_body = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "milestones" => {
                self.milestones = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| num(key, s.trim())).collect::<Result<_, _>>()?
                }
            }
            "fdag" => self.fdag = boolean(key, value)?,
            "fdag_target" => self.noise.target = value.parse().map_err(|_| bad(key, value))?,
            "fdag_a" => self.noise.uniform.0 = num(key, value)?,
            "fdag_b" => self.noise.uniform.1 = num(key, value)?,
            "fdag_snr_db" => self.noise.additive = Additive::SnrDb(num(key, value)?),
            "fdag_sigma" => {
                let mean = match self.noise.additive {
                    Additive::Normal { mean, .. } => mean,
                    Additive::SnrDb(_) => 0.0,
                };
                self.noise.additive = Additive::Normal {
                    mean,
                    sigma: num(key, value)?,
                }
            }
            "fdag_mu" => {
                let sigma = match self.noise.additive {
                    Additive::Normal { sigma, .. } => sigma,
                    Additive::SnrDb(_) => 0.0,
                };
                self.noise.additive = Additive::Normal {
                    mean: num(key, value)?,
                    sigma,
                }
            }
            "fdag_p" => self.noise.probability = num(key, value)?,
            "fdag_seed" => self.noise.seed = num(key, value)?,
            "time_domain_noise" => self.time_domain_noise = boolean(key, value)?,
            "standard_augment" => self.standard_augment = boolean(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "held_out" => self.held_out = value.to_string(),
            "data_dir" => self.data_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "data_seed" => self.data_seed = num(key, value)?,
            "per_class" => self.per_class = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                if !self.model.set(key, value).map_err(|e| HarnessError::Usage(e.to_string()))? {
                    return Err(HarnessError::Usage(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Defaults, then `text`, then `overrides` (each `key=value`).
    pub fn from_text_and_overrides(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Usage(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_text_and_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
        self.noise.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
        if self.batch_per_domain == 0 {
            return Err(HarnessError::Usage("batch_per_domain must be at least 1".into()));
        }
        if !(self.lr_classifier >= 0.0 && self.lr_body >= 0.0 && self.weight_decay >= 0.0) {
            return Err(HarnessError::Usage("learning rates and weight decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HarnessError::Usage("momentum must be in [0, 1)".into()));
        }
        if self.per_class < 5 {
            return Err(HarnessError::Usage("per_class must be at least 5".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.model.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let (mu, sigma, snr) = match self.noise.additive {
            Additive::Normal { mean, sigma } => (mean.to_string(), sigma.to_string(), String::new()),
            Additive::SnrDb(db) => (String::new(), String::new(), db.to_string()),
        };
        let ms = self.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",");
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("iterations", self.iterations.to_string());
        push("batch_per_domain", self.batch_per_domain.to_string());
        push("lr_classifier", self.lr_classifier.to_string());
        push("lr_body", self.lr_body.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("momentum", self.momentum.to_string());
        push("warmup", self.warmup.to_string());
        push("milestones", ms);
        push("fdag", self.fdag.to_string());
        push("fdag_target", self.noise.target.to_string());
        push("fdag_a", self.noise.uniform.0.to_string());
        push("fdag_b", self.noise.uniform.1.to_string());
        if snr.is_empty() {
            push("fdag_mu", mu);
            push("fdag_sigma", sigma);
        } else {
            push("fdag_snr_db", snr);
        }
        push("fdag_p", self.noise.probability.to_string());
        push("fdag_seed", self.noise.seed.to_string());
        push("time_domain_noise", self.time_domain_noise.to_string());
        push("standard_augment", self.standard_augment.to_string());
        push("seed", self.seed.to_string());
        push("held_out", self.held_out.clone());
        push(
            "data_dir",
            self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        push("data_seed", self.data_seed.to_string());
        push("per_class", self.per_class.to_string());
        push("out_dir", self.out_dir.display().to_string());
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short content hash of every setting that affects results (the output
    /// directory is excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "out_dir" {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_overrides() {
        let text = "# base\niterations = 10\nlambda = 0.5 # weight\nheld_out = flat\n";
        let cfg = TrainConfig::from_text_and_overrides(text, &["seed=3".into(), "held_out = texture".into()]).unwrap();
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.model.lambda, 0.5);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.held_out, "texture");
        assert!(TrainConfig::from_text_and_overrides("nonsense = 1", &[]).is_err());
        assert!(TrainConfig::from_text_and_overrides("iterations", &[]).is_err());
        assert!(TrainConfig::from_text_and_overrides("", &["batch_per_domain=0".into()]).is_err());
    }

    #[test]
    fn text_round_trip_covers_every_field() {
        let mut cfg = TrainConfig::deep_all();
        cfg.noise.additive = Additive::Normal { mean: 0.1, sigma: 0.2 };
        cfg.data_dir = Some("d".into());
        cfg.milestones = vec![5];
        let back = TrainConfig::from_text_and_overrides(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
        let dflt = TrainConfig::default();
        assert_eq!(TrainConfig::from_text_and_overrides(&dflt.to_text(), &[]).unwrap(), dflt);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
