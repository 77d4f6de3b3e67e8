use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{HarnessError, TrainConfig};
use crate::data::{augment_standard, mix_seed, DomainDataset, Sample, Split};
use crate::fdag::{perturb, sample_noise_field, snr_to_sigma, Additive, NoiseConfig, Target};
use crate::image::Image;
use crate::model::{Batch, FfdiModel, LossValues};
use crate::tensor::{ParamGroup, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub iteration: usize,
    pub ci: f64,
    pub ca_h: f64,
    pub ca_l: f64,
    pub cae_h: f64,
    pub cae_l: f64,
    pub all: f64,
    pub lr_classifier: f64,
    pub lr_body: f64,
}

impl LossRow {
    pub fn values(&self) -> LossValues {
        LossValues {
            ci: self.ci,
            ca_h: self.ca_h,
            ca_l: self.ca_l,
            cae_h: self.cae_h,
            cae_l: self.cae_l,
            all: self.all,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub held_out: String,
    pub held_out_accuracy: f64,
    /// Test-split accuracy of every source domain.
    pub source_accuracy: BTreeMap<String, f64>,
    pub iterations: usize,
    pub seed: u64,
    pub losses: Vec<LossRow>,
    pub wall_clock_seconds: f64,
    /// SHA-256 prefix over the ids of every training sample consumed, in
    /// order.
    pub consumed_ids_hash: String,
    pub consumed_samples: usize,
}

pub struct TrainOutcome {
    pub model: FfdiModel<f32>,
    pub report: RunReport,
    /// Dataset ids of every sample that entered a gradient step.
    pub consumed: Vec<usize>,
}

/// Pixel-space counterpart of the spectral augmentation: the same α, β laws
/// applied to pixel values directly.
pub fn perturb_pixels<R: Rng>(image: &Image, cfg: &NoiseConfig, rng: &mut R) -> Image {
    if cfg.target == Target::None || cfg.probability == 0.0 || !rng.random_bool(cfg.probability) {
        return image.clone();
    }
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let field = sample_noise_field([c, h, w], cfg, rng);
    let mut out = image.clone();
    let plane = h * w;
    for ch in 0..c {
        let px: Vec<f64> = image.channel(ch).iter().map(|&v| v as f64).collect();
        let scale = match cfg.additive {
            Additive::Normal { .. } => 1.0,
            Additive::SnrDb(db) => snr_to_sigma(&px, db),
        };
        let span = ch * plane..(ch + 1) * plane;
        for (((dst, &x), &a), &b) in out.channel_mut(ch).iter_mut().zip(&px).zip(&field.alpha[span.clone()]).zip(&field.beta[span]) {
            *dst = ((a * x + scale * b) as f32).clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    /// `counts[truth][predicted]`.
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion(model: &FfdiModel<f32>, samples: &[&Sample]) -> Result<Confusion, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::Invalid("cannot evaluate an empty sample set".into()));
    }
    let k = model.config().num_classes;
    let mut counts = vec![vec![0; k]; k];
    for chunk in samples.chunks(64) {
        let imgs: Vec<Image> = chunk.iter().map(|s| s.image.clone()).collect();
        for (s, p) in chunk.iter().zip(model.predict_batch(&imgs)?) {
            if s.label >= k {
                return Err(HarnessError::Invalid(format!("label {} outside {k} classes", s.label)));
            }
            counts[s.label][p] += 1;
        }
    }
    Ok(Confusion { counts })
}

/// Top-1 accuracy of the fused classifier.
pub fn evaluate(model: &FfdiModel<f32>, samples: &[&Sample]) -> Result<f64, HarnessError> {
    Ok(confusion(model, samples)?.accuracy())
}

fn hash_ids(ids: &[usize]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update((*id as u64).to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Leave-one-domain-out training on every domain except `cfg.held_out`,
/// followed by evaluation on the held-out domain and the source test
/// splits.
pub fn train_lodo(dataset: &DomainDataset, cfg: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    train_lodo_with(dataset, cfg, |_, _| {})
}

/// [`train_lodo`] with a callback invoked after every iteration.
pub fn train_lodo_with(
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossRow),
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let held = dataset
        .domain_index(&cfg.held_out)
        .ok_or_else(|| HarnessError::Invalid(format!("unknown held-out domain {:?}", cfg.held_out)))?;
    let sources: Vec<usize> = (0..dataset.domains.len()).filter(|&d| d != held).collect();
    if sources.len() < 2 {
        return Err(HarnessError::Invalid("need at least two source domains".into()));
    }
    if dataset.num_classes != cfg.model.num_classes {
        return Err(HarnessError::Invalid(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes, cfg.model.num_classes
        )));
    }
    let pools: Vec<Vec<&Sample>> = sources
        .iter()
        .map(|&d| dataset.domains[d].split(Split::Train).collect())
        .collect();
    if pools.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Invalid("a source domain has no training samples".into()));
    }

    let start = Instant::now();
    let mut model = FfdiModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut sgd = Sgd::new(cfg.lr_classifier, cfg.lr_body, cfg.weight_decay, cfg.milestones.clone()).with_momentum(cfg.momentum)
        .with_warmup(cfg.warmup);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5EED_BA7C));
    let noise_seed = mix_seed(cfg.seed, cfg.noise.seed ^ 0xF0DA);
    let mut orders: Vec<Vec<usize>> = pools.iter().map(|p| (0..p.len()).collect()).collect();
    let mut cursors = vec![usize::MAX; pools.len()];
    let mut consumed = Vec::with_capacity(cfg.iterations * cfg.batch_per_domain * pools.len());
    let mut losses = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut batch = Batch::default();
        let stream = mix_seed(noise_seed, it as u64);
        for (p, pool) in pools.iter().enumerate() {
            for _ in 0..cfg.batch_per_domain {
                if cursors[p] >= pool.len() {
                    orders[p].shuffle(&mut rng);
                    cursors[p] = 0;
                }
                let sample = pool[orders[p][cursors[p]]];
                cursors[p] += 1;
                let mut img = if cfg.standard_augment {
                    augment_standard(&sample.image, &mut rng)
                } else {
                    sample.image.clone()
                };
                if cfg.fdag {
                    let mut child = ChaCha8Rng::seed_from_u64(stream ^ batch.len() as u64);
                    img = if cfg.time_domain_noise {
                        perturb_pixels(&img, &cfg.noise, &mut child)
                    } else {
                        perturb(&img, &cfg.noise, &mut child)
                    };
                }
                consumed.push(sample.id);
                batch.images.push(img);
                batch.labels.push(sample.label);
                batch.domains.push(sample.domain);
            }
        }
        let v = model.accumulate_gradients(&batch)?;
        if !v.is_finite() {
            return Err(HarnessError::Invalid(format!("non-finite loss at iteration {it}")));
        }
        sgd.step(model.params_mut(), it);
        let row = LossRow {
            iteration: it,
            ci: v.ci,
            ca_h: v.ca_h,
            ca_l: v.ca_l,
            cae_h: v.cae_h,
            cae_l: v.cae_l,
            all: v.all,
            lr_classifier: sgd.lr(ParamGroup::Classifier, it),
            lr_body: sgd.lr(ParamGroup::Body, it),
        };
        on_step(it, &row);
        losses.push(row);
    }

    let held_samples: Vec<&Sample> = dataset.domains[held].samples.iter().collect();
    let held_out_accuracy = evaluate(&model, &held_samples)?;
    let mut source_accuracy = BTreeMap::new();
    for &d in &sources {
        let test: Vec<&Sample> = dataset.domains[d].split(Split::Test).collect();
        if !test.is_empty() {
            source_accuracy.insert(dataset.domains[d].spec.name.clone(), evaluate(&model, &test)?);
        }
    }
    let report = RunReport {
        config: cfg.entries().into_iter().collect(),
        config_hash: cfg.hash(),
        held_out: cfg.held_out.clone(),
        held_out_accuracy,
        source_accuracy,
        iterations: cfg.iterations,
        seed: cfg.seed,
        losses,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        consumed_ids_hash: hash_ids(&consumed),
        consumed_samples: consumed.len(),
    };
    Ok(TrainOutcome {
        model,
        report,
        consumed,
    })
}
