use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::HarnessError;
use crate::data::{mix_seed, DomainDataset};
use crate::image::Image;
use crate::spectral::decompose;

const EPOCHS: usize = 200;
const LR: f64 = 0.1;

/// Proxy A-distance `2(1 − 2ε)` of a linear domain discriminator, where `ε`
/// is its error on a held-out half of each set. Clamped to `[0, 2]`.
pub fn a_distance(features_a: &[Vec<f64>], features_b: &[Vec<f64>], seed: u64) -> Result<f64, HarnessError> {
    if features_a.is_empty() || features_b.is_empty() {
        return Err(HarnessError::Invalid("a_distance needs two non-empty feature sets".into()));
    }
    let dim = features_a[0].len();
    if features_a.iter().chain(features_b).any(|f| f.len() != dim) {
        return Err(HarnessError::Invalid(format!("feature dimension mismatch (expected {dim})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (set, label) in [(features_a, 0.0), (features_b, 1.0)] {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng);
        let half = set.len().div_ceil(2);
        train.extend(idx[..half].iter().map(|&i| (&set[i], label)));
        test.extend(idx[half..].iter().map(|&i| (&set[i], label)));
    }
    if test.is_empty() {
        return Err(HarnessError::Invalid("a_distance needs at least two samples per set".into()));
    }

    // Standardize with training statistics.
    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for (f, _) in &train {
        mean.iter_mut().zip(f.iter()).for_each(|(m, v)| *m += v / n);
    }
    for (f, _) in &train {
        sd.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    sd.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let norm = |f: &[f64]| -> Vec<f64> { f.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let xtr: Vec<(Vec<f64>, f64)> = train.iter().map(|(f, y)| (norm(f), *y)).collect();

    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let mut gw = vec![0.0; dim];
    for _ in 0..EPOCHS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, y) in &xtr {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let d = (p - y) / n;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
            gb += d;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= LR * g);
        b -= LR * gb;
    }
    let wrong = test
        .iter()
        .filter(|(f, y)| {
            let z = b + norm(f).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) != (*y > 0.5)
        })
        .count();
    let eps = wrong as f64 / test.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0))
}

/// Flattened `factor×`-downsampled image: the mean of each `factor×factor`
/// block per channel.
pub fn block_features(image: &Image, factor: usize) -> Vec<f64> {
    let (h, w) = (image.height() / factor, image.width() / factor);
    let mut out = Vec::with_capacity(image.channels() * h * w);
    for c in 0..image.channels() {
        for by in 0..h {
            for bx in 0..w {
                let mut acc = 0.0;
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        acc += image.get(c, y, x) as f64;
                    }
                }
                out.push(acc / (factor * factor) as f64);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDistance {
    pub a: String,
    pub b: String,
    pub seed: u64,
    pub hfi: f64,
    pub lfi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyADistance {
    pub r: usize,
    pub hfi: f64,
    pub lfi: f64,
    pub pairs: Vec<PairDistance>,
}

/// Mean A-distance between every pair of domains, computed separately on the
/// high- and low-pass filtered images (8× block features) and averaged over
/// `seeds`.
pub fn frequency_a_distance(dataset: &DomainDataset, r: usize, seeds: &[u64]) -> Result<FrequencyADistance, HarnessError> {
    if dataset.domains.len() < 2 || seeds.is_empty() {
        return Err(HarnessError::Invalid("need two domains and at least one seed".into()));
    }
    let feats: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = dataset
        .domains
        .iter()
        .map(|d| {
            d.samples
                .iter()
                .map(|s| {
                    let (l, h) = decompose(&s.image, r);
                    (block_features(&h, 8), block_features(&l, 8))
                })
                .unzip()
        })
        .collect();
    let mut pairs = Vec::new();
    for &seed in seeds {
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let s = mix_seed(seed, (i * 64 + j) as u64);
                pairs.push(PairDistance {
                    a: dataset.domains[i].spec.name.clone(),
                    b: dataset.domains[j].spec.name.clone(),
                    seed,
                    hfi: a_distance(&feats[i].0, &feats[j].0, s)?,
                    lfi: a_distance(&feats[i].1, &feats[j].1, s)?,
                });
            }
        }
    }
    let n = pairs.len() as f64;
    Ok(FrequencyADistance {
        r,
        hfi: pairs.iter().map(|p| p.hfi).sum::<f64>() / n,
        lfi: pairs.iter().map(|p| p.lfi).sum::<f64>() / n,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z + shift
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn same_distribution_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = gaussian(400, 5, 0.0, &mut rng);
        all.shuffle(&mut rng);
        let (a, b) = all.split_at(200);
        let d = a_distance(a, b, 3).unwrap();
        assert!(d < 0.3, "{d}");
    }

    #[test]
    fn separated_clusters_are_near_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(100, 4, -3.0, &mut rng);
        let b = gaussian(100, 4, 3.0, &mut rng);
        let d = a_distance(&a, &b, 0).unwrap();
        assert!(d > 1.7, "{d}");
    }

    #[test]
    fn bounded_and_roughly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(120, 3, 0.0, &mut rng);
        let b = gaussian(120, 3, 0.4, &mut rng);
        let (mut ab, mut ba) = (0.0, 0.0);
        for s in 0..10 {
            let x = a_distance(&a, &b, s).unwrap();
            let y = a_distance(&b, &a, s + 100).unwrap();
            assert!((0.0..=2.0).contains(&x) && (0.0..=2.0).contains(&y));
            ab += x / 10.0;
            ba += y / 10.0;
        }
        assert!((ab - ba).abs() < 0.1, "{ab} vs {ba}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(a_distance(&[], &[vec![1.0]], 0).is_err());
        assert!(a_distance(&[vec![1.0, 2.0]], &[vec![1.0]], 0).is_err());
    }

    #[test]
    fn block_average() {
        let mut img = Image::filled(1, 16, 16, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                img.set(0, y, x, 1.0);
            }
        }
        assert_eq!(block_features(&img, 8), vec![1.0, 0.0, 0.0, 0.0]);
    }
}
