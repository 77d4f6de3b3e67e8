use serde::Serialize;

use super::output::fmt_sig;
use super::{train_lodo, CsvTable, HarnessError, TrainConfig};
use crate::data::{DomainDataset, Sample};
use crate::image::Image;
use crate::model::{FfdiModel, Interaction, Tap};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub r: usize,
    /// `(held-out domain, accuracy)` in the requested order.
    pub accuracy: Vec<(String, f64)>,
    pub average: f64,
}

/// One leave-one-domain-out run per `(r, held-out domain)`.
pub fn sweep_r(
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    r_values: &[usize],
    held_out: &[String],
) -> Result<Vec<SweepRow>, HarnessError> {
    if r_values.is_empty() || held_out.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one r and one held-out domain".into()));
    }
    let mut rows = Vec::new();
    for &r in r_values {
        let mut accuracy = Vec::new();
        for d in held_out {
            let mut c = cfg.clone();
            c.model.r = r;
            c.held_out = d.clone();
            accuracy.push((d.clone(), train_lodo(dataset, &c)?.report.held_out_accuracy));
        }
        let average = accuracy.iter().map(|(_, a)| a).sum::<f64>() / accuracy.len() as f64;
        rows.push(SweepRow { r, accuracy, average });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> CsvTable {
    let mut header = vec!["r".to_string()];
    if let Some(first) = rows.first() {
        header.extend(first.accuracy.iter().map(|(d, _)| d.clone()));
    }
    header.push("average".into());
    let mut t = CsvTable {
        header,
        rows: Vec::new(),
    };
    for row in rows {
        let mut cells = vec![row.r.to_string()];
        cells.extend(row.accuracy.iter().map(|(_, a)| fmt_sig(*a)));
        cells.push(fmt_sig(row.average));
        t.push(cells);
    }
    t
}

/// The six component configurations, in table order, derived from `base`.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |h: bool, l: bool, inter: bool, fdag: bool| {
        let mut c = base.clone();
        c.model.use_h = h;
        c.model.use_l = l;
        c.model.use_interaction = inter;
        if inter {
            c.model.interaction = Interaction::Iim;
        }
        c.fdag = fdag;
        c
    };
    vec![
        ("DeepAll", with(false, false, false, false)),
        ("L", with(false, true, false, false)),
        ("H", with(true, false, false, false)),
        ("DeepAll+FDAG", with(false, false, false, true)),
        ("H+L+IIM", with(true, true, true, false)),
        ("FFDI", with(true, true, true, true)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    /// Held-out accuracy per seed, in seed order.
    pub accuracy: Vec<(u64, f64)>,
    pub mean: f64,
}

/// Every ablation configuration trained once per seed on the same held-out
/// domain.
pub fn ablation_suite(dataset: &DomainDataset, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Usage("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let mut accuracy = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            accuracy.push((seed, train_lodo(dataset, &c)?.report.held_out_accuracy));
        }
        let mean = accuracy.iter().map(|(_, a)| a).sum::<f64>() / accuracy.len() as f64;
        rows.push(AblationRow {
            name: name.to_string(),
            config_hash: cfg.hash(),
            accuracy,
            mean,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> CsvTable {
    let mut header = vec!["configuration".to_string(), "config_hash".to_string()];
    if let Some(first) = rows.first() {
        header.extend(first.accuracy.iter().map(|(s, _)| format!("seed_{s}")));
    }
    header.push("mean".into());
    let mut t = CsvTable {
        header,
        rows: Vec::new(),
    };
    for row in rows {
        let mut cells = vec![row.name.clone(), row.config_hash.clone()];
        cells.extend(row.accuracy.iter().map(|(_, a)| fmt_sig(*a)));
        cells.push(fmt_sig(row.mean));
        t.push(cells);
    }
    t
}

/// One row per sample: domain name, label, pooled feature vector at `tap`.
pub fn export_features(
    model: &FfdiModel<f32>,
    dataset: &DomainDataset,
    samples: &[&Sample],
    tap: Tap,
) -> Result<CsvTable, HarnessError> {
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let rows = model.features(&images, tap)?;
    let width = rows.first().map_or(0, |r| r.len());
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    let mut t = CsvTable {
        header,
        rows: Vec::new(),
    };
    for (s, row) in samples.iter().zip(rows) {
        let mut cells = vec![dataset.domains[s.domain].spec.name.clone(), s.label.to_string()];
        cells.extend(row.iter().map(|v| fmt_sig(*v)));
        t.push(cells);
    }
    Ok(t)
}
