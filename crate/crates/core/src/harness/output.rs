use std::fs;
use std::io::Write;
use std::path::Path;

use super::{HarnessError, RunReport, TrainOutcome};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(bytes).map_err(io(&tmp))?;
    f.sync_all().map_err(io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io(path))
}

/// Six significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let mag = v.abs().log10().floor() as i32;
    if (-5..=15).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Header plus rows of already formatted cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        write_atomic(path, self.render().as_bytes())
    }
}

pub fn losses_table(report: &RunReport) -> CsvTable {
    let mut t = CsvTable::new(&["iteration", "L_ci", "L_caH", "L_caL", "L_caeH", "L_caeL", "L_all", "lr_classifier", "lr_body"]);
    for l in &report.losses {
        t.push(vec![
            l.iteration.to_string(),
            fmt_sig(l.ci),
            fmt_sig(l.ca_h),
            fmt_sig(l.ca_l),
            fmt_sig(l.cae_h),
            fmt_sig(l.cae_l),
            fmt_sig(l.all),
            fmt_sig(l.lr_classifier),
            fmt_sig(l.lr_body),
        ]);
    }
    t
}

pub fn accuracy_table(report: &RunReport) -> CsvTable {
    let mut t = CsvTable::new(&["domain", "role", "accuracy"]);
    t.push(vec![report.held_out.clone(), "held_out".into(), fmt_sig(report.held_out_accuracy)]);
    for (d, a) in &report.source_accuracy {
        t.push(vec![d.clone(), "source_test".into(), fmt_sig(*a)]);
    }
    t
}

/// `report.json`, `losses.csv`, `accuracy.csv` and `checkpoint.bin` under
/// `dir`.
pub fn write_run_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<(), HarnessError> {
    let json = serde_json::to_vec_pretty(&outcome.report).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    write_atomic(&dir.join("report.json"), &json)?;
    losses_table(&outcome.report).write(&dir.join("losses.csv"))?;
    accuracy_table(&outcome.report).write(&dir.join("accuracy.csv"))?;
    write_atomic(&dir.join("checkpoint.bin"), &outcome.model.to_checkpoint_bytes())
}

/// Numeric rows of a feature CSV. A header row is skipped; when the header
/// starts with `domain,label` those two columns are dropped.
pub fn read_feature_csv(path: &Path) -> Result<Vec<Vec<f64>>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let mut skip = 0;
    if let Some(first) = lines.peek() {
        let cells: Vec<&str> = first.split(',').map(str::trim).collect();
        if cells.iter().any(|c| c.parse::<f64>().is_err()) {
            if cells.len() >= 2 && cells[0] == "domain" && cells[1] == "label" {
                skip = 2;
            }
            lines.next();
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .skip(skip)
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| HarnessError::Invalid(format!("{}: row {} is not numeric", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(HarnessError::Invalid(format!("{}: no feature rows", path.display())));
    }
    Ok(rows)
}
