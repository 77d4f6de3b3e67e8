use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ablation_suite, ablation_table, evaluate, export_features, fmt_sig, frequency_a_distance, read_feature_csv, sweep_r,
    sweep_table, train_lodo, write_atomic, write_run_outputs, a_distance, CsvTable, HarnessError, TrainConfig,
};
use crate::data::{build_dataset, load_dataset, mix_seed, read_image, write_dataset, write_image, DomainDataset, DomainSpec, Sample, Split};
use crate::fdag::perturb;
use crate::model::{FfdiModel, Tap};
use crate::spectral::decompose;

#[derive(Parser, Debug)]
#[command(name = "ffdi", version, about = "Frequency-domain disentanglement and interaction for domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic benchmark to `<out>/<domain>/<class>/<index>.ppm`.
    GenData(Common),
    /// Split one image into its low- and high-pass parts.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        r: Option<usize>,
    },
    /// Frequency-domain augmentation of every `.ppm` under a directory.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// One leave-one-domain-out run.
    Train(Common),
    /// Accuracy of a checkpoint on every domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// A-distance between two feature CSVs, or between the frequency parts
    /// of every domain pair when no features are given.
    Adist {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        features: Option<Vec<PathBuf>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Held-out accuracy over a list of frequency thresholds.
    SweepR {
        #[command(flatten)]
        common: Common,
        #[arg(long = "r-values", value_delimiter = ',', required = true)]
        r_values: Vec<usize>,
        /// Held-out domains; all domains when omitted.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
    },
    /// The six component configurations over shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Pooled features of a checkpoint at one tap, one row per sample.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "f_E")]
        tap: String,
        /// Restrict to one domain.
        #[arg(long)]
        domain: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig, HarnessError> {
    let mut cfg = TrainConfig::load(common.config.as_deref(), &common.set)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// The dataset named by the config: a directory when `data_dir` is set,
/// otherwise the generated benchmark.
pub fn dataset_for(cfg: &TrainConfig) -> Result<DomainDataset, HarnessError> {
    Ok(match &cfg.data_dir {
        Some(dir) => load_dataset(dir)?,
        None => build_dataset(&DomainSpec::presets(), cfg.model.num_classes, cfg.per_class, cfg.data_seed)?,
    })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ppm_files(root: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io(root))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io(root))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            ppm_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "ppm") {
            out.push(p);
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let ds = build_dataset(&DomainSpec::presets(), cfg.model.num_classes, cfg.per_class, cfg.data_seed)?;
            write_dataset(&ds, &cfg.out_dir)?;
            println!("{} images in {}", ds.len(), cfg.out_dir.display());
        }
        Command::Decompose { common, input, r } => {
            let cfg = load_config(&common)?;
            let r = r.unwrap_or(cfg.model.r);
            let img = read_image(&input)?;
            let (lfi, hfi) = decompose(&img, r);
            let residual = img
                .data()
                .iter()
                .zip(lfi.data().iter().zip(hfi.data()))
                .map(|(&i, (&l, &h))| (l as f64 + h as f64 - i as f64).abs())
                .fold(0.0, f64::max);
            let name = stem(&input);
            let dir = &cfg.out_dir;
            write_image(&dir.join(format!("{name}.lfi.ppm")), &lfi.clipped())?;
            write_image(&dir.join(format!("{name}.hfi.ppm")), &hfi.map(|v| v + 0.5).clipped())?;
            write_atomic(&dir.join(format!("{name}.residual.txt")), format!("{}\n", fmt_sig(residual)).as_bytes())?;
            println!("{}", fmt_sig(residual));
        }
        Command::Augment { common, input } => {
            let cfg = load_config(&common)?;
            let mut files = Vec::new();
            ppm_files(&input, &mut files)?;
            if files.is_empty() {
                return Err(HarnessError::Invalid(format!("no .ppm files under {}", input.display())));
            }
            let mut manifest = CsvTable::new(&["source", "output", "seed"]);
            for (i, f) in files.iter().enumerate() {
                let img = read_image(f)?;
                let seed = mix_seed(mix_seed(cfg.seed, cfg.noise.seed), i as u64);
                let out_img = perturb(&img, &cfg.noise, &mut ChaCha8Rng::seed_from_u64(seed));
                let rel = f.strip_prefix(&input).unwrap_or(f);
                let out_path = cfg.out_dir.join(rel).with_file_name(format!("{}.aug.ppm", stem(f)));
                write_image(&out_path, &out_img)?;
                let out_rel = out_path.strip_prefix(&cfg.out_dir).unwrap_or(&out_path);
                manifest.push(vec![rel.display().to_string(), out_rel.display().to_string(), seed.to_string()]);
            }
            manifest.write(&cfg.out_dir.join("manifest.csv"))?;
            println!("{} images augmented", files.len());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let ds = dataset_for(&cfg)?;
            let outcome = train_lodo(&ds, &cfg)?;
            write_run_outputs(&outcome, &cfg.out_dir)?;
            println!(
                "held-out {} accuracy {} ({})",
                cfg.held_out,
                fmt_sig(outcome.report.held_out_accuracy),
                outcome.report.config_hash
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ds = dataset_for(&cfg)?;
            let model = FfdiModel::<f32>::load(&checkpoint)?;
            let mut t = CsvTable::new(&["domain", "split", "accuracy"]);
            for d in &ds.domains {
                let all: Vec<&Sample> = d.samples.iter().collect();
                let test: Vec<&Sample> = d.split(Split::Test).collect();
                t.push(vec![d.spec.name.clone(), "all".into(), fmt_sig(evaluate(&model, &all)?)]);
                if !test.is_empty() {
                    t.push(vec![d.spec.name.clone(), "test".into(), fmt_sig(evaluate(&model, &test)?)]);
                }
            }
            t.write(&cfg.out_dir.join("eval.csv"))?;
            print!("{}", t.render());
        }
        Command::Adist { common, features, seeds } => {
            let cfg = load_config(&common)?;
            if seeds.is_empty() {
                return Err(HarnessError::Usage("--seeds needs at least one seed".into()));
            }
            match features {
                Some(paths) => {
                    let a = read_feature_csv(&paths[0])?;
                    let b = read_feature_csv(&paths[1])?;
                    let mut total = 0.0;
                    for &s in &seeds {
                        total += a_distance(&a, &b, s)?;
                    }
                    println!("{}", fmt_sig(total / seeds.len() as f64));
                }
                None => {
                    let ds = dataset_for(&cfg)?;
                    let res = frequency_a_distance(&ds, cfg.model.r, &seeds)?;
                    let mut t = CsvTable::new(&["domain_a", "domain_b", "seed", "hfi", "lfi"]);
                    for p in &res.pairs {
                        t.push(vec![p.a.clone(), p.b.clone(), p.seed.to_string(), fmt_sig(p.hfi), fmt_sig(p.lfi)]);
                    }
                    t.write(&cfg.out_dir.join("adist.csv"))?;
                    println!("hfi {} lfi {}", fmt_sig(res.hfi), fmt_sig(res.lfi));
                }
            }
        }
        Command::SweepR {
            common,
            r_values,
            domains,
        } => {
            let cfg = load_config(&common)?;
            let ds = dataset_for(&cfg)?;
            let domains = if domains.is_empty() { ds.domain_names() } else { domains };
            let rows = sweep_r(&ds, &cfg, &r_values, &domains)?;
            let t = sweep_table(&rows);
            t.write(&cfg.out_dir.join("sweep_r.csv"))?;
            print!("{}", t.render());
        }
        Command::Ablate { common, seeds } => {
            let cfg = load_config(&common)?;
            let ds = dataset_for(&cfg)?;
            let rows = ablation_suite(&ds, &cfg, &seeds)?;
            let t = ablation_table(&rows);
            t.write(&cfg.out_dir.join("ablation.csv"))?;
            print!("{}", t.render());
        }
        Command::ExportFeatures {
            common,
            checkpoint,
            tap,
            domain,
        } => {
            let cfg = load_config(&common)?;
            let tap: Tap = tap.parse().map_err(|e: crate::model::ModelError| HarnessError::Usage(e.to_string()))?;
            let ds = dataset_for(&cfg)?;
            let model = FfdiModel::<f32>::load(&checkpoint)?;
            let samples: Vec<&Sample> = match &domain {
                Some(name) => {
                    let d = ds
                        .domain_index(name)
                        .ok_or_else(|| HarnessError::Invalid(format!("unknown domain {name:?}")))?;
                    ds.domains[d].samples.iter().collect()
                }
                None => ds.samples().collect(),
            };
            let t = export_features(&model, &ds, &samples, tap)?;
            t.write(&cfg.out_dir.join("features.csv"))?;
            println!("{} rows", t.rows.len());
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run the subcommand and return
/// the process exit code: 0 on success, 1 on usage errors, 2 on data errors.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
