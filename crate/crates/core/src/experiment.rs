//! Seeded grid runner over {loss, beta, alpha, encoding, seed}.
//!
//! An experiment file is TOML. Grid keys sit at the top level; `[data]`
//! describes where records come from and `[train]` holds the base
//! [`TrainConfig`] that every cell starts from:
//!
//! ```toml
//! loss = ["iwl", "ce"]
//! beta = [0.3]              # only applies to iwl cells
//! alpha = [0.01]
//! encode = ["cme", "raw"]
//! seeds = [0, 1, 2, 3, 4]
//! train_fraction = 0.9
//!
//! [data]                    # synthetic unless `dir` is set
//! head_count = 640
//! noise_sd = 0.5
//!
//! [train]
//! epochs = 30
//! ```
//!
//! Cells are independent and run in parallel; results are merged in grid
//! order, so the table does not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dir, split, Dataset, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::imbalance::{longtail_counts, resample};
use crate::losses::LossKind;
use crate::train::{evaluate, train, EncodeKind, TrainConfig};

/// Where an experiment's records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Dataset directory (manifest.csv + record CSVs). Synthetic when unset.
    pub dir: Option<PathBuf>,
    /// Apply the long-tail profile for each alpha; when false the data is
    /// used as-is and the alpha grid collapses to a single "none" entry.
    pub resample: bool,
    pub seed: u64,
    pub num_classes: usize,
    pub channels: usize,
    pub len: usize,
    pub sample_rate: f64,
    /// Per-class count of the balanced pool before long-tail resampling.
    pub head_count: usize,
    /// Defaults to a geometric ramp from 1 down to 0.01 across channels.
    pub channel_gain: Option<Vec<f64>>,
    pub noise_sd: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            dir: None,
            resample: true,
            seed: 0,
            num_classes: 9,
            channels: 12,
            len: 3000,
            sample_rate: 500.0,
            head_count: 640,
            channel_gain: None,
            noise_sd: 0.5,
        }
    }
}

/// Gains `ratio^(c / (C - 1))`, i.e. spanning `1 / ratio` across channels.
pub fn geometric_gains(channels: usize, ratio: f64) -> Vec<f64> {
    if channels == 1 {
        return vec![1.0];
    }
    (0..channels)
        .map(|c| ratio.powf(c as f64 / (channels - 1) as f64))
        .collect()
}

impl DataSpec {
    fn synth_spec(&self, per_class_counts: Vec<usize>) -> SynthSpec {
        SynthSpec {
            num_classes: self.num_classes,
            channels: self.channels,
            len: self.len,
            sample_rate: self.sample_rate,
            per_class_counts,
            channel_gain: self
                .channel_gain
                .clone()
                .unwrap_or_else(|| geometric_gains(self.channels, 0.01)),
            noise_sd: self.noise_sd,
            seed: self.seed,
            class_names: None,
        }
    }

    /// Dataset for one alpha. Synthetic records are drawn directly at the
    /// long-tail class counts of a balanced `head_count` pool; records are
    /// i.i.d. within a class, so this matches subsampling the pool.
    fn materialize(&self, alpha: Option<f64>, base_dir: &Path) -> Result<Dataset> {
        match &self.dir {
            Some(dir) => {
                let d = load_dir(&crate::data::resolve(base_dir, dir))?;
                match alpha {
                    Some(a) => {
                        let profile = longtail_counts(&d.class_counts(), a)?;
                        resample(&d, &profile, self.seed)
                    }
                    None => Ok(d),
                }
            }
            None => {
                let pool = vec![self.head_count; self.num_classes];
                let counts = match alpha {
                    Some(a) => longtail_counts(&pool, a)?.target_counts().to_vec(),
                    None => pool,
                };
                generate_synthetic(&self.synth_spec(counts))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub loss: Vec<LossKind>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub encode: Vec<EncodeKind>,
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub data: DataSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            loss: vec![],
            beta: vec![],
            alpha: vec![],
            encode: vec![],
            seeds: vec![],
            train_fraction: 0.9,
            data: DataSpec::default(),
            train: TrainConfig::desk(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::parse(path, e))
    }

    fn alphas(&self) -> Vec<Option<f64>> {
        if self.data.resample {
            self.alpha.iter().copied().map(Some).collect()
        } else {
            vec![None]
        }
    }

    /// Grid cells in output order: loss, then beta (IWL only), alpha, encoding.
    /// An empty beta grid falls back to `train.iwl.beta`.
    pub fn cells(&self) -> Vec<Cell> {
        let alphas = self.alphas();
        let mut cells = Vec::new();
        for &loss in &self.loss {
            let betas: Vec<Option<f64>> = match loss {
                LossKind::Iwl if self.beta.is_empty() => vec![Some(self.train.iwl.beta)],
                LossKind::Iwl => self.beta.iter().copied().map(Some).collect(),
                _ => vec![None],
            };
            for &beta in &betas {
                for &alpha in &alphas {
                    for &encode in &self.encode {
                        cells.push(Cell {
                            loss,
                            beta,
                            alpha,
                            encode,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub loss: LossKind,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub encode: EncodeKind,
}

impl Cell {
    fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.loss = self.loss;
        if let Some(beta) = self.beta {
            cfg.iwl.beta = beta;
        }
        cfg.encode = self.encode;
        cfg.seed = seed;
        cfg
    }
}

/// Test-set scores of one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunScore {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub cell: Cell,
    pub runs: Vec<RunScore>,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_sd: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ResultRow {
    fn from_runs(cell: Cell, runs: Vec<RunScore>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
        let (accuracy_mean, accuracy_sd) = mean_sd(&acc);
        let (macro_f1_mean, macro_f1_sd) = mean_sd(&f1);
        Self {
            cell,
            runs,
            accuracy_mean,
            accuracy_sd,
            macro_f1_mean,
            macro_f1_sd,
        }
    }
}

pub const RESULTS_HEADER: &str =
    "loss,beta,alpha,encode,seeds,accuracy_mean,accuracy_sd,macro_f1_mean,macro_f1_sd";

/// Results as CSV, scores in percent with one decimal.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.1},{:.1},{:.1},{:.1}",
            row.cell.loss,
            opt(row.cell.beta),
            opt(row.cell.alpha),
            row.cell.encode,
            row.runs.len(),
            100.0 * row.accuracy_mean,
            100.0 * row.accuracy_sd,
            100.0 * row.macro_f1_mean,
            100.0 * row.macro_f1_sd,
        );
    }
    out
}

fn alpha_key(alpha: Option<f64>) -> Option<u64> {
    alpha.map(f64::to_bits)
}

/// Runs every cell for every seed. Relative `data.dir` paths resolve
/// against `base_dir`.
pub fn run_experiment(spec: &ExperimentSpec, base_dir: &Path) -> Result<Vec<ResultRow>> {
    let cells = spec.cells();
    if cells.is_empty() || spec.seeds.is_empty() {
        return Ok(Vec::new());
    }
    let split_spec = SplitSpec::new(spec.train_fraction, 0)?;

    let mut datasets: BTreeMap<Option<u64>, Dataset> = BTreeMap::new();
    for alpha in spec.alphas() {
        if let std::collections::btree_map::Entry::Vacant(slot) = datasets.entry(alpha_key(alpha)) {
            slot.insert(spec.data.materialize(alpha, base_dir)?);
        }
    }

    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cell = &cells[c];
            let d = &datasets[&alpha_key(cell.alpha)];
            let (train_set, test_set) = split(d, &SplitSpec { seed, ..split_spec })?;
            let (model, _) = train(&train_set, &cell.train_config(&spec.train, seed))?;
            let m = evaluate(&model, &test_set)?;
            Ok(RunScore {
                seed,
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
            })
        })
        .collect::<Result<Vec<RunScore>>>()?;

    Ok(cells
        .iter()
        .zip(scores.chunks(spec.seeds.len()))
        .map(|(cell, runs)| ResultRow::from_runs(*cell, runs.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec::from_toml(
            r#"
loss = ["iwl", "ce"]
beta = [0.3]
alpha = [0.5, 1.0]
encode = ["raw"]
seeds = [1, 2]

[data]
num_classes = 3
channels = 2
len = 60
sample_rate = 20.0
head_count = 10
noise_sd = 0.2

[train]
epochs = 2
batch_size = 8
hidden = [4]
raw.take = 60
raw.width = 10
"#,
        )
        .unwrap()
    }

    #[test]
    fn beta_grid_expands_only_iwl() {
        let mut spec = tiny_spec();
        spec.beta = vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0, 2.0, 3.0, 4.0, 5.0];
        spec.loss = vec![LossKind::Iwl];
        spec.alpha = vec![0.01];
        spec.encode = vec![EncodeKind::Cme];
        assert_eq!(spec.cells().len(), 10);
        spec.loss = vec![LossKind::Iwl, LossKind::Ce];
        assert_eq!(spec.cells().len(), 11);
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        let mut spec = tiny_spec();
        spec.loss.clear();
        let rows = run_experiment(&spec, Path::new(".")).unwrap();
        assert!(rows.is_empty());
        assert_eq!(results_csv(&rows), format!("{RESULTS_HEADER}\n"));
    }

    #[test]
    fn rows_aggregate_every_seed() {
        let spec = tiny_spec();
        let rows = run_experiment(&spec, Path::new(".")).unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            assert_eq!(row.runs.len(), 2);
            let (m, _) = mean_sd(&row.runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            assert_eq!(m, row.accuracy_mean);
        }
        let csv = results_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("iwl,0.3,0.5,raw,2,"));
        assert!(csv
            .lines()
            .nth(3)
            .unwrap()
            .starts_with("ce,none,0.5,raw,2,"));
        assert_eq!(rows, run_experiment(&spec, Path::new(".")).unwrap());
    }

    #[test]
    fn no_resample_collapses_alpha() {
        let mut spec = tiny_spec();
        spec.data.resample = false;
        spec.loss = vec![LossKind::Ce];
        let cells = spec.cells();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].alpha, None);
    }

    #[test]
    fn sample_sd() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn geometric_gain_span() {
        let g = geometric_gains(12, 0.01);
        assert_eq!(g[0], 1.0);
        assert!((g[11] - 0.01).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentSpec::from_toml("losses = [\"ce\"]").is_err());
        assert!(ExperimentSpec::from_toml("loss = [\"mse\"]").is_err());
    }
}
