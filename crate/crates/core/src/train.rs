//! Deterministic training and evaluation of the MLP classifier.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{window_record, Dataset, EcgRecord};
use crate::equalizer::{cme_pipeline_with, resample_linear, CmeConfig};
use crate::error::{Error, Result};
use crate::losses::{CbParams, FocalParams, IwlConfig, LdamParams, LossKind, LossSettings};
use crate::metrics::Metrics;
use crate::nn::{Adam, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeKind {
    /// CME scaling followed by image encoding.
    Cme,
    /// Windowed amplitudes without any channel scaling.
    Raw,
}

impl EncodeKind {
    pub fn name(self) -> &'static str {
        match self {
            EncodeKind::Cme => "cme",
            EncodeKind::Raw => "raw",
        }
    }
}

impl std::str::FromStr for EncodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cme" => Ok(EncodeKind::Cme),
            "raw" => Ok(EncodeKind::Raw),
            other => Err(Error::Config(format!(
                "unknown encoding {other:?}; expected cme or raw"
            ))),
        }
    }
}

impl std::fmt::Display for EncodeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw-signal path: `window(skip, take)`, optionally resampled per channel
/// to `width` samples, then flattened channel by channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub skip: usize,
    pub take: usize,
    pub width: Option<usize>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            skip: 0,
            take: 3000,
            width: None,
        }
    }
}

/// How records become network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub encode: EncodeKind,
    pub cme: CmeConfig,
    pub raw: RawConfig,
}

impl Featurizer {
    pub fn features(&self, record: &EcgRecord) -> Result<Vec<f64>> {
        match self.encode {
            EncodeKind::Cme => Ok(cme_pipeline_with(record, &self.cme)?.into_pixels()),
            EncodeKind::Raw => {
                let w = window_record(record, self.raw.skip, self.raw.take)?;
                Ok(match self.raw.width {
                    Some(width) => w
                        .channels()
                        .flat_map(|ch| resample_linear(ch, width))
                        .collect(),
                    None => w.samples().to_vec(),
                })
            }
        }
    }

    /// Features of every record, in record order.
    pub fn features_all(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        dataset
            .records()
            .par_iter()
            .map(|r| self.features(r))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub iwl: IwlConfig,
    pub focal: FocalParams,
    pub cb: CbParams,
    pub ldam: LdamParams,
    pub encode: EncodeKind,
    pub cme: CmeConfig,
    pub raw: RawConfig,
}

impl Default for TrainConfig {
    /// 150 epochs, learning rate 0.001, batch size 64, IWL with beta 0.3 on
    /// CME images.
    fn default() -> Self {
        let loss = LossSettings::default();
        Self {
            epochs: 150,
            learning_rate: 0.001,
            batch_size: 64,
            seed: 0,
            hidden: vec![64, 32],
            loss: loss.loss,
            iwl: loss.iwl,
            focal: loss.focal,
            cb: loss.cb,
            ldam: loss.ldam,
            encode: EncodeKind::Cme,
            cme: CmeConfig::default(),
            raw: RawConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The defaults with the epoch count cut to 30.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            loss: self.loss,
            iwl: self.iwl,
            focal: self.focal,
            cb: self.cb,
            ldam: self.ldam,
        }
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer {
            encode: self.encode,
            cme: self.cme,
            raw: self.raw,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// A trained network plus everything needed to featurize new records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub mlp: Mlp,
    pub featurizer: Featurizer,
    pub class_names: Vec<String>,
}

impl Model {
    pub fn predict(&self, record: &EcgRecord) -> Result<usize> {
        Ok(self
            .mlp
            .forward(&self.featurizer.features(record)?)?
            .argmax())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::parse(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean training loss of each epoch, averaged over records.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam on the chosen loss. Batch order is reshuffled every epoch
/// from the configured seed.
pub fn train(train_set: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate()?;
    let featurizer = cfg.featurizer();
    let inputs = featurizer.features_all(train_set)?;
    let targets = train_set.labels()?;
    let loss = cfg.loss_settings().build(&train_set.class_counts())?;

    let mut sizes = vec![inputs[0].len()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(train_set.num_classes());
    let mut mlp = Mlp::new(&sizes, cfg.seed)?;
    let mut adam = Adam::new(mlp.params().len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ts: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (value, grads) = mlp.backward(&xs, &ts, &loss)?;
            epoch_total += value * batch.len() as f64;
            adam.step(mlp.params_mut(), &grads, cfg.learning_rate);
        }
        log.epoch_losses.push(epoch_total / inputs.len() as f64);
    }
    Ok((
        Model {
            mlp,
            featurizer,
            class_names: train_set.class_names().to_vec(),
        },
        log,
    ))
}

pub fn evaluate(model: &Model, test_set: &Dataset) -> Result<Metrics> {
    let truth = test_set.labels()?;
    let predicted = test_set
        .records()
        .par_iter()
        .map(|r| model.predict(r))
        .collect::<Result<Vec<usize>>>()?;
    Ok(Metrics::from_predictions(
        &truth,
        &predicted,
        test_set.num_classes(),
    ))
}
