//! The paired model and supervisor training.
//!
//! Training runs in two phases. The language component is pretrained and
//! frozen first; afterwards only `doppel.*` parameters are updated, against
//! per-prefix labels. Because the language side never changes in phase two,
//! its taps are computed once per sequence and reused every epoch.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::SupervisedSequence;
use crate::doppel::{DoppelConfig, DoppelgangerModel};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::language::{collect_grads, weighted_sum, LanguageModel, LayerTaps};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::tokenizer::Alphabet;

pub use crate::language::PretrainConfig;

#[derive(Debug)]
pub struct BicameralModel {
    pub language: LanguageModel,
    pub doppel: DoppelgangerModel,
    language_passes: AtomicUsize,
}

impl Clone for BicameralModel {
    fn clone(&self) -> Self {
        Self {
            language: self.language.clone(),
            doppel: self.doppel.clone(),
            language_passes: AtomicUsize::new(0),
        }
    }
}

impl BicameralModel {
    pub fn new(language: LanguageModel, doppel: DoppelgangerModel) -> Result<Self> {
        let lm = language.config();
        if doppel.n_layers() != lm.n_layers || doppel.d_model() != lm.d_model {
            return Err(Error::TapMismatch {
                expected_layers: doppel.n_layers(),
                expected_width: doppel.d_model(),
                found_layers: lm.n_layers,
                found_width: lm.d_model,
            });
        }
        Ok(Self {
            language,
            doppel,
            language_passes: AtomicUsize::new(0),
        })
    }

    /// Fresh supervisor attached to `language`.
    pub fn attach(language: LanguageModel, config: DoppelConfig, seed: u64) -> Result<Self> {
        let doppel = DoppelgangerModel::new(config, language.config(), seed)?;
        Self::new(language, doppel)
    }

    /// Number of language forward passes run through this model.
    pub fn language_passes(&self) -> usize {
        self.language_passes.load(Ordering::Relaxed)
    }

    /// One language pass; the taps it produces feed the supervisor directly.
    /// Returns `(logits [T, V], scores [T, n])`.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, Tensor)> {
        let (logits, taps) = self.language_forward(tokens)?;
        let scores = self.doppel.forward(&taps)?;
        Ok((logits, scores))
    }

    pub fn language_forward(&self, tokens: &[usize]) -> Result<(Tensor, LayerTaps)> {
        self.language_passes.fetch_add(1, Ordering::Relaxed);
        self.language.forward(tokens)
    }

    /// Supervisor scores for every prefix of `tokens`.
    pub fn score_prefixes(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.1)
    }

    pub fn to_checkpoint(
        &self,
        alphabet: Option<&Alphabet>,
        run_config: Option<serde_json::Value>,
    ) -> Checkpoint {
        let mut tensors = self.language.to_records();
        tensors.extend(self.doppel.to_records());
        Checkpoint {
            meta: CheckpointMeta {
                lm: self.language.config().clone(),
                doppel: Some(self.doppel.config().clone()),
                language_frozen: self.language.is_frozen(),
                language_checksum: self.language.frozen_checksum(),
                alphabet: alphabet.map(|a| a.chars().to_vec()),
                run_config,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let language = language_from_checkpoint(ckpt)?;
        let dcfg = ckpt
            .meta
            .doppel
            .clone()
            .ok_or_else(|| Error::Checkpoint("no supervisor section".into()))?;
        let doppel =
            DoppelgangerModel::from_records(dcfg, language.config(), ckpt.section("doppel"))?;
        Self::new(language, doppel)
    }
}

/// Checkpoint holding only the language component.
pub fn language_checkpoint(
    lm: &LanguageModel,
    alphabet: Option<&Alphabet>,
    run_config: Option<serde_json::Value>,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            lm: lm.config().clone(),
            doppel: None,
            language_frozen: lm.is_frozen(),
            language_checksum: lm.frozen_checksum(),
            alphabet: alphabet.map(|a| a.chars().to_vec()),
            run_config,
        },
        tensors: lm.to_records(),
    }
}

/// Restores the language section, including its frozen state. A recorded
/// freeze checksum must match the stored weights.
pub fn language_from_checkpoint(ckpt: &Checkpoint) -> Result<LanguageModel> {
    let mut lm = LanguageModel::from_records(ckpt.meta.lm.clone(), ckpt.section("lm"))?;
    if ckpt.meta.language_frozen {
        if let Some(sum) = ckpt.meta.language_checksum {
            if sum != lm.checksum() {
                return Err(Error::Checkpoint(
                    "language weights differ from the checksum recorded at freeze".into(),
                ));
            }
        }
        lm.set_frozen(ckpt.meta.language_checksum);
    }
    Ok(lm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoppelTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DoppelTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            adam: AdamConfig::default(),
            patience: 5,
            seed: 0,
        }
    }
}

/// One line of the training log. Epoch 0 is the untrained baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_score: f64,
    pub mean_label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub positions: usize,
    pub bce: f64,
    /// Per objective: fraction of positions where `score >= 0.5` agrees with
    /// `label >= 0.5`.
    pub accuracy: Vec<f64>,
    /// Per objective, ten equal-width score buckets.
    pub calibration: Vec<Vec<CalibrationBucket>>,
}

const CALIBRATION_BUCKETS: usize = 10;

fn check_data(bm: &BicameralModel, data: &[SupervisedSequence]) -> Result<()> {
    let n = bm.doppel.config().n_objectives;
    for s in data {
        s.validate(n)?;
        bm.language.config().check_tokens(&s.tokens)?;
    }
    Ok(())
}

/// Scores for precomputed taps, as plain values.
fn scores_for(dm: &DoppelgangerModel, taps: &LayerTaps) -> Result<Tensor> {
    dm.forward(taps)
}

fn metrics_from(
    dm: &DoppelgangerModel,
    data: &[SupervisedSequence],
    taps: &[LayerTaps],
) -> Result<Metrics> {
    let n = dm.config().n_objectives;
    let mut positions = 0usize;
    let mut bce_total = 0.0;
    let mut correct = vec![0usize; n];
    let mut buckets = vec![vec![(0usize, 0.0f64, 0.0f64); CALIBRATION_BUCKETS]; n];
    for (seq, tp) in data.iter().zip(taps) {
        let scores = scores_for(dm, tp)?;
        let mut g = Graph::new();
        let p = g.constant(scores.clone());
        let bce = g.binary_cross_entropy(p, &seq.label_tensor())?;
        bce_total += g.value(bce).item()? * seq.tokens.len() as f64;
        positions += seq.tokens.len();
        for (t, labels) in seq.labels.iter().enumerate() {
            for (i, &y) in labels.iter().enumerate() {
                let s = scores.row(t)[i];
                if (s >= 0.5) == (y >= 0.5) {
                    correct[i] += 1;
                }
                let b = ((s * CALIBRATION_BUCKETS as f64) as usize).min(CALIBRATION_BUCKETS - 1);
                let e = &mut buckets[i][b];
                e.0 += 1;
                e.1 += s;
                e.2 += y;
            }
        }
    }
    if positions == 0 {
        return Err(Error::Empty("evaluation data"));
    }
    let calibration = buckets
        .into_iter()
        .map(|obj| {
            obj.into_iter()
                .enumerate()
                .map(|(b, (count, ss, ys))| CalibrationBucket {
                    lo: b as f64 / CALIBRATION_BUCKETS as f64,
                    hi: (b + 1) as f64 / CALIBRATION_BUCKETS as f64,
                    count,
                    mean_score: if count > 0 { ss / count as f64 } else { 0.0 },
                    mean_label: if count > 0 { ys / count as f64 } else { 0.0 },
                })
                .collect()
        })
        .collect();
    Ok(Metrics {
        positions,
        bce: bce_total / positions as f64,
        accuracy: correct
            .iter()
            .map(|&c| c as f64 / positions as f64)
            .collect(),
        calibration,
    })
}

fn compute_taps(lm: &LanguageModel, data: &[SupervisedSequence]) -> Result<Vec<LayerTaps>> {
    data.iter().map(|s| Ok(lm.forward(&s.tokens)?.1)).collect()
}

/// Per-position accuracy, BCE and calibration of the supervisor on `data`.
pub fn evaluate(bm: &BicameralModel, data: &[SupervisedSequence]) -> Result<Metrics> {
    check_data(bm, data)?;
    let taps = compute_taps(&bm.language, data)?;
    metrics_from(&bm.doppel, data, &taps)
}

/// Trains the supervisor on per-prefix labels with the language component
/// held fixed. Returns one log entry per epoch, starting with the baseline.
///
/// With a validation set, training stops after `patience` epochs without a
/// validation improvement and the best parameters are kept.
pub fn train_doppelganger(
    bm: &mut BicameralModel,
    train: &[SupervisedSequence],
    val: &[SupervisedSequence],
    cfg: &DoppelTrainConfig,
) -> Result<Vec<EpochLog>> {
    if !bm.language.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if train.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    check_data(bm, train)?;
    check_data(bm, val)?;

    let train_taps = compute_taps(&bm.language, train)?;
    let val_taps = compute_taps(&bm.language, val)?;
    let labels: Vec<Tensor> = train.iter().map(SupervisedSequence::label_tensor).collect();

    let snapshot =
        |dm: &DoppelgangerModel, epoch: usize, train_loss: Option<f64>| -> Result<EpochLog> {
            let train_loss = match train_loss {
                Some(l) => l,
                None => metrics_from(dm, train, &train_taps)?.bce,
            };
            let (val_loss, val_acc) = if val.is_empty() {
                (None, Vec::new())
            } else {
                let m = metrics_from(dm, val, &val_taps)?;
                (Some(m.bce), m.accuracy)
            };
            Ok(EpochLog {
                epoch,
                train_loss,
                val_loss,
                val_acc,
            })
        };

    let mut log = vec![snapshot(&bm.doppel, 0, None)?];
    let mut best = (
        log[0].val_loss.unwrap_or(f64::INFINITY),
        bm.doppel.params.clone(),
    );
    let mut since_best = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let positions: usize = batch.iter().map(|&i| train[i].tokens.len()).sum();
            let mut g = Graph::new();
            let p = bm.doppel.bind(&mut g, true);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let taps: Vec<Var> = train_taps[i]
                    .iter()
                    .map(|t| g.constant(t.clone()))
                    .collect();
                let scores = bm.doppel.forward_graph(&p, &mut g, &taps)?;
                let bce = g.binary_cross_entropy(scores, &labels[i])?;
                terms.push((bce, train[i].tokens.len() as f64 / positions as f64));
            }
            let loss = weighted_sum(&mut g, &terms)?;
            total += g.value(loss).item()? * positions as f64;
            count += positions;
            g.backward(loss)?;
            let grads = collect_grads(&g, p.named().into_iter().map(|(_, v)| *v));
            adam.step(&mut bm.doppel.params.leaves_mut(), &grads)?;
        }
        let entry = snapshot(&bm.doppel, epoch, Some(total / count as f64))?;
        let val_loss = entry.val_loss;
        log.push(entry);
        if let Some(v) = val_loss {
            if v < best.0 {
                best = (v, bm.doppel.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if !val.is_empty() {
        bm.doppel.params = best.1;
    }
    Ok(log)
}
