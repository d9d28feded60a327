//! Per-prefix supervision data.
//!
//! A [`SupervisedSequence`] carries one label row per position: row `t` is the
//! ground truth for the prefix `tokens[0..=t]`. Synthetic tasks define those
//! labels as exact functions of the prefix.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Alphabet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSequence {
    pub tokens: Vec<usize>,
    pub labels: Vec<Vec<f64>>,
}

impl SupervisedSequence {
    pub fn n_objectives(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, n_objectives: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.labels.len() != self.tokens.len() {
            return Err(Error::Labels(format!(
                "{} label rows for {} tokens",
                self.labels.len(),
                self.tokens.len()
            )));
        }
        for row in &self.labels {
            if row.len() != n_objectives {
                return Err(Error::Labels(format!(
                    "label row has {} values, supervisor predicts {n_objectives}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Labels(format!("label {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn label_tensor(&self) -> Tensor {
        let n = self.n_objectives();
        Tensor::new(
            vec![self.labels.len(), n],
            self.labels.iter().flatten().copied().collect(),
        )
        .expect("rectangular labels")
    }
}

/// A set of tokens, written either as ids or as a string of characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenSet {
    Ids(Vec<usize>),
    Chars(String),
}

impl TokenSet {
    pub fn resolve(&self, alphabet: Option<&Alphabet>) -> Result<Vec<usize>> {
        match self {
            TokenSet::Ids(ids) => Ok(ids.clone()),
            TokenSet::Chars(s) => {
                let a = alphabet.ok_or_else(|| {
                    Error::Config("token set given as characters but no alphabet is loaded".into())
                })?;
                a.encode(s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    /// 1 once any forbidden token has appeared in the prefix.
    ForbiddenToken { forbidden: TokenSet },
    /// Parity of the number of target tokens in the prefix.
    PrefixParity { targets: TokenSet },
    /// 1 when the prefix holds more positive than negative tokens.
    SentimentLexicon {
        positive: TokenSet,
        negative: TokenSet,
    },
}

/// A [`TaskKind`] with its token sets resolved to ids.
#[derive(Debug, Clone, PartialEq)]
pub enum PrefixTask {
    ForbiddenToken(Vec<usize>),
    PrefixParity(Vec<usize>),
    SentimentLexicon {
        positive: Vec<usize>,
        negative: Vec<usize>,
    },
}

impl TaskKind {
    pub fn resolve(&self, alphabet: Option<&Alphabet>) -> Result<PrefixTask> {
        Ok(match self {
            TaskKind::ForbiddenToken { forbidden } => {
                PrefixTask::ForbiddenToken(forbidden.resolve(alphabet)?)
            }
            TaskKind::PrefixParity { targets } => {
                PrefixTask::PrefixParity(targets.resolve(alphabet)?)
            }
            TaskKind::SentimentLexicon { positive, negative } => PrefixTask::SentimentLexicon {
                positive: positive.resolve(alphabet)?,
                negative: negative.resolve(alphabet)?,
            },
        })
    }
}

impl PrefixTask {
    /// Label of every prefix of `tokens`, in one left-to-right scan.
    pub fn label_prefixes(&self, tokens: &[usize]) -> Vec<f64> {
        match self {
            PrefixTask::ForbiddenToken(set) => {
                let mut seen = false;
                tokens
                    .iter()
                    .map(|t| {
                        seen |= set.contains(t);
                        f64::from(u8::from(seen))
                    })
                    .collect()
            }
            PrefixTask::PrefixParity(set) => {
                let mut odd = false;
                tokens
                    .iter()
                    .map(|t| {
                        odd ^= set.contains(t);
                        f64::from(u8::from(odd))
                    })
                    .collect()
            }
            PrefixTask::SentimentLexicon { positive, negative } => {
                let mut balance = 0i64;
                tokens
                    .iter()
                    .map(|t| {
                        balance +=
                            i64::from(positive.contains(t)) - i64::from(negative.contains(t));
                        f64::from(u8::from(balance > 0))
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum CorpusSource {
    /// Random windows of a UTF-8 text file, encoded with the alphabet.
    Text { path: PathBuf },
    /// Random windows of inline text.
    Inline { text: String },
    /// Independent uniform token ids.
    Uniform { vocab_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// One objective per task, in order.
    pub tasks: Vec<TaskKind>,
    pub corpus: CorpusSource,
    #[serde(default = "default_num_sequences")]
    pub num_sequences: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Fraction of sequences assigned to the training split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_num_sequences() -> usize {
    640
}
fn default_seq_len() -> usize {
    32
}
fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SupervisedSequence>,
    pub val: Vec<SupervisedSequence>,
}

/// Labels every prefix of `tokens` for each task.
pub fn label_sequence(tasks: &[PrefixTask], tokens: &[usize]) -> SupervisedSequence {
    let columns: Vec<Vec<f64>> = tasks.iter().map(|t| t.label_prefixes(tokens)).collect();
    let labels = (0..tokens.len())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect();
    SupervisedSequence {
        tokens: tokens.to_vec(),
        labels,
    }
}

pub fn generate_synthetic_dataset(
    spec: &SyntheticTaskSpec,
    alphabet: Option<&Alphabet>,
) -> Result<Dataset> {
    if spec.tasks.is_empty() {
        return Err(Error::Config("synthetic task list is empty".into()));
    }
    if spec.seq_len == 0 || spec.num_sequences == 0 {
        return Err(Error::Config(
            "seq_len and num_sequences must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config(format!(
            "train_fraction {} outside [0, 1]",
            spec.train_fraction
        )));
    }
    let tasks: Vec<PrefixTask> = spec
        .tasks
        .iter()
        .map(|t| t.resolve(alphabet))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sequences: Vec<Vec<usize>> = match &spec.corpus {
        CorpusSource::Uniform { vocab_size } => {
            if *vocab_size == 0 {
                return Err(Error::Empty("uniform corpus vocabulary"));
            }
            (0..spec.num_sequences)
                .map(|_| {
                    (0..spec.seq_len)
                        .map(|_| rng.random_range(0..*vocab_size))
                        .collect()
                })
                .collect()
        }
        CorpusSource::Text { path } => {
            let text = std::fs::read_to_string(path)?;
            windows(&encode_corpus(&text, alphabet)?, spec, &mut rng)?
        }
        CorpusSource::Inline { text } => windows(&encode_corpus(text, alphabet)?, spec, &mut rng)?,
    };
    let n_train = (spec.train_fraction * sequences.len() as f64).round() as usize;
    let mut labelled: Vec<SupervisedSequence> = sequences
        .iter()
        .map(|s| label_sequence(&tasks, s))
        .collect();
    let val = labelled.split_off(n_train.min(labelled.len()));
    Ok(Dataset {
        train: labelled,
        val,
    })
}

fn encode_corpus(text: &str, alphabet: Option<&Alphabet>) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let a = alphabet.ok_or_else(|| Error::Config("text corpus needs an alphabet".into()))?;
    a.encode(text)
}

fn windows(
    tokens: &[usize],
    spec: &SyntheticTaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if tokens.len() < spec.seq_len {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than seq_len {}",
            tokens.len(),
            spec.seq_len
        )));
    }
    let last_start = tokens.len() - spec.seq_len;
    Ok((0..spec.num_sequences)
        .map(|_| {
            let s = rng.random_range(0..=last_start);
            tokens[s..s + spec.seq_len].to_vec()
        })
        .collect())
}

/// Cuts `tokens` into next-token training sequences of `seq_len + 1` ids
/// with stride `seq_len`, so consecutive windows share one boundary token.
/// A short tail is kept when it still holds at least two ids.
pub fn pretrain_windows(tokens: &[usize], seq_len: usize) -> Vec<Vec<usize>> {
    if seq_len == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + seq_len + 1).min(tokens.len());
        out.push(tokens[start..end].to_vec());
        start += seq_len;
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
