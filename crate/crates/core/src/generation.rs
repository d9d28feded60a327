//! Autoregressive decoding with per-token supervision scores.
//!
//! Every step runs one full language pass over the current sequence (no
//! cache). The logits of that pass pick the next token and its taps score
//! the position that pass added, so each event costs exactly one pass.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Alphabet;
use crate::training::BicameralModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Used by `temperature` and `top_k`.
    pub temperature: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            k: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.strategy {
            Strategy::Greedy => Ok(()),
            _ if !(self.temperature > 0.0 && self.temperature.is_finite()) => Err(Error::Config(
                format!("temperature must be positive, got {}", self.temperature),
            )),
            Strategy::TopK if self.k == 0 || self.k > vocab_size => Err(Error::Config(format!(
                "top_k needs 1 <= k <= {vocab_size}, got {}",
                self.k
            ))),
            _ => Ok(()),
        }
    }
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits[ids] / temperature)` and returns the chosen id.
fn draw<R: Rng + ?Sized>(logits: &[f64], ids: &[usize], temperature: f64, rng: &mut R) -> usize {
    let max = ids
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = ids
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&id, &w) in ids.iter().zip(&weights) {
        if u < w {
            return id;
        }
        u -= w;
    }
    // rounding left u past the last positive weight
    ids.iter()
        .zip(&weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map_or(ids[0], |(&id, _)| id)
}

/// Picks the next token from one logits row.
///
/// Greedy takes the argmax (lowest id on ties). Temperature draws from
/// `softmax(logits / τ)`. Top-k draws from the same distribution restricted
/// to the `k` largest logits and renormalized.
pub fn sample<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    cfg.validate(logits.len())?;
    Ok(match cfg.strategy {
        Strategy::Greedy => argmax(logits),
        Strategy::Temperature => {
            let ids: Vec<usize> = (0..logits.len()).collect();
            draw(logits, &ids, cfg.temperature, rng)
        }
        Strategy::TopK => {
            let mut ids: Vec<usize> = (0..logits.len()).collect();
            ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            ids.truncate(cfg.k);
            draw(logits, &ids, cfg.temperature, rng)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEvent {
    pub pos: usize,
    pub token: String,
    pub id: usize,
    /// Supervisor scores for the prefix ending at `pos`; empty when the
    /// session runs without the supervisor.
    pub scores: Vec<f64>,
}

/// Pull-based event stream. Prompt positions come first, all scored by the
/// first pass; every later event is one generated token.
pub struct GenerationSession<'a> {
    model: &'a BicameralModel,
    alphabet: Option<&'a Alphabet>,
    sampler: SamplerConfig,
    rng: ChaCha8Rng,
    tokens: Vec<usize>,
    max_new: usize,
    generated: usize,
    with_scores: bool,
    started: bool,
    failed: bool,
    queue: VecDeque<GenerationEvent>,
    last_logits: Vec<f64>,
}

impl<'a> GenerationSession<'a> {
    pub fn new(
        model: &'a BicameralModel,
        prompt: &[usize],
        max_new: usize,
        sampler: SamplerConfig,
    ) -> Result<Self> {
        let cfg = model.language.config();
        cfg.check_tokens(prompt)?;
        let total = prompt.len() + max_new;
        if total > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: total,
                max: cfg.max_seq_len,
            });
        }
        sampler.validate(cfg.vocab_size)?;
        Ok(Self {
            model,
            alphabet: None,
            rng: ChaCha8Rng::seed_from_u64(sampler.seed),
            sampler,
            tokens: prompt.to_vec(),
            max_new,
            generated: 0,
            with_scores: true,
            started: false,
            failed: false,
            queue: VecDeque::new(),
            last_logits: Vec::new(),
        })
    }

    /// Render token text through `alphabet` instead of decimal ids.
    pub fn with_alphabet(mut self, alphabet: &'a Alphabet) -> Self {
        self.alphabet = Some(alphabet);
        self
    }

    /// Skip the supervisor; events carry empty score vectors.
    pub fn without_scores(mut self) -> Self {
        self.with_scores = false;
        self
    }

    /// The prompt followed by every token generated so far.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    fn pass(&mut self) -> Result<Option<Tensor>> {
        let (logits, scores) = if self.with_scores {
            let (l, s) = self.model.forward(&self.tokens)?;
            (l, Some(s))
        } else {
            (self.model.language_forward(&self.tokens)?.0, None)
        };
        self.last_logits = logits.row(logits.rows() - 1).to_vec();
        Ok(scores)
    }

    fn event(&self, pos: usize, scores: Option<&Tensor>) -> Result<GenerationEvent> {
        let id = self.tokens[pos];
        let token = match self.alphabet {
            Some(a) => a.token(id)?.to_string(),
            None => id.to_string(),
        };
        Ok(GenerationEvent {
            pos,
            token,
            id,
            scores: scores.map_or_else(Vec::new, |s| s.row(pos).to_vec()),
        })
    }

    fn advance(&mut self) -> Result<Option<GenerationEvent>> {
        if let Some(e) = self.queue.pop_front() {
            return Ok(Some(e));
        }
        if !self.started {
            self.started = true;
            let scores = self.pass()?;
            for pos in 0..self.tokens.len() {
                let e = self.event(pos, scores.as_ref())?;
                self.queue.push_back(e);
            }
            return Ok(self.queue.pop_front());
        }
        if self.generated == self.max_new {
            return Ok(None);
        }
        let next = sample(&self.last_logits, &self.sampler, &mut self.rng)?;
        self.tokens.push(next);
        self.generated += 1;
        let scores = self.pass()?;
        self.event(self.tokens.len() - 1, scores.as_ref()).map(Some)
    }
}

impl Iterator for GenerationSession<'_> {
    type Item = Result<GenerationEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.advance() {
            Ok(e) => e.map(Ok),
            Err(err) => {
                self.failed = true;
                Some(Err(err))
            }
        }
    }
}

/// Starts a session; see [`GenerationSession`].
pub fn generate<'a>(
    model: &'a BicameralModel,
    prompt: &[usize],
    max_new: usize,
    sampler: SamplerConfig,
) -> Result<GenerationSession<'a>> {
    GenerationSession::new(model, prompt, max_new, sampler)
}
