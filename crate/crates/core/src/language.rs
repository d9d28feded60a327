//! The language component: a pre-norm decoder-only transformer that produces
//! next-token logits and exposes every attention module's output as a tap.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::payload_checksum;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{positional_table, AttentionBlock, Linear, Norm, INIT_STD};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Number of attention modules.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("lm.{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "lm.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageParams<P = Tensor> {
    /// `[vocab, d_model]`
    pub embed: P,
    pub blocks: Vec<AttentionBlock<P>>,
    pub final_norm: Norm<P>,
    /// `d_model -> vocab`, not tied to `embed`.
    pub head: Linear<P>,
}

impl<P> LanguageParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LanguageParams<Q> {
        LanguageParams {
            embed: f(&self.embed),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            head: self.head.map(f),
        }
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("lm.embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("lm.blocks.{i}")));
        }
        out.extend(self.final_norm.named("lm.final_norm"));
        out.extend(self.head.named("lm.head"));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend(b.leaves_mut());
        }
        out.extend(self.final_norm.leaves_mut());
        out.extend(self.head.leaves_mut());
        out
    }
}

/// Probe values for the supervisor: index 0 is the positionally-encoded
/// embedding, index `k` (1..=N) the output of attention module `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTaps {
    taps: Vec<Tensor>,
}

impl LayerTaps {
    pub fn new(taps: Vec<Tensor>) -> Result<Self> {
        let first = taps.first().ok_or(Error::Empty("layer taps"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Config(format!("tap must be 2-D, got {shape:?}")));
        }
        if let Some(bad) = taps.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::Shape {
                op: "layer_taps",
                lhs: shape,
                rhs: bad.shape().to_vec(),
            });
        }
        Ok(Self { taps })
    }

    /// Number of taps, `N + 1`.
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Number of attention modules that produced these taps.
    pub fn n_layers(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.taps[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.taps[0].shape()[1]
    }

    pub fn get(&self, k: usize) -> &Tensor {
        &self.taps[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.taps.iter()
    }

    /// Taps restricted to positions `0..t`.
    pub fn prefix(&self, t: usize) -> LayerTaps {
        LayerTaps {
            taps: self.taps.iter().map(|x| x.slice_rows(0, t)).collect(),
        }
    }
}

/// Adds the fixed sinusoidal position table to `[T, d_model]` embeddings.
pub fn positional_encode(embeddings: &Tensor, max_seq_len: usize) -> Result<Tensor> {
    if embeddings.rank() != 2 {
        return Err(Error::Config(format!(
            "positional_encode expects [T, d], got {:?}",
            embeddings.shape()
        )));
    }
    let (t, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    if t > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: t,
            max: max_seq_len,
        });
    }
    let pe = positional_table(t, d);
    let data = embeddings
        .data()
        .iter()
        .zip(pe.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(vec![t, d], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Window length used when cutting a corpus into training sequences.
    pub seq_len: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            seq_len: 64,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    config: LMConfig,
    params: LanguageParams,
    frozen: bool,
    frozen_checksum: Option<u64>,
}

impl LanguageModel {
    pub fn new(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embed = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| AttentionBlock::init(d, config.d_ff, &mut rng))
            .collect();
        let params = LanguageParams {
            embed,
            blocks,
            final_norm: Norm::init(d),
            head: Linear::init(d, config.vocab_size, &mut rng),
        };
        Ok(Self {
            config,
            params,
            frozen: false,
            frozen_checksum: None,
        })
    }

    pub fn from_params(config: LMConfig, params: LanguageParams) -> Result<Self> {
        config.validate()?;
        let expected = Self::new(config.clone(), 0)?;
        let shapes = |p: &LanguageParams| -> Vec<Vec<usize>> {
            p.named().iter().map(|(_, t)| t.shape().to_vec()).collect()
        };
        if shapes(&expected.params) != shapes(&params) {
            return Err(Error::Config(
                "language parameter shapes do not match config".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            frozen: false,
            frozen_checksum: None,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn params(&self) -> &LanguageParams {
        &self.params
    }

    /// Mutable access to the weights; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut LanguageParams> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.frozen_checksum = Some(self.checksum());
    }

    /// Restores a frozen state read from a checkpoint.
    pub(crate) fn set_frozen(&mut self, checksum: Option<u64>) {
        self.frozen = true;
        self.frozen_checksum = checksum;
    }

    pub fn frozen_checksum(&self) -> Option<u64> {
        self.frozen_checksum
    }

    pub fn checksum(&self) -> u64 {
        payload_checksum(self.params.named().into_iter().map(|(_, t)| t))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LanguageParams<Var> {
        self.params.map(&mut |t| g.leaf(t.clone(), trainable))
    }

    /// Builds the forward pass into `g`. Returns the logits node and the
    /// `N + 1` tap nodes.
    pub fn forward_graph(
        config: &LMConfig,
        p: &LanguageParams<Var>,
        g: &mut Graph,
        tokens: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        config.check_tokens(tokens)?;
        let emb = g.embedding(p.embed, tokens)?;
        let pe = g.constant(positional_table(tokens.len(), config.d_model));
        let mut x = g.add(emb, pe)?;
        let mut taps = Vec::with_capacity(config.n_layers + 1);
        taps.push(x);
        for block in &p.blocks {
            x = block.forward(g, x, config.n_heads)?;
            taps.push(x);
        }
        let h = p.final_norm.forward(g, x)?;
        let logits = p.head.forward(g, h)?;
        Ok((logits, taps))
    }

    /// Logits `[T, V]` and taps for `tokens`. Pure in the parameters.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, LayerTaps)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (logits, taps) = Self::forward_graph(&self.config, &p, &mut g, tokens)?;
        let taps = LayerTaps::new(taps.into_iter().map(|v| g.value(v).clone()).collect())?;
        Ok((g.value(logits).clone(), taps))
    }

    /// Mean next-token cross-entropy over all predicted positions.
    pub fn loss(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in corpus.iter().filter(|s| s.len() >= 2) {
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let n = seq.len() - 1;
            let (logits, _) = Self::forward_graph(&self.config, &p, &mut g, &seq[..n])?;
            let ce = g.cross_entropy(logits, &seq[1..])?;
            total += g.value(ce).item()? * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::Empty("corpus has no sequence of length >= 2"));
        }
        Ok(total / count as f64)
    }

    /// Next-token training on `corpus`. Returns the loss before training
    /// followed by the mean training loss of each epoch.
    pub fn pretrain(&mut self, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus[i].len() >= 2)
            .collect();
        if order.is_empty() {
            return Err(Error::Empty("corpus has no sequence of length >= 2"));
        }
        let mut log = vec![self.loss(corpus)?];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(cfg.adam);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            let mut epoch_count = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let positions: usize = batch.iter().map(|&i| corpus[i].len() - 1).sum();
                let mut g = Graph::new();
                let p = self.bind(&mut g, true);
                let mut terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let seq = &corpus[i];
                    let n = seq.len() - 1;
                    let (logits, _) = Self::forward_graph(&self.config, &p, &mut g, &seq[..n])?;
                    let ce = g.cross_entropy(logits, &seq[1..])?;
                    terms.push((ce, n as f64 / positions as f64));
                }
                let loss = weighted_sum(&mut g, &terms)?;
                epoch_total += g.value(loss).item()? * positions as f64;
                epoch_count += positions;
                g.backward(loss)?;
                let grads = collect_grads(&g, p.named().into_iter().map(|(_, v)| *v));
                adam.step(&mut self.params.leaves_mut(), &grads)?;
            }
            log.push(epoch_total / epoch_count as f64);
        }
        Ok(log)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn from_records<'a>(
        config: LMConfig,
        records: impl IntoIterator<Item = &'a (String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let layout = layout(&model.params.named());
        fill_from_records(layout, model.params.leaves_mut(), records)?;
        Ok(model)
    }
}

/// `Σ w_i · loss_i` as a graph node.
pub(crate) fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    acc.ok_or(Error::Empty("loss terms"))
}

/// Gradients for `vars` in order; a leaf the loss never reached gets zeros.
pub(crate) fn collect_grads(g: &Graph, vars: impl Iterator<Item = Var>) -> Vec<Tensor> {
    vars.map(|v| {
        g.grad(v)
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    })
    .collect()
}

pub(crate) fn layout(named: &[(String, &Tensor)]) -> Vec<(String, Vec<usize>)> {
    named
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

/// Copies named records into `leaves`, matching names and shapes exactly.
pub(crate) fn fill_from_records<'a>(
    expected: Vec<(String, Vec<usize>)>,
    leaves: Vec<&mut Tensor>,
    records: impl IntoIterator<Item = &'a (String, Tensor)>,
) -> Result<()> {
    let records: Vec<&(String, Tensor)> = records.into_iter().collect();
    if records.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            records.len()
        )));
    }
    for ((leaf, (name, shape)), (rname, t)) in leaves.into_iter().zip(&expected).zip(records) {
        if name != rname {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {rname}"
            )));
        }
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected shape {shape:?}, found {:?}",
                t.shape()
            )));
        }
        *leaf = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LMConfig {
        LMConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
        }
    }

    #[test]
    fn config_validation() {
        assert!(LMConfig::default().validate().is_ok());
        let bad = LMConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(bad.validate().is_err());
        let zero = LMConfig { d_ff: 0, ..tiny() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn forward_errors() {
        let m = LanguageModel::new(tiny(), 1).unwrap();
        assert!(matches!(m.forward(&[]), Err(Error::EmptySequence)));
        assert!(matches!(
            m.forward(&[0, 7]),
            Err(Error::TokenOutOfRange { id: 7, vocab: 7 })
        ));
        assert!(matches!(
            m.forward(&[0; 17]),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn single_token_shapes() {
        let m = LanguageModel::new(tiny(), 1).unwrap();
        let (logits, taps) = m.forward(&[3]).unwrap();
        assert_eq!(logits.shape(), &[1, 7]);
        assert_eq!(taps.len(), 3);
        assert!(taps.iter().all(|t| t.shape() == [1, 8]));
    }

    #[test]
    fn tap_zero_is_positionally_encoded_embedding() {
        let m = LanguageModel::new(tiny(), 4).unwrap();
        let tokens = [2, 5, 1];
        let (_, taps) = m.forward(&tokens).unwrap();
        let rows: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| m.params().embed.row(t).to_vec())
            .collect();
        let emb = Tensor::from_rows(&rows).unwrap();
        assert_eq!(taps.get(0), &positional_encode(&emb, 16).unwrap());
    }

    #[test]
    fn positional_encode_rejects_long_input() {
        assert!(positional_encode(&Tensor::zeros(&[5, 2]), 4).is_err());
    }

    #[test]
    fn pretrain_refused_when_frozen() {
        let mut m = LanguageModel::new(tiny(), 1).unwrap();
        m.freeze();
        assert!(matches!(
            m.pretrain(&[vec![0, 1, 2]], &PretrainConfig::default()),
            Err(Error::Frozen)
        ));
        assert!(m.params_mut().is_err());
        assert_eq!(m.frozen_checksum(), Some(m.checksum()));
    }

    #[test]
    fn single_token_vocabulary_has_zero_loss() {
        let cfg = LMConfig {
            vocab_size: 1,
            ..tiny()
        };
        let mut m = LanguageModel::new(cfg, 1).unwrap();
        let log = m
            .pretrain(
                &[vec![0; 6]],
                &PretrainConfig {
                    epochs: 2,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(log.iter().all(|&l| l == 0.0), "{log:?}");
    }

    #[test]
    fn initial_loss_near_log_vocab() {
        let m = LanguageModel::new(tiny(), 3).unwrap();
        let corpus = vec![vec![0, 1, 2, 3, 4, 5, 6, 0, 1, 2]];
        let l = m.loss(&corpus).unwrap();
        assert!((l - 7f64.ln()).abs() < 0.05, "{l}");
    }

    #[test]
    fn records_round_trip() {
        let m = LanguageModel::new(tiny(), 9).unwrap();
        let recs = m.to_records();
        let back = LanguageModel::from_records(tiny(), &recs).unwrap();
        assert_eq!(back.params(), m.params());
        let mut short = recs.clone();
        short.pop();
        assert!(LanguageModel::from_records(tiny(), &short).is_err());
    }
}
