//! The supervisor tower.
//!
//! Shadow module `k` (1..=N) reads `W_k · [tap_{k-1} ‖ shadow_{k-1}] + b_k`,
//! where `tap_{k-1}` is the output of the previous language module and
//! `shadow_{k-1}` the output of the previous shadow module. The first shadow
//! input is the positionally-encoded embedding tap projected to the shadow
//! width. Scores are `sigmoid(head(norm(shadow_N)))`, one row per prefix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::language::{LMConfig, LayerTaps};
use crate::nn::{AttentionBlock, Linear, Norm, INIT_STD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoppelConfig {
    pub d_shadow: usize,
    pub n_objectives: usize,
    pub n_heads_shadow: usize,
    pub d_ff_shadow: usize,
}

impl Default for DoppelConfig {
    fn default() -> Self {
        Self {
            d_shadow: 32,
            n_objectives: 1,
            n_heads_shadow: 4,
            d_ff_shadow: 128,
        }
    }
}

impl DoppelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_shadow", self.d_shadow),
            ("n_objectives", self.n_objectives),
            ("n_heads_shadow", self.n_heads_shadow),
            ("d_ff_shadow", self.d_ff_shadow),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("doppel.{name} must be at least 1")));
            }
        }
        if !self.d_shadow.is_multiple_of(self.n_heads_shadow) {
            return Err(Error::Config(format!(
                "doppel.d_shadow {} is not divisible by n_heads_shadow {}",
                self.d_shadow, self.n_heads_shadow
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoppelParams<P = Tensor> {
    /// `d_model -> d_shadow`, applied to the embedding tap.
    pub input_proj: Linear<P>,
    /// One `(d_model + d_shadow) -> d_shadow` map per shadow module.
    pub fusion: Vec<Linear<P>>,
    pub blocks: Vec<AttentionBlock<P>>,
    pub final_norm: Norm<P>,
    /// `d_shadow -> n_objectives`
    pub head: Linear<P>,
}

impl<P> DoppelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> DoppelParams<Q> {
        DoppelParams {
            input_proj: self.input_proj.map(f),
            fusion: self.fusion.iter().map(|l| l.map(f)).collect(),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            head: self.head.map(f),
        }
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = self.input_proj.named("doppel.input_proj");
        for (i, l) in self.fusion.iter().enumerate() {
            out.extend(l.named(&format!("doppel.fusion.{i}")));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("doppel.blocks.{i}")));
        }
        out.extend(self.final_norm.named("doppel.final_norm"));
        out.extend(self.head.named("doppel.head"));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = self.input_proj.leaves_mut();
        for l in &mut self.fusion {
            out.extend(l.leaves_mut());
        }
        for b in &mut self.blocks {
            out.extend(b.leaves_mut());
        }
        out.extend(self.final_norm.leaves_mut());
        out.extend(self.head.leaves_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoppelgangerModel {
    config: DoppelConfig,
    n_layers: usize,
    d_model: usize,
    pub params: DoppelParams,
}

impl DoppelgangerModel {
    /// Fresh supervisor paired with a language component of shape `lm`.
    pub fn new(config: DoppelConfig, lm: &LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        lm.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ds) = (lm.d_model, config.d_shadow);
        let fusion = (0..lm.n_layers)
            .map(|_| {
                // tap rows small-random, shadow rows identity
                let mut w = Tensor::randn(&[d + ds, ds], INIT_STD, &mut rng);
                for (r, row) in w.data_mut().chunks_mut(ds).enumerate().skip(d) {
                    row.iter_mut().enumerate().for_each(|(c, v)| {
                        *v = if c == r - d { 1.0 } else { 0.0 };
                    });
                }
                Linear {
                    weight: w,
                    bias: Tensor::zeros(&[ds]),
                }
            })
            .collect();
        let input_proj = Linear::init(d, ds, &mut rng);
        let blocks = (0..lm.n_layers)
            .map(|_| AttentionBlock::init(ds, config.d_ff_shadow, &mut rng))
            .collect();
        let head = Linear::init(ds, config.n_objectives, &mut rng);
        Ok(Self {
            n_layers: lm.n_layers,
            d_model: d,
            params: DoppelParams {
                input_proj,
                fusion,
                blocks,
                final_norm: Norm::init(ds),
                head,
            },
            config,
        })
    }

    pub fn config(&self) -> &DoppelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DoppelParams<Var> {
        self.params.map(&mut |t| g.leaf(t.clone(), trainable))
    }

    pub fn check_taps(&self, n_layers: usize, width: usize) -> Result<()> {
        if n_layers != self.n_layers || width != self.d_model {
            return Err(Error::TapMismatch {
                expected_layers: self.n_layers,
                expected_width: self.d_model,
                found_layers: n_layers,
                found_width: width,
            });
        }
        Ok(())
    }

    /// Builds the supervisor pass into `g` over tap nodes `taps[0..=N]`.
    pub fn forward_graph(&self, p: &DoppelParams<Var>, g: &mut Graph, taps: &[Var]) -> Result<Var> {
        let width = taps.first().map_or(0, |&t| g.value(t).cols());
        self.check_taps(taps.len().saturating_sub(1), width)?;
        let mut shadow = p.input_proj.forward(g, taps[0])?;
        for k in 1..=self.n_layers {
            let cat = g.concat_last(taps[k - 1], shadow)?;
            let fused = p.fusion[k - 1].forward(g, cat)?;
            shadow = p.blocks[k - 1].forward(g, fused, self.config.n_heads_shadow)?;
        }
        let h = p.final_norm.forward(g, shadow)?;
        let logits = p.head.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Scores `[T, n_objectives]`; row `t` scores the prefix ending at `t`.
    /// Taps enter as constants, so nothing upstream can receive a gradient.
    pub fn forward(&self, taps: &LayerTaps) -> Result<Tensor> {
        self.check_taps(taps.n_layers(), taps.width())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let tap_vars: Vec<Var> = taps.iter().map(|t| g.constant(t.clone())).collect();
        let scores = self.forward_graph(&p, &mut g, &tap_vars)?;
        Ok(g.value(scores).clone())
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn from_records<'a>(
        config: DoppelConfig,
        lm: &LMConfig,
        records: impl IntoIterator<Item = &'a (String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, lm, 0)?;
        let layout = crate::language::layout(&model.params.named());
        crate::language::fill_from_records(layout, model.params.leaves_mut(), records)?;
        Ok(model)
    }
}

/// Supervisor scores for `taps`, see [`DoppelgangerModel::forward`].
pub fn doppel_forward(dm: &DoppelgangerModel, taps: &LayerTaps) -> Result<Tensor> {
    dm.forward(taps)
}
