//! Transformer building blocks shared by both towers.
//!
//! Parameter structs are generic over the leaf type: `P = Tensor` for stored
//! weights, `P = Var` once they are bound into a [`Graph`]. `map` rebuilds the
//! same structure with new leaves; `named` and `leaves_mut` walk leaves in the
//! same fixed order, which the optimizer and checkpoint code rely on.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P = Tensor> {
    /// `[in, out]`
    pub weight: P,
    pub bias: P,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_in, d_out], INIT_STD, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &P)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P = Tensor> {
    pub gain: P,
    pub bias: P,
}

impl Norm {
    pub fn init(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl<P> Norm<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Norm<Q> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &P)> {
        vec![
            (format!("{prefix}.gain"), &self.gain),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        vec![&mut self.gain, &mut self.bias]
    }
}

impl Norm<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

/// One pre-norm attention module: `x + attn(norm1(x))`, then `+ ffn(norm2(·))`.
///
/// Query/key/value projections hold all heads side by side; head `h` owns
/// columns `h*d_head..(h+1)*d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock<P = Tensor> {
    pub norm1: Norm<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub output: Linear<P>,
    pub norm2: Norm<P>,
    pub ff_in: Linear<P>,
    pub ff_out: Linear<P>,
}

impl AttentionBlock {
    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            norm1: Norm::init(d),
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
            norm2: Norm::init(d),
            ff_in: Linear::init(d, d_ff, rng),
            ff_out: Linear::init(d_ff, d, rng),
        }
    }
}

impl<P> AttentionBlock<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AttentionBlock<Q> {
        AttentionBlock {
            norm1: self.norm1.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            norm2: self.norm2.map(f),
            ff_in: self.ff_in.map(f),
            ff_out: self.ff_out.map(f),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &P)> {
        let mut out = self.norm1.named(&format!("{prefix}.norm1"));
        out.extend(self.query.named(&format!("{prefix}.query")));
        out.extend(self.key.named(&format!("{prefix}.key")));
        out.extend(self.value.named(&format!("{prefix}.value")));
        out.extend(self.output.named(&format!("{prefix}.output")));
        out.extend(self.norm2.named(&format!("{prefix}.norm2")));
        out.extend(self.ff_in.named(&format!("{prefix}.ff_in")));
        out.extend(self.ff_out.named(&format!("{prefix}.ff_out")));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = self.norm1.leaves_mut();
        out.extend(self.query.leaves_mut());
        out.extend(self.key.leaves_mut());
        out.extend(self.value.leaves_mut());
        out.extend(self.output.leaves_mut());
        out.extend(self.norm2.leaves_mut());
        out.extend(self.ff_in.leaves_mut());
        out.extend(self.ff_out.leaves_mut());
        out
    }
}

impl AttentionBlock<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var, n_heads: usize) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = causal_self_attention(g, self, h, n_heads)?;
        let x1 = g.add(x, a)?;
        let h2 = self.norm2.forward(g, x1)?;
        let f = self.ff_in.forward(g, h2)?;
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f)?;
        g.add(x1, f)
    }
}

fn causal_self_attention(
    g: &mut Graph,
    block: &AttentionBlock<Var>,
    h: Var,
    n_heads: usize,
) -> Result<Var> {
    let d = g.value(h).cols();
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let q = block.query.forward(g, h)?;
    let k = block.key.forward(g, h)?;
    let v = block.value.forward(g, h)?;
    let mut merged: Option<Var> = None;
    for head in 0..n_heads {
        let start = head * d_head;
        let qh = g.slice_last(q, start, d_head)?;
        let kh = g.slice_last(k, start, d_head)?;
        let vh = g.slice_last(v, start, d_head)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let s = g.causal_mask(s)?;
        let p = g.softmax(s, 1)?;
        let o = g.matmul(p, vh)?;
        merged = Some(match merged {
            None => o,
            Some(m) => g.concat_last(m, o)?,
        });
    }
    block.output.forward(g, merged.expect("n_heads >= 1"))
}

/// Sinusoidal position table, `[t, d]`: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching `cos`.
pub fn positional_table(t: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![t, d], data).expect("t*d elements")
}
