//! Central finite-difference gradient checking.
//!
//! The numerical side only ever reads forward values, so it stays independent
//! of the backward rules it is checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::doppel::{DoppelConfig, DoppelgangerModel};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::language::{LMConfig, LanguageModel};
use crate::nn::AttentionBlock;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;

/// Relative error floor: gradients smaller than this are compared on an
/// absolute scale of `FLOOR * rel_tol`.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Central differences of a scalar function of several tensors, one
/// coordinate at a time.
pub fn numerical_grads(
    inputs: &[Tensor],
    step: f64,
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let plus = f(&work)?;
            work[k].data_mut()[j] = orig - step;
            let minus = f(&work)?;
            work[k].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `build` with central differences.
///
/// `build` receives a fresh graph and one trainable leaf per input, and must
/// return a scalar loss node.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    step: f64,
    rel_tol: f64,
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let forward = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };
    let numeric = numerical_grads(inputs, step, &forward)?;

    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            checked += 1;
            let e = rel_error(av, nv);
            if e > max_rel_error || e.is_nan() {
                max_rel_error = e;
                worst = Some((k, j));
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked,
        max_rel_error,
        worst,
        passed: max_rel_error < rel_tol,
    })
}

fn scalarize(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Runs `op` on random inputs in `[-2, 2]` and reduces its output with a
/// fixed random weighting, so that every output entry carries a distinct
/// gradient.
fn unary_case(
    name: &str,
    shapes: &[&[usize]],
    rng: &mut ChaCha8Rng,
    op: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::uniform(s, -2.0, 2.0, rng))
        .collect();
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = Tensor::uniform(&probe, -1.0, 1.0, rng);
    check(name, &inputs, DEFAULT_STEP, DEFAULT_REL_TOL, &|g, v| {
        let out = op(g, v)?;
        scalarize(g, out, &weights)
    })
}

fn randomize(leaves: Vec<&mut Tensor>, rng: &mut ChaCha8Rng) {
    for t in leaves {
        *t = Tensor::uniform(t.shape(), -0.5, 0.5, rng);
    }
}

/// Gradient checks for every differentiable graph operation, one attention
/// module, and the losses of a 2-layer bicameral model (`d_model = 16`,
/// `d_shadow = 8`).
pub fn suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        unary_case("matmul", &[&[3, 4], &[4, 2]], r, &|g, v| {
            g.matmul(v[0], v[1])
        })?,
        unary_case("add", &[&[3, 4], &[3, 4]], r, &|g, v| g.add(v[0], v[1]))?,
        unary_case("mul", &[&[3, 4], &[3, 4]], r, &|g, v| g.mul(v[0], v[1]))?,
        unary_case("scale", &[&[3, 4]], r, &|g, v| Ok(g.scale(v[0], -1.7)))?,
        unary_case("add_row", &[&[3, 4], &[4]], r, &|g, v| {
            g.add_row(v[0], v[1])
        })?,
        unary_case("relu", &[&[4, 5]], r, &|g, v| Ok(g.relu(v[0])))?,
        unary_case("gelu", &[&[4, 5]], r, &|g, v| Ok(g.gelu(v[0])))?,
        unary_case("sigmoid", &[&[4, 5]], r, &|g, v| Ok(g.sigmoid(v[0])))?,
        unary_case("softmax_axis1", &[&[3, 5]], r, &|g, v| g.softmax(v[0], 1))?,
        unary_case("softmax_axis0", &[&[3, 5]], r, &|g, v| g.softmax(v[0], 0))?,
        unary_case("layer_norm", &[&[3, 6], &[6], &[6]], r, &|g, v| {
            g.layer_norm(v[0], v[1], v[2], crate::nn::LN_EPS)
        })?,
        unary_case("concat_last", &[&[3, 2], &[3, 4]], r, &|g, v| {
            g.concat_last(v[0], v[1])
        })?,
        unary_case("slice_last", &[&[3, 6]], r, &|g, v| {
            g.slice_last(v[0], 1, 3)
        })?,
        unary_case("embedding", &[&[5, 3]], r, &|g, v| {
            g.embedding(v[0], &[4, 0, 4, 2])
        })?,
        unary_case("transpose", &[&[3, 4]], r, &|g, v| g.transpose(v[0]))?,
        unary_case("reshape", &[&[3, 4]], r, &|g, v| g.reshape(v[0], &[2, 6]))?,
        unary_case("masked_fill", &[&[2, 3]], r, &|g, v| {
            g.masked_fill(v[0], &[true, false, false, true, false, true], 0.25)
        })?,
        unary_case("causal_softmax", &[&[4, 4]], r, &|g, v| {
            let m = g.causal_mask(v[0])?;
            g.softmax(m, 1)
        })?,
        unary_case("mean", &[&[3, 4]], r, &|g, v| Ok(g.mean(v[0])))?,
        unary_case("sum", &[&[3, 4]], r, &|g, v| Ok(g.sum(v[0])))?,
    ];

    let logits = Tensor::uniform(&[4, 5], -2.0, 2.0, r);
    out.push(check(
        "cross_entropy",
        &[logits],
        DEFAULT_STEP,
        DEFAULT_REL_TOL,
        &|g, v| g.cross_entropy(v[0], &[1, 4, 0, 1]),
    )?);
    let x = Tensor::uniform(&[4, 2], -2.0, 2.0, r);
    let y = Tensor::uniform(&[4, 2], 0.0, 1.0, r);
    out.push(check(
        "binary_cross_entropy",
        &[x],
        DEFAULT_STEP,
        DEFAULT_REL_TOL,
        &|g, v| {
            let p = g.sigmoid(v[0]);
            g.binary_cross_entropy(p, &y)
        },
    )?);

    let mut block = AttentionBlock::init(8, 12, r);
    randomize(block.leaves_mut(), r);
    let mut inputs = vec![Tensor::uniform(&[4, 8], -2.0, 2.0, r)];
    inputs.extend(block.named("b").into_iter().map(|(_, t)| t.clone()));
    let weights = Tensor::uniform(&[4, 8], -1.0, 1.0, r);
    out.push(check(
        "attention_block",
        &inputs,
        DEFAULT_STEP,
        DEFAULT_REL_TOL,
        &|g, v| {
            let mut it = v[1..].iter().copied();
            let b = block.map(&mut |_| it.next().expect("leaf"));
            let y = b.forward(g, v[0], 2)?;
            scalarize(g, y, &weights)
        },
    )?);

    out.extend(bicameral_cases(r)?);
    Ok(out)
}

fn bicameral_cases(r: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let lm_cfg = LMConfig {
        vocab_size: 6,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 8,
    };
    let d_cfg = DoppelConfig {
        d_shadow: 8,
        n_objectives: 2,
        n_heads_shadow: 2,
        d_ff_shadow: 16,
    };
    let mut lm = LanguageModel::new(lm_cfg.clone(), 0)?;
    randomize(lm.params_mut()?.leaves_mut(), r);
    let mut dm = DoppelgangerModel::new(d_cfg, &lm_cfg, 0)?;
    randomize(dm.params.leaves_mut(), r);
    let tokens = [3, 1, 5, 0, 2];
    let (input, target) = (&tokens[..4], &tokens[1..]);
    let labels = Tensor::uniform(&[4, 2], 0.0, 1.0, r);
    let n_lm = lm.params().named().len();

    let mut inputs: Vec<Tensor> = lm
        .params()
        .named()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    inputs.extend(dm.params.named().into_iter().map(|(_, t)| t.clone()));

    let lm_loss = check(
        "language_loss",
        &inputs[..n_lm],
        DEFAULT_STEP,
        DEFAULT_REL_TOL,
        &|g, v| {
            let mut it = v.iter().copied();
            let p = lm.params().map(&mut |_| it.next().expect("leaf"));
            let (logits, _) = LanguageModel::forward_graph(&lm_cfg, &p, g, input)?;
            g.cross_entropy(logits, target)
        },
    )?;

    // supervisor loss on fixed taps, as in training
    let (_, taps) = lm.forward(input)?;
    let doppel_loss = check(
        "doppel_loss",
        &inputs[n_lm..],
        DEFAULT_STEP,
        DEFAULT_REL_TOL,
        &|g, v| {
            let mut it = v.iter().copied();
            let p = dm.params.map(&mut |_| it.next().expect("leaf"));
            let tv: Vec<Var> = taps.iter().map(|t| g.constant(t.clone())).collect();
            let s = dm.forward_graph(&p, g, &tv)?;
            g.binary_cross_entropy(s, &labels)
        },
    )?;

    // both losses through one graph, with taps as live nodes
    let joint = check(
        "bicameral_loss",
        &inputs,
        DEFAULT_STEP,
        DEFAULT_REL_TOL,
        &|g, v| {
            let mut it = v.iter().copied();
            let lp = lm.params().map(&mut |_| it.next().expect("leaf"));
            let dp = dm.params.map(&mut |_| it.next().expect("leaf"));
            let (logits, tap_vars) = LanguageModel::forward_graph(&lm_cfg, &lp, g, input)?;
            let ce = g.cross_entropy(logits, target)?;
            let s = dm.forward_graph(&dp, g, &tap_vars)?;
            let bce = g.binary_cross_entropy(s, &labels)?;
            g.add(ce, bce)
        },
    )?;
    Ok(vec![lm_loss, doppel_loss, joint])
}
