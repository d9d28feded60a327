//! Split-objective supremacy on finite instances.
//!
//! A shared language function maps `(θ, t)` to one point of `S_1 × … × S_n`.
//! Its split counterpart has one parameter grid per objective, each grid
//! containing the shared grid as its first entries, so every shared choice
//! is still available to every objective. Both are optimized by exhaustive
//! enumeration against a composite reward `M(R_1, …, R_n)`, and the
//! resulting values are compared.
//!
//! The aggregate objective over the input set is `M(mean_t R_1, …, mean_t R_n)`.
//! Each input is also verified on its own as a single-input instance.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest `|Θ| · |T*|` the optimizers will enumerate.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;
/// Largest grid `check_monotone` will walk.
pub const MONOTONE_GRID_LIMIT: u64 = 1_000_000;
pub const TOLERANCE: f64 = 1e-12;

/// `S_i` as a list of real vectors of one common dimension.
pub type Space = Vec<Vec<f64>>;

fn check_spaces(spaces: &[Space]) -> Result<()> {
    if spaces.is_empty() {
        return Err(Error::Instance("no objectives".into()));
    }
    for (i, s) in spaces.iter().enumerate() {
        let dim = s
            .first()
            .ok_or_else(|| Error::Instance(format!("S_{i} is empty")))?
            .len();
        if s.iter().any(|p| p.len() != dim) {
            return Err(Error::Instance(format!("S_{i} mixes vector dimensions")));
        }
    }
    Ok(())
}

/// Shared-parameter language function over a finite grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteLanguageFunction {
    spaces: Vec<Space>,
    /// `[θ][t][i]`, an index into `spaces[i]`.
    table: Vec<Vec<Vec<usize>>>,
    n_inputs: usize,
}

impl FiniteLanguageFunction {
    pub fn new(spaces: Vec<Space>, table: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        check_spaces(&spaces)?;
        let n_inputs = table
            .first()
            .ok_or_else(|| Error::Instance("empty parameter grid".into()))?
            .len();
        if n_inputs == 0 {
            return Err(Error::Instance("empty input set".into()));
        }
        for row in &table {
            if row.len() != n_inputs {
                return Err(Error::Instance("ragged evaluation table".into()));
            }
            for point in row {
                if point.len() != spaces.len() {
                    return Err(Error::Instance("point has wrong objective count".into()));
                }
                if point.iter().zip(&spaces).any(|(&k, s)| k >= s.len()) {
                    return Err(Error::Instance("point index outside S_i".into()));
                }
            }
        }
        Ok(Self {
            spaces,
            table,
            n_inputs,
        })
    }

    pub fn n_objectives(&self) -> usize {
        self.spaces.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn grid_size(&self) -> usize {
        self.table.len()
    }

    pub fn spaces(&self) -> &[Space] {
        &self.spaces
    }

    /// Indices of the components of `L_θ(t)`.
    pub fn eval(&self, theta: usize, t: usize) -> &[usize] {
        &self.table[theta][t]
    }

    /// Restriction to a single input.
    pub fn at_input(&self, t: usize) -> Self {
        Self {
            spaces: self.spaces.clone(),
            table: self.table.iter().map(|row| vec![row[t].clone()]).collect(),
            n_inputs: 1,
        }
    }
}

/// Extended language function with an independent grid per objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLanguageFunction {
    spaces: Vec<Space>,
    /// `[i][θ_i][t]`, an index into `spaces[i]`.
    tables: Vec<Vec<Vec<usize>>>,
    n_inputs: usize,
}

impl SplitLanguageFunction {
    pub fn new(spaces: Vec<Space>, tables: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        check_spaces(&spaces)?;
        if tables.len() != spaces.len() {
            return Err(Error::Instance("one grid per objective required".into()));
        }
        let n_inputs = tables[0]
            .first()
            .ok_or_else(|| Error::Instance("empty parameter grid".into()))?
            .len();
        for (i, grid) in tables.iter().enumerate() {
            if grid.is_empty() {
                return Err(Error::Instance(format!("Θ_{i} is empty")));
            }
            for row in grid {
                if row.len() != n_inputs || n_inputs == 0 {
                    return Err(Error::Instance("ragged evaluation table".into()));
                }
                if row.iter().any(|&k| k >= spaces[i].len()) {
                    return Err(Error::Instance(format!("index outside S_{i}")));
                }
            }
        }
        Ok(Self {
            spaces,
            tables,
            n_inputs,
        })
    }

    /// Split function whose grid `i` is the shared grid projected on `S_i`
    /// followed by `extra[i]`.
    pub fn extend(shared: &FiniteLanguageFunction, extra: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if extra.len() != shared.n_objectives() {
            return Err(Error::Instance(
                "one extra grid per objective required".into(),
            ));
        }
        let tables = extra
            .into_iter()
            .enumerate()
            .map(|(i, more)| {
                let mut grid: Vec<Vec<usize>> = shared
                    .table
                    .iter()
                    .map(|row| row.iter().map(|p| p[i]).collect())
                    .collect();
                grid.extend(more);
                grid
            })
            .collect();
        Self::new(shared.spaces.clone(), tables)
    }

    pub fn n_objectives(&self) -> usize {
        self.spaces.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.tables.iter().map(Vec::len).collect()
    }

    pub fn eval(&self, i: usize, theta_i: usize, t: usize) -> usize {
        self.tables[i][theta_i][t]
    }

    pub fn at_input(&self, t: usize) -> Self {
        Self {
            spaces: self.spaces.clone(),
            tables: self
                .tables
                .iter()
                .map(|grid| grid.iter().map(|row| vec![row[t]]).collect())
                .collect(),
            n_inputs: 1,
        }
    }

    /// Checks that the split function can be built from `shared`: same
    /// output spaces, and the first `|Θ|` entries of every `Θ_i` reproduce
    /// the shared projections on `S_i`.
    pub fn check_embeds(&self, shared: &FiniteLanguageFunction) -> Result<()> {
        if self.spaces != shared.spaces {
            return Err(Error::Construction("output spaces differ".into()));
        }
        if self.n_inputs != shared.n_inputs {
            return Err(Error::Construction("input sets differ".into()));
        }
        for (i, grid) in self.tables.iter().enumerate() {
            if grid.len() < shared.grid_size() {
                return Err(Error::Construction(format!(
                    "Θ_{i} has {} entries, fewer than |Θ| = {}",
                    grid.len(),
                    shared.grid_size()
                )));
            }
            for (theta, row) in shared.table.iter().enumerate() {
                for (t, point) in row.iter().enumerate() {
                    if grid[theta][t] != point[i] {
                        return Err(Error::Construction(format!(
                            "Θ_{i}[{theta}] disagrees with the shared projection at input {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `R_i: S_i → ℝ` with the partial order it is declared monotone against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardFunction {
    values: Vec<f64>,
    /// Pairs `(a, b)` meaning `s_a ≤ s_b`.
    order: Vec<(usize, usize)>,
}

impl RewardFunction {
    pub fn new(values: Vec<f64>, order: Vec<(usize, usize)>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Instance("reward over an empty space".into()));
        }
        if order
            .iter()
            .any(|&(a, b)| a >= values.len() || b >= values.len())
        {
            return Err(Error::Instance("order pair outside the space".into()));
        }
        Ok(Self { values, order })
    }

    /// Declares the componentwise order on the vectors of `space`.
    pub fn componentwise(space: &[Vec<f64>], values: Vec<f64>) -> Result<Self> {
        if space.len() != values.len() {
            return Err(Error::Instance(
                "one reward value per point required".into(),
            ));
        }
        let mut order = Vec::new();
        for (a, pa) in space.iter().enumerate() {
            for (b, pb) in space.iter().enumerate() {
                if a != b && pa.iter().zip(pb).all(|(x, y)| x <= y) {
                    order.push((a, b));
                }
            }
        }
        Self::new(values, order)
    }

    pub fn value(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn order(&self) -> &[(usize, usize)] {
        &self.order
    }

    pub fn is_monotone(&self) -> bool {
        self.order
            .iter()
            .all(|&(a, b)| self.values[a] <= self.values[b])
    }
}

pub type CompositionFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Composition {
    WeightedSum(Vec<f64>),
    Min,
    /// `Π (r_i + shift)`
    ProductShifted(f64),
    Custom {
        name: String,
        f: CompositionFn,
    },
}

impl fmt::Debug for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl Composition {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn apply(&self, r: &[f64]) -> f64 {
        match self {
            Self::WeightedSum(w) => w.iter().zip(r).map(|(w, r)| w * r).sum(),
            Self::Min => r.iter().copied().fold(f64::INFINITY, f64::min),
            Self::ProductShifted(c) => r.iter().map(|r| r + c).product(),
            Self::Custom { f, .. } => f(r),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::WeightedSum(w) => format!("weighted_sum{w:?}"),
            Self::Min => "min".into(),
            Self::ProductShifted(c) => format!("product_shifted({c})"),
            Self::Custom { name, .. } => format!("custom({name})"),
        }
    }

    /// Monotonicity on the box `Π [lo_i, hi_i]` for the built-in families,
    /// `None` for custom maps.
    fn monotone_on_box(&self, bounds: &[(f64, f64)]) -> Option<bool> {
        match self {
            Self::WeightedSum(w) => Some(w.len() == bounds.len() && w.iter().all(|&w| w >= 0.0)),
            Self::Min => Some(true),
            Self::ProductShifted(c) => Some(bounds.iter().all(|&(lo, _)| lo + c >= 0.0)),
            Self::Custom { .. } => None,
        }
    }
}

/// Exhaustive monotonicity check of `m` on the grid `Π value_sets[i]`.
///
/// Each axis is sorted and deduplicated, and every grid point is compared
/// with its successor along each axis. Nondecreasing along all such steps
/// is the same as `x ≤ y ⇒ m(x) ≤ m(y)` for every pair of grid points.
pub fn check_monotone(m: &Composition, value_sets: &[Vec<f64>]) -> Result<bool> {
    let axes: Vec<Vec<f64>> = value_sets
        .iter()
        .map(|v| {
            let mut v = v.clone();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        })
        .collect();
    if axes.is_empty() || axes.iter().any(Vec::is_empty) {
        return Err(Error::Instance("empty value set".into()));
    }
    let size = axes
        .iter()
        .try_fold(1u64, |acc, a| acc.checked_mul(a.len() as u64))
        .unwrap_or(u64::MAX);
    if size > MONOTONE_GRID_LIMIT {
        return Err(Error::EnumerationTooLarge {
            size,
            limit: MONOTONE_GRID_LIMIT,
        });
    }
    let mut idx = vec![0usize; axes.len()];
    let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    loop {
        let here = m.apply(&point);
        for i in 0..axes.len() {
            if idx[i] + 1 < axes[i].len() {
                let saved = point[i];
                point[i] = axes[i][idx[i] + 1];
                let up = m.apply(&point);
                point[i] = saved;
                if up < here {
                    return Ok(false);
                }
            }
        }
        // mixed-radix increment
        let mut i = 0;
        loop {
            if i == axes.len() {
                return Ok(true);
            }
            idx[i] += 1;
            if idx[i] < axes[i].len() {
                point[i] = axes[i][idx[i]];
                break;
            }
            idx[i] = 0;
            point[i] = axes[i][0];
            i += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompositeReward {
    pub rewards: Vec<RewardFunction>,
    pub composition: Composition,
}

impl CompositeReward {
    pub fn value(&self, component_rewards: &[f64]) -> f64 {
        self.composition.apply(component_rewards)
    }

    pub fn rewards_monotone(&self) -> bool {
        self.rewards.iter().all(RewardFunction::is_monotone)
    }

    fn check_against(&self, spaces: &[Space]) -> Result<()> {
        if self.rewards.len() != spaces.len() {
            return Err(Error::Instance(format!(
                "{} rewards for {} objectives",
                self.rewards.len(),
                spaces.len()
            )));
        }
        if let Composition::WeightedSum(w) = &self.composition {
            if w.len() != spaces.len() {
                return Err(Error::Instance("one weight per objective required".into()));
            }
        }
        for (i, (r, s)) in self.rewards.iter().zip(spaces).enumerate() {
            if r.values.len() != s.len() {
                return Err(Error::Instance(format!("R_{i} does not cover S_{i}")));
            }
        }
        Ok(())
    }
}

fn mean_reward(r: &RewardFunction, points: impl Iterator<Item = usize>, n: usize) -> f64 {
    points.map(|s| r.value(s)).sum::<f64>() / n as f64
}

fn shared_means(f: &FiniteLanguageFunction, cr: &CompositeReward, theta: usize) -> Vec<f64> {
    (0..f.n_objectives())
        .map(|i| {
            mean_reward(
                &cr.rewards[i],
                (0..f.n_inputs).map(|t| f.table[theta][t][i]),
                f.n_inputs,
            )
        })
        .collect()
}

fn split_mean(f: &SplitLanguageFunction, r: &RewardFunction, i: usize, theta_i: usize) -> f64 {
    mean_reward(r, f.tables[i][theta_i].iter().copied(), f.n_inputs)
}

fn guard(size: usize, inputs: usize) -> Result<()> {
    let total = (size as u64).saturating_mul(inputs as u64);
    if total > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            size: total,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// `θ*` maximizing `M(mean_t R_1, …, mean_t R_n)`; ties go to the lowest index.
pub fn optimize_shared(f: &FiniteLanguageFunction, cr: &CompositeReward) -> Result<(usize, f64)> {
    cr.check_against(&f.spaces)?;
    guard(f.grid_size(), f.n_inputs)?;
    let mut best = (0, f64::NEG_INFINITY);
    for theta in 0..f.grid_size() {
        let v = cr.value(&shared_means(f, cr, theta));
        if v > best.1 || theta == 0 {
            best = (theta, v);
        }
    }
    Ok(best)
}

/// Each `θ_i*` maximizes `mean_t R_i` on its own grid (ties to the lowest
/// index); the value is `M` at the resulting means.
pub fn optimize_split(
    f: &SplitLanguageFunction,
    cr: &CompositeReward,
) -> Result<(Vec<usize>, f64)> {
    cr.check_against(&f.spaces)?;
    let mut thetas = Vec::with_capacity(f.n_objectives());
    let mut means = Vec::with_capacity(f.n_objectives());
    for (i, r) in cr.rewards.iter().enumerate() {
        guard(f.tables[i].len(), f.n_inputs)?;
        let mut best = (0, f64::NEG_INFINITY);
        for theta_i in 0..f.tables[i].len() {
            let v = split_mean(f, r, i, theta_i);
            if v > best.1 || theta_i == 0 {
                best = (theta_i, v);
            }
        }
        thetas.push(best.0);
        means.push(best.1);
    }
    let value = cr.value(&means);
    Ok((thetas, value))
}

#[derive(Clone)]
pub struct RewardInstance {
    pub label: String,
    pub seed: Option<u64>,
    pub shared: FiniteLanguageFunction,
    pub split: SplitLanguageFunction,
    pub reward: CompositeReward,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointwiseResult {
    pub input: usize,
    pub shared_theta: usize,
    pub shared_value: f64,
    pub split_thetas: Vec<usize>,
    pub split_value: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupremacyReport {
    pub instance: String,
    pub seed: Option<u64>,
    pub n_objectives: usize,
    pub n_inputs: usize,
    pub shared_grid: usize,
    pub split_grids: Vec<usize>,
    pub composition: String,
    pub rewards_monotone: bool,
    pub composition_monotone: bool,
    /// Both monotonicity hypotheses hold.
    pub hypotheses_hold: bool,
    pub shared_theta: usize,
    pub shared_value: f64,
    pub shared_means: Vec<f64>,
    pub split_thetas: Vec<usize>,
    pub split_value: f64,
    pub split_means: Vec<f64>,
    /// Per objective: split mean reward ≥ shared mean reward at `θ*`.
    pub per_objective_dominance: Vec<bool>,
    /// `shared_value <= split_value + TOLERANCE`
    pub verdict: bool,
    pub equality: bool,
    /// `θ*` is also optimal for every `R_i` on its own.
    pub separable: bool,
    /// Every shared `θ`, optimal or not, is dominated by the split value.
    pub all_shared_dominated: bool,
    pub pointwise: Vec<PointwiseResult>,
    pub pointwise_holds: bool,
}

fn composition_monotone(inst: &RewardInstance) -> Result<bool> {
    let cr = &inst.reward;
    let pointwise: Vec<Vec<f64>> = cr.rewards.iter().map(|r| r.values.clone()).collect();
    if !check_monotone(&cr.composition, &pointwise)? {
        return Ok(false);
    }
    let bounds: Vec<(f64, f64)> = pointwise
        .iter()
        .map(|v| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect();
    match cr.composition.monotone_on_box(&bounds) {
        Some(b) => Ok(b),
        None => {
            // custom map: walk every achievable vector of mean rewards
            let means: Vec<Vec<f64>> = (0..inst.split.n_objectives())
                .map(|i| {
                    (0..inst.split.tables[i].len())
                        .map(|th| split_mean(&inst.split, &cr.rewards[i], i, th))
                        .collect()
                })
                .collect();
            check_monotone(&cr.composition, &means)
        }
    }
}

/// Optimizes both sides exhaustively and compares them, in aggregate and
/// separately for every input.
pub fn verify_supremacy(inst: &RewardInstance) -> Result<SupremacyReport> {
    inst.split.check_embeds(&inst.shared)?;
    let cr = &inst.reward;
    let f = &inst.shared;
    let (shared_theta, shared_value) = optimize_shared(f, cr)?;
    let (split_thetas, split_value) = optimize_split(&inst.split, cr)?;
    let shared_m = shared_means(f, cr, shared_theta);
    let split_m: Vec<f64> = split_thetas
        .iter()
        .enumerate()
        .map(|(i, &th)| split_mean(&inst.split, &cr.rewards[i], i, th))
        .collect();
    let per_objective_dominance: Vec<bool> = shared_m
        .iter()
        .zip(&split_m)
        .map(|(a, b)| *a <= b + TOLERANCE)
        .collect();
    let separable = shared_m
        .iter()
        .zip(&split_m)
        .all(|(a, b)| (a - b).abs() <= TOLERANCE);
    let all_shared_dominated =
        (0..f.grid_size()).all(|th| cr.value(&shared_means(f, cr, th)) <= split_value + TOLERANCE);

    let mut pointwise = Vec::with_capacity(f.n_inputs);
    for t in 0..f.n_inputs {
        let (fs, fp) = (f.at_input(t), inst.split.at_input(t));
        let (st, sv) = optimize_shared(&fs, cr)?;
        let (pt, pv) = optimize_split(&fp, cr)?;
        pointwise.push(PointwiseResult {
            input: t,
            shared_theta: st,
            shared_value: sv,
            split_thetas: pt,
            split_value: pv,
            holds: sv <= pv + TOLERANCE,
        });
    }

    let rewards_monotone = cr.rewards_monotone();
    let composition_monotone = composition_monotone(inst)?;
    Ok(SupremacyReport {
        instance: inst.label.clone(),
        seed: inst.seed,
        n_objectives: f.n_objectives(),
        n_inputs: f.n_inputs,
        shared_grid: f.grid_size(),
        split_grids: inst.split.grid_sizes(),
        composition: cr.composition.describe(),
        rewards_monotone,
        composition_monotone,
        hypotheses_hold: rewards_monotone && composition_monotone,
        shared_theta,
        shared_value,
        shared_means: shared_m,
        split_thetas,
        split_value,
        split_means: split_m,
        per_objective_dominance,
        verdict: shared_value <= split_value + TOLERANCE,
        equality: (shared_value - split_value).abs() <= TOLERANCE,
        separable,
        all_shared_dominated,
        pointwise_holds: pointwise.iter().all(|p| p.holds),
        pointwise,
    })
}

/// Random instance satisfying both monotonicity hypotheses.
///
/// `n ∈ [2, 4]`, `|T*| ∈ [1, 5]`, `|Θ| ∈ [4, 64]`, `|S_i| ∈ [2, 8]`. Points
/// of `S_i` are vectors in `[-1, 1]^d`, `d ∈ [1, 3]`, and each `R_i` is a
/// nonnegative linear form, hence monotone in the componentwise order.
/// Every `Θ_i` adds up to 8 random entries to the shared grid.
pub fn random_instance(seed: u64) -> Result<RewardInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4);
    let inputs = rng.random_range(1..=5);
    let grid = rng.random_range(4..=64);
    let mut spaces = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for _ in 0..n {
        let size = rng.random_range(2..=8);
        let dim = rng.random_range(1..=3);
        let space: Space = (0..size)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let coef: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let values = space
            .iter()
            .map(|p| p.iter().zip(&coef).map(|(x, a)| x * a).sum())
            .collect();
        rewards.push(RewardFunction::componentwise(&space, values)?);
        spaces.push(space);
    }
    let table = (0..grid)
        .map(|_| {
            (0..inputs)
                .map(|_| {
                    spaces
                        .iter()
                        .map(|s| rng.random_range(0..s.len()))
                        .collect()
                })
                .collect()
        })
        .collect();
    let shared = FiniteLanguageFunction::new(spaces.clone(), table)?;
    let extra = spaces
        .iter()
        .map(|s| {
            let k = rng.random_range(0..=8);
            (0..k)
                .map(|_| (0..inputs).map(|_| rng.random_range(0..s.len())).collect())
                .collect()
        })
        .collect();
    let split = SplitLanguageFunction::extend(&shared, extra)?;
    let composition = match rng.random_range(0..3) {
        0 => Composition::WeightedSum((0..n).map(|_| rng.random::<f64>()).collect()),
        1 => Composition::Min,
        _ => {
            let lo = rewards
                .iter()
                .flat_map(|r| r.values.iter().copied())
                .fold(f64::INFINITY, f64::min);
            Composition::ProductShifted(1.0 - lo)
        }
    };
    Ok(RewardInstance {
        label: format!("random n={n} |T*|={inputs} |Θ|={grid}"),
        seed: Some(seed),
        shared,
        split,
        reward: CompositeReward {
            rewards,
            composition,
        },
    })
}

fn unit_space() -> Space {
    vec![vec![0.0], vec![1.0]]
}

fn identity_reward() -> RewardFunction {
    RewardFunction::componentwise(&unit_space(), vec![0.0, 1.0]).expect("valid")
}

/// Two objectives over `{0, 1}`. The grid point `θ_0` maximizes both, so
/// splitting gains nothing and the two values coincide.
pub fn separable_instance() -> RewardInstance {
    let shared = FiniteLanguageFunction::new(
        vec![unit_space(), unit_space()],
        vec![vec![vec![1, 1]], vec![vec![1, 0]], vec![vec![0, 1]]],
    )
    .expect("valid");
    let split = SplitLanguageFunction::extend(&shared, vec![vec![], vec![]]).expect("valid");
    RewardInstance {
        label: "separable".into(),
        seed: None,
        shared,
        split,
        reward: CompositeReward {
            rewards: vec![identity_reward(), identity_reward()],
            composition: Composition::WeightedSum(vec![1.0, 1.0]),
        },
    }
}

/// Two objectives whose maximizers differ: every shared point trades one
/// for the other, while the split function takes both.
pub fn antagonistic_instance() -> RewardInstance {
    let shared = FiniteLanguageFunction::new(
        vec![unit_space(), unit_space()],
        vec![vec![vec![1, 0]], vec![vec![0, 1]]],
    )
    .expect("valid");
    let split = SplitLanguageFunction::extend(&shared, vec![vec![], vec![]]).expect("valid");
    RewardInstance {
        label: "antagonistic".into(),
        seed: None,
        shared,
        split,
        reward: CompositeReward {
            rewards: vec![identity_reward(), identity_reward()],
            composition: Composition::WeightedSum(vec![1.0, 1.0]),
        },
    }
}

/// `M(r) = r_1 - r_2` with a split grid that can raise `R_2`. The map is not
/// monotone, and the split value falls below the shared one.
pub fn negative_control() -> RewardInstance {
    let shared =
        FiniteLanguageFunction::new(vec![unit_space(), unit_space()], vec![vec![vec![1, 0]]])
            .expect("valid");
    let split = SplitLanguageFunction::extend(&shared, vec![vec![], vec![vec![1]]]).expect("valid");
    RewardInstance {
        label: "negative-control".into(),
        seed: None,
        shared,
        split,
        reward: CompositeReward {
            rewards: vec![identity_reward(), identity_reward()],
            composition: Composition::WeightedSum(vec![1.0, -1.0]),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_grid() {
        let shared = FiniteLanguageFunction::new(vec![unit_space()], vec![vec![vec![1]]]).unwrap();
        let cr = CompositeReward {
            rewards: vec![identity_reward()],
            composition: Composition::Min,
        };
        assert_eq!(optimize_shared(&shared, &cr).unwrap(), (0, 1.0));
    }

    #[test]
    fn ties_go_to_first_index() {
        let inst = separable_instance();
        let mut inst2 = inst.clone();
        inst2.shared.table = vec![vec![vec![1, 1]], vec![vec![1, 1]]];
        assert_eq!(optimize_shared(&inst2.shared, &inst2.reward).unwrap().0, 0);
    }

    #[test]
    fn separable_gives_equality() {
        let r = verify_supremacy(&separable_instance()).unwrap();
        assert!(r.verdict && r.equality && r.separable && r.hypotheses_hold);
        assert_eq!(r.shared_value, r.split_value);
    }

    #[test]
    fn antagonistic_is_strict() {
        let r = verify_supremacy(&antagonistic_instance()).unwrap();
        assert!(r.verdict && !r.equality && !r.separable);
        assert_eq!((r.shared_value, r.split_value), (1.0, 2.0));
    }

    #[test]
    fn weight_on_first_objective_only() {
        let mut inst = antagonistic_instance();
        inst.reward.composition = Composition::WeightedSum(vec![1.0, 0.0]);
        let (_, v) = optimize_split(&inst.split, &inst.reward).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn negative_control_violates() {
        let r = verify_supremacy(&negative_control()).unwrap();
        assert!(!r.hypotheses_hold);
        assert!(!r.verdict);
    }

    #[test]
    fn broken_construction_rejected() {
        let mut inst = antagonistic_instance();
        inst.split.tables[0][0] = vec![0];
        assert!(matches!(
            verify_supremacy(&inst),
            Err(Error::Construction(_))
        ));
        let mut short = antagonistic_instance();
        short.split.tables[1].truncate(1);
        assert!(matches!(
            verify_supremacy(&short),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn monotone_families() {
        let sets = vec![vec![-1.0, 0.0, 2.0], vec![0.5, 3.0]];
        assert!(check_monotone(&Composition::Min, &sets).unwrap());
        assert!(check_monotone(&Composition::WeightedSum(vec![0.0, 2.0]), &sets).unwrap());
        assert!(!check_monotone(&Composition::WeightedSum(vec![1.0, -0.1]), &sets).unwrap());
        assert!(check_monotone(&Composition::ProductShifted(1.5), &sets).unwrap());
        assert!(!check_monotone(&Composition::ProductShifted(0.0), &sets).unwrap());
    }

    #[test]
    fn monotone_grid_guard() {
        let big = vec![(0..1001).map(f64::from).collect::<Vec<_>>(); 2];
        assert!(matches!(
            check_monotone(&Composition::Min, &big),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn random_instances_satisfy_hypotheses() {
        for seed in 0..20 {
            let inst = random_instance(seed).unwrap();
            let r = verify_supremacy(&inst).unwrap();
            assert!(r.hypotheses_hold, "seed {seed}");
            assert!(
                r.verdict && r.pointwise_holds && r.all_shared_dominated,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn reward_order_violation_detected() {
        let r = RewardFunction::componentwise(&unit_space(), vec![1.0, 0.0]).unwrap();
        assert!(!r.is_monotone());
    }
}
