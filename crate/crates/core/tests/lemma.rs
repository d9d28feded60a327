use bicameral::reward::{
    antagonistic_instance, check_monotone, negative_control, optimize_shared, optimize_split,
    random_instance, separable_instance, verify_supremacy, CompositeReward, Composition,
    FiniteLanguageFunction, RewardFunction, RewardInstance, SplitLanguageFunction,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Second enumerator: walks the grids in reverse and keeps the last maximum
/// seen, which is the first index in forward order.
fn oracle_shared(inst: &RewardInstance) -> (usize, f64) {
    let f = &inst.shared;
    let cr = &inst.reward;
    let mut best: Option<(usize, f64)> = None;
    for theta in (0..f.grid_size()).rev() {
        let mut means = vec![0.0; f.n_objectives()];
        for (i, m) in means.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..f.n_inputs() {
                acc += cr.rewards[i].value(f.eval(theta, t)[i]);
            }
            *m = acc / f.n_inputs() as f64;
        }
        let v = cr.value(&means);
        if best.is_none_or(|(_, b)| v >= b) {
            best = Some((theta, v));
        }
    }
    best.unwrap()
}

fn oracle_split(inst: &RewardInstance) -> (Vec<usize>, Vec<f64>, f64) {
    let f = &inst.split;
    let cr = &inst.reward;
    let mut thetas = Vec::new();
    let mut means = Vec::new();
    for (i, size) in f.grid_sizes().into_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for th in (0..size).rev() {
            let mut acc = 0.0;
            for t in 0..f.n_inputs() {
                acc += cr.rewards[i].value(f.eval(i, th, t));
            }
            let m = acc / f.n_inputs() as f64;
            if best.is_none_or(|(_, b)| m >= b) {
                best = Some((th, m));
            }
        }
        thetas.push(best.unwrap().0);
        means.push(best.unwrap().1);
    }
    let v = cr.value(&means);
    (thetas, means, v)
}

fn pairwise_monotone(m: &Composition, sets: &[Vec<f64>]) -> bool {
    let mut points = vec![vec![]];
    for s in sets {
        points = points
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                s.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    for a in &points {
        for b in &points {
            if a.iter().zip(b).all(|(x, y)| x <= y) && m.apply(a) > m.apply(b) {
                return false;
            }
        }
    }
    true
}

#[test]
fn optimizers_agree_with_second_enumerator() {
    for seed in 0..200 {
        let inst = random_instance(seed).unwrap();
        let (th, v) = optimize_shared(&inst.shared, &inst.reward).unwrap();
        assert_eq!((th, v), oracle_shared(&inst), "seed {seed}");
        let (ths, vs) = optimize_split(&inst.split, &inst.reward).unwrap();
        let (oth, _, ov) = oracle_split(&inst);
        assert_eq!((ths, vs), (oth, ov), "seed {seed}");
    }
}

#[test]
fn hundred_point_two_objective_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let space: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64 / 5.0]).collect();
    let table = (0..100)
        .map(|_| {
            (0..3)
                .map(|_| vec![rng.random_range(0..6), rng.random_range(0..6)])
                .collect()
        })
        .collect();
    let shared = FiniteLanguageFunction::new(vec![space.clone(), space.clone()], table).unwrap();
    let split = SplitLanguageFunction::extend(&shared, vec![vec![], vec![]]).unwrap();
    let values: Vec<f64> = space.iter().map(|p| p[0].powi(2)).collect();
    let inst = RewardInstance {
        label: "grid-100".into(),
        seed: Some(42),
        shared,
        split,
        reward: CompositeReward {
            rewards: vec![
                RewardFunction::componentwise(&space, values.clone()).unwrap(),
                RewardFunction::componentwise(&space, values).unwrap(),
            ],
            composition: Composition::WeightedSum(vec![0.3, 0.7]),
        },
    };
    assert_eq!(
        optimize_shared(&inst.shared, &inst.reward).unwrap(),
        oracle_shared(&inst)
    );
    assert!(verify_supremacy(&inst).unwrap().verdict);
}

#[test]
fn two_hundred_random_instances_hold() {
    for seed in 0..200 {
        let r = verify_supremacy(&random_instance(seed).unwrap()).unwrap();
        assert!(r.hypotheses_hold, "seed {seed}");
        assert!(r.verdict, "seed {seed}: {r:?}");
        assert!(r.per_objective_dominance.iter().all(|&d| d), "seed {seed}");
        assert!(r.pointwise_holds, "seed {seed}");
        assert!(r.all_shared_dominated, "seed {seed}");
        assert_eq!(r.verdict, r.shared_value <= r.split_value + 1e-12);
    }
}

#[test]
fn randomly_chosen_shared_point_is_dominated() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..100 {
        let inst = random_instance(1000 + seed).unwrap();
        let f = &inst.shared;
        let theta = rng.random_range(0..f.grid_size());
        let means: Vec<f64> = (0..f.n_objectives())
            .map(|i| {
                (0..f.n_inputs())
                    .map(|t| inst.reward.rewards[i].value(f.eval(theta, t)[i]))
                    .sum::<f64>()
                    / f.n_inputs() as f64
            })
            .collect();
        let (_, split) = optimize_split(&inst.split, &inst.reward).unwrap();
        assert!(inst.reward.value(&means) <= split + 1e-12);
    }
}

#[test]
fn separable_and_antagonistic_examples() {
    let r = verify_supremacy(&separable_instance()).unwrap();
    assert!(r.equality && r.separable);
    let r = verify_supremacy(&antagonistic_instance()).unwrap();
    assert!(r.split_value > r.shared_value);
}

#[test]
fn identical_objectives_split_equals_shared() {
    let space = vec![vec![0.0], vec![0.5], vec![1.0]];
    let table = vec![
        vec![vec![0, 0], vec![2, 2]],
        vec![vec![1, 1], vec![1, 1]],
        vec![vec![2, 2], vec![0, 0]],
    ];
    let shared = FiniteLanguageFunction::new(vec![space.clone(), space.clone()], table).unwrap();
    let split = SplitLanguageFunction::extend(&shared, vec![vec![], vec![]]).unwrap();
    let r = |v: Vec<f64>| RewardFunction::componentwise(&space, v).unwrap();
    let inst = RewardInstance {
        label: "identical".into(),
        seed: None,
        shared,
        split,
        reward: CompositeReward {
            rewards: vec![r(vec![0.0, 0.2, 1.0]), r(vec![0.0, 0.2, 1.0])],
            composition: Composition::Min,
        },
    };
    let rep = verify_supremacy(&inst).unwrap();
    assert_eq!(rep.shared_value, rep.split_value);
}

#[test]
fn single_objective_reduces_to_maximizing_it() {
    let space = vec![vec![0.0], vec![1.0], vec![2.0]];
    let table = vec![vec![vec![1]], vec![vec![2]], vec![vec![0]]];
    let shared = FiniteLanguageFunction::new(vec![space.clone()], table).unwrap();
    let cr = CompositeReward {
        rewards: vec![RewardFunction::componentwise(&space, vec![0.0, 3.0, 5.0]).unwrap()],
        composition: Composition::Min,
    };
    assert_eq!(optimize_shared(&shared, &cr).unwrap(), (1, 5.0));
}

#[test]
fn negative_control_breaks_the_inequality() {
    let r = verify_supremacy(&negative_control()).unwrap();
    assert!(!r.composition_monotone);
    assert!(r.shared_value > r.split_value);
}

/// Averaging `M` over inputs, instead of applying `M` to the per-objective
/// means, can put the split tuple below the shared optimum.
#[test]
fn mean_of_min_is_not_dominated() {
    let space = vec![vec![0.0], vec![0.4], vec![1.0]];
    // θA: R1 = (1, 0), R2 = (0, 0); θB: R1 = (0, 0), R2 = (0, 1); θC: all 0.4
    let table = vec![
        vec![vec![2, 0], vec![0, 0]],
        vec![vec![0, 0], vec![0, 2]],
        vec![vec![1, 1], vec![1, 1]],
    ];
    let shared = FiniteLanguageFunction::new(vec![space.clone(), space.clone()], table).unwrap();
    let split = SplitLanguageFunction::extend(&shared, vec![vec![], vec![]]).unwrap();
    let id = RewardFunction::componentwise(&space, vec![0.0, 0.4, 1.0]).unwrap();
    let inst = RewardInstance {
        label: "mean-of-min".into(),
        seed: None,
        shared,
        split,
        reward: CompositeReward {
            rewards: vec![id.clone(), id],
            composition: Composition::Min,
        },
    };
    let r = verify_supremacy(&inst).unwrap();
    assert!(r.verdict);
    assert_eq!(r.split_thetas, vec![0, 1]);

    let per_input_min = |t: usize| {
        let a = inst.split.eval(0, r.split_thetas[0], t);
        let b = inst.split.eval(1, r.split_thetas[1], t);
        inst.reward.rewards[0]
            .value(a)
            .min(inst.reward.rewards[1].value(b))
    };
    let mean_of_min_split = (per_input_min(0) + per_input_min(1)) / 2.0;
    assert_eq!(mean_of_min_split, 0.0);
    assert!((r.shared_value - 0.4).abs() < 1e-15);
}

#[test]
fn neighbour_walk_agrees_with_pairwise_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let maps: Vec<Composition> = vec![
        Composition::Min,
        Composition::WeightedSum(vec![0.5, 0.0, 2.0]),
        Composition::WeightedSum(vec![0.5, -0.01, 2.0]),
        Composition::ProductShifted(0.5),
        Composition::ProductShifted(3.0),
        Composition::custom("max-minus-spread", |r| {
            let hi = r.iter().cloned().fold(f64::MIN, f64::max);
            let lo = r.iter().cloned().fold(f64::MAX, f64::min);
            hi - 0.5 * (hi - lo)
        }),
        Composition::custom("bump", |r| r.iter().sum::<f64>() - (r[0] - 0.3).abs()),
    ];
    for m in &maps {
        for _ in 0..10 {
            let sets: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    (0..rng.random_range(1..5))
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect()
                })
                .collect();
            assert_eq!(
                check_monotone(m, &sets).unwrap(),
                pairwise_monotone(m, &sets),
                "{m:?} on {sets:?}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lemma_holds_on_generated_instances(seed in any::<u64>()) {
        let r = verify_supremacy(&random_instance(seed).unwrap()).unwrap();
        prop_assert!(r.hypotheses_hold);
        prop_assert!(r.verdict);
        prop_assert!(r.pointwise_holds);
    }
}
