//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bicameral::data::{
    generate_synthetic_dataset, pretrain_windows, CorpusSource, Dataset, TokenSet,
};
use bicameral::generation::generate;
use bicameral::gradcheck;
use bicameral::reward::{negative_control, random_instance, separable_instance, verify_supremacy};
use bicameral::training::{evaluate, language_checkpoint, train_doppelganger};
use bicameral::{
    Alphabet, BicameralModel, Checkpoint, DoppelConfig, DoppelTrainConfig, EpochLog, LMConfig,
    LanguageModel, PretrainConfig, SamplerConfig, SyntheticTaskSpec, TaskKind, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS: &str = include_str!("../data/corpus.txt");
const SEED: u64 = 2024;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// The default-scale run shared by criteria 2 to 5.
struct Trained {
    alphabet: Alphabet,
    model: BicameralModel,
    data: Dataset,
    log: Vec<EpochLog>,
    pretrain_time: Duration,
    train_time: Duration,
    before: Snapshot,
    after: Snapshot,
}

#[derive(PartialEq)]
struct Snapshot {
    checksum: u64,
    probe_logits: Vec<Vec<u8>>,
    greedy: Vec<usize>,
}

fn probe_batch(alphabet: &Alphabet) -> Vec<Vec<usize>> {
    ["the river runs", "a cat sleeps on the warm steps", "w"]
        .iter()
        .map(|s| alphabet.encode(s).unwrap())
        .collect()
}

fn snapshot(bm: &BicameralModel, alphabet: &Alphabet) -> Snapshot {
    let probe_logits = probe_batch(alphabet)
        .iter()
        .map(|p| bm.language.forward(p).unwrap().0.to_le_bytes())
        .collect();
    let prompt = alphabet.encode("the old ").unwrap();
    let greedy = generate(bm, &prompt, 40, SamplerConfig::greedy())
        .unwrap()
        .without_scores()
        .map(|e| e.unwrap().id)
        .collect();
    Snapshot {
        checksum: bm.language.checksum(),
        probe_logits,
        greedy,
    }
}

fn train_default_scale() -> Trained {
    let alphabet = Alphabet::from_text(CORPUS).unwrap();
    let cfg = LMConfig {
        vocab_size: alphabet.len(),
        ..LMConfig::default()
    };
    let mut lm = LanguageModel::new(cfg, SEED).unwrap();
    let t0 = Instant::now();
    let windows = pretrain_windows(&alphabet.encode(CORPUS).unwrap(), 64);
    lm.pretrain(
        &windows,
        &PretrainConfig {
            epochs: 30,
            seed: SEED,
            ..Default::default()
        },
    )
    .unwrap();
    let pretrain_time = t0.elapsed();
    lm.freeze();

    let spec = SyntheticTaskSpec {
        tasks: vec![TaskKind::ForbiddenToken {
            forbidden: TokenSet::Chars("w".into()),
        }],
        corpus: CorpusSource::Inline {
            text: CORPUS.to_string(),
        },
        num_sequences: 640,
        seq_len: 32,
        train_fraction: 0.8,
        seed: SEED,
    };
    let data = generate_synthetic_dataset(&spec, Some(&alphabet)).unwrap();
    let mut model = BicameralModel::attach(lm, DoppelConfig::default(), SEED).unwrap();
    let before = snapshot(&model, &alphabet);
    let t1 = Instant::now();
    let log = train_doppelganger(
        &mut model,
        &data.train,
        &data.val,
        &DoppelTrainConfig {
            seed: SEED,
            ..Default::default()
        },
    )
    .unwrap();
    let train_time = t1.elapsed();
    let after = snapshot(&model, &alphabet);
    Trained {
        alphabet,
        model,
        data,
        log,
        pretrain_time,
        train_time,
        before,
        after,
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::suite(SEED).unwrap();
    let elapsed = t.elapsed();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} cases, worst rel. error {worst:.2e}, failed {failed:?}, {:.1}s (< 60s)",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(t: &Trained) -> Outcome {
    let same_sum = t.before.checksum == t.after.checksum;
    let same_logits = t.before.probe_logits == t.after.probe_logits;
    let same_stream = t.before.greedy == t.after.greedy;
    outcome(
        same_sum && same_logits && same_stream,
        format!(
            "checksum {:016x} -> {:016x}, probe logits identical: {same_logits}, greedy stream identical: {same_stream}",
            t.before.checksum, t.after.checksum
        ),
    )
}

fn criterion_3(t: &Trained) -> Outcome {
    let model = t.model.clone();
    let prompt = t.alphabet.encode("the bakery ").unwrap();
    let events: Vec<_> = generate(&model, &prompt, 32, SamplerConfig::greedy())
        .unwrap()
        .with_alphabet(&t.alphabet)
        .collect::<Result<_, _>>()
        .unwrap();
    let passes = model.language_passes();
    let ids: Vec<usize> = events.iter().map(|e| e.id).collect();
    let mut mismatches = 0;
    for (pos, e) in events.iter().enumerate() {
        // recompute over the sequence as it stood when the event was emitted
        let recomputed = t.model.score_prefixes(&ids[..=pos]).unwrap();
        if e.scores != recomputed.row(pos) {
            mismatches += 1;
        }
    }
    outcome(
        passes == 33 && mismatches == 0 && events.len() == prompt.len() + 32,
        format!("language passes {passes} (expect 33), score mismatches {mismatches}"),
    )
}

fn criterion_4(t: &Trained) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let vocab = t.alphabet.len();
    let mut checked = 0;
    let mut violations = 0;
    for _ in 0..100 {
        let len = rng.random_range(2..=32);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let base = t.model.score_prefixes(&seq).unwrap();
        for cut in 1..len {
            let mut other = seq[..cut].to_vec();
            let new_len = rng.random_range(cut + 1..=32);
            other.extend((cut..new_len).map(|_| rng.random_range(0..vocab)));
            let mutated = t.model.score_prefixes(&other).unwrap();
            checked += cut;
            if base.slice_rows(0, cut).to_le_bytes() != mutated.slice_rows(0, cut).to_le_bytes() {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("100 sequences, suffix mutated at every cut, {checked} prefix rows compared, {violations} cuts changed"),
    )
}

fn criterion_5(t: &Trained) -> Outcome {
    let val = evaluate(&t.model, &t.data.val).unwrap();
    let train = evaluate(&t.model, &t.data.train).unwrap();
    let initial = t.log[0].train_loss;
    let epochs = t.log.len() - 1;
    let budget = Duration::from_secs(600);
    let total = t.pretrain_time + t.train_time;
    let base_rate = {
        let ys: Vec<f64> = t
            .data
            .val
            .iter()
            .flat_map(|s| s.labels.iter().map(|l| l[0]))
            .collect();
        ys.iter().sum::<f64>() / ys.len() as f64
    };
    outcome(
        val.accuracy[0] >= 0.95 && train.bce < 0.5 * initial && epochs <= 50 && total < budget,
        format!(
            "val accuracy {:.4} (>= 0.95; positive rate {base_rate:.3}), train BCE {:.4} vs initial {initial:.4} (< 0.5x), {epochs} epochs, pretrain {:.0}s + supervisor {:.0}s (< 600s)",
            val.accuracy[0],
            train.bce,
            t.pretrain_time.as_secs_f64(),
            t.train_time.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut violations = 0;
    let mut dominance_failures = 0;
    let mut pointwise_failures = 0;
    let mut invalid = 0;
    for seed in 0..200 {
        let r = verify_supremacy(&random_instance(SEED + seed).unwrap()).unwrap();
        invalid += usize::from(!r.hypotheses_hold);
        violations += usize::from(!r.verdict);
        dominance_failures += r.per_objective_dominance.iter().filter(|&&d| !d).count();
        pointwise_failures += usize::from(!r.pointwise_holds);
    }
    let sep = verify_supremacy(&separable_instance()).unwrap();
    let neg = verify_supremacy(&negative_control()).unwrap();
    let elapsed = t.elapsed();
    outcome(
        invalid == 0
            && violations == 0
            && dominance_failures == 0
            && pointwise_failures == 0
            && sep.equality
            && sep.separable
            && sep.shared_value == sep.split_value
            && !neg.composition_monotone
            && !neg.verdict
            && elapsed < Duration::from_secs(30),
        format!(
            "200 instances: {violations} violations, {dominance_failures} dominance failures, {pointwise_failures} pointwise failures; separable equality {}; negative control {} > {}; {:.2}s (< 30s)",
            sep.equality,
            neg.shared_value,
            neg.split_value,
            elapsed.as_secs_f64()
        ),
    )
}

/// Small end-to-end run whose every artifact is returned as bytes.
fn small_pipeline(dir: &std::path::Path) -> Vec<Vec<u8>> {
    let alphabet = Alphabet::from_text(CORPUS).unwrap();
    let cfg = LMConfig {
        vocab_size: alphabet.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
    };
    let mut lm = LanguageModel::new(cfg, SEED).unwrap();
    let windows = pretrain_windows(&alphabet.encode(&CORPUS[..2000]).unwrap(), 32);
    let plog = lm
        .pretrain(
            &windows,
            &PretrainConfig {
                epochs: 2,
                seq_len: 32,
                seed: SEED,
                ..Default::default()
            },
        )
        .unwrap();
    lm.freeze();
    let lm_path = dir.join("lm.ckpt");
    language_checkpoint(&lm, Some(&alphabet), None)
        .save(&lm_path)
        .unwrap();

    let lm = bicameral::training::language_from_checkpoint(&Checkpoint::load(&lm_path).unwrap())
        .unwrap();
    let spec = SyntheticTaskSpec {
        tasks: vec![TaskKind::ForbiddenToken {
            forbidden: TokenSet::Chars("w".into()),
        }],
        corpus: CorpusSource::Inline {
            text: CORPUS.to_string(),
        },
        num_sequences: 48,
        seq_len: 16,
        train_fraction: 0.75,
        seed: SEED,
    };
    let data = generate_synthetic_dataset(&spec, Some(&alphabet)).unwrap();
    let mut bm = BicameralModel::attach(
        lm,
        DoppelConfig {
            d_shadow: 8,
            n_objectives: 1,
            n_heads_shadow: 2,
            d_ff_shadow: 16,
        },
        SEED,
    )
    .unwrap();
    let dlog = train_doppelganger(
        &mut bm,
        &data.train,
        &data.val,
        &DoppelTrainConfig {
            epochs: 2,
            seed: SEED,
            ..Default::default()
        },
    )
    .unwrap();
    let full_path = dir.join("full.ckpt");
    bm.to_checkpoint(Some(&alphabet), None)
        .save(&full_path)
        .unwrap();
    let bm = BicameralModel::from_checkpoint(&Checkpoint::load(&full_path).unwrap()).unwrap();
    let events: Vec<String> = generate(
        &bm,
        &alphabet.encode("the ").unwrap(),
        8,
        SamplerConfig::greedy(),
    )
    .unwrap()
    .with_alphabet(&alphabet)
    .map(|e| serde_json::to_string(&e.unwrap()).unwrap())
    .collect();
    vec![
        serde_json::to_vec(&plog).unwrap(),
        std::fs::read(&lm_path).unwrap(),
        serde_json::to_vec(&dlog).unwrap(),
        std::fs::read(&full_path).unwrap(),
        events.join("\n").into_bytes(),
    ]
}

fn criterion_7(t: &Trained) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = small_pipeline(a.path());
    let second = small_pipeline(b.path());
    let identical = first == second;

    let path = a.path().join("default.ckpt");
    let ckpt = t.model.to_checkpoint(Some(&t.alphabet), None);
    ckpt.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = BicameralModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let round_trip = loaded
        .to_checkpoint(Some(&t.alphabet), None)
        .to_bytes()
        .unwrap()
        == bytes;
    let params_equal = loaded
        .to_checkpoint(None, None)
        .tensors
        .iter()
        .zip(&ckpt.tensors)
        .all(
            |((n1, t1), (n2, t2)): (&(String, Tensor), &(String, Tensor))| {
                n1 == n2 && t1.to_le_bytes() == t2.to_le_bytes()
            },
        );
    outcome(
        identical && round_trip && params_equal,
        format!(
            "pipeline artifacts identical across reruns: {identical} ({} artifacts), default-scale checkpoint round trip bitwise: {}",
            first.len(),
            round_trip && params_equal
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "[{}] {name}: {detail} [{:.1}s]",
        if passed { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    passed
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    println!("acceptance suite");
    let mut ok = run("1 gradient integrity", criterion_1);
    let trained = catch_unwind(train_default_scale);
    match &trained {
        Ok(t) => {
            ok &= run("2 frozen-language invariance", || criterion_2(t));
            ok &= run("3 concurrent per-token scoring", || criterion_3(t));
            ok &= run("4 score causality", || criterion_4(t));
            ok &= run("5 desk-scale learning", || criterion_5(t));
        }
        Err(_) => {
            for name in [
                "2 frozen-language invariance",
                "3 concurrent per-token scoring",
                "4 score causality",
                "5 desk-scale learning",
            ] {
                println!("[FAIL] {name}: default-scale training run panicked");
            }
            ok = false;
        }
    }
    ok &= run("6 split-objective lemma", criterion_6);
    match &trained {
        Ok(t) => ok &= run("7 determinism and persistence", || criterion_7(t)),
        Err(_) => {
            println!("[FAIL] 7 determinism and persistence: default-scale training run panicked");
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
