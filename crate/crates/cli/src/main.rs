use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use bicameral::data::{generate_synthetic_dataset, pretrain_windows, read_jsonl, write_jsonl};
use bicameral::generation::generate;
use bicameral::reward::{random_instance, verify_supremacy};
use bicameral::training::{language_checkpoint, language_from_checkpoint, train_doppelganger};
use bicameral::{
    gradcheck, Alphabet, BicameralModel, Checkpoint, DoppelConfig, DoppelTrainConfig, Error,
    LMConfig, LanguageModel, PretrainConfig, SamplerConfig, SupervisedSequence, SyntheticTaskSpec,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "bicameral",
    version,
    about = "Frozen language model with a per-token supervisor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the language component on a text corpus.
    Pretrain(Flags),
    /// Mark the language component of a checkpoint as frozen.
    Freeze(Flags),
    /// Write a synthetic supervision dataset (train.jsonl, val.jsonl).
    MakeData(Flags),
    /// Train the supervisor against a frozen language component.
    TrainDoppel(Flags),
    /// Generate tokens and stream per-token scores.
    Generate(Flags),
    /// Verify the split-objective inequality on random finite instances.
    LemmaDemo(Flags),
    /// Finite-difference gradient checks for every differentiable operation.
    Gradcheck(Flags),
}

#[derive(Args, Clone, Default)]
struct Flags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Alphabet file (one character per line, `\n` for newline).
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// Dataset directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log (JSON lines); standard output when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    instances: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    #[default]
    Jsonl,
    Plain,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct Paths {
    corpus: Option<PathBuf>,
    alphabet: Option<PathBuf>,
    dataset: Option<PathBuf>,
    checkpoint_in: Option<PathBuf>,
    checkpoint_out: Option<PathBuf>,
    log: Option<PathBuf>,
    report: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenerateConfig {
    prompt: String,
    max_new: usize,
    format: Format,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            max_new: 32,
            format: Format::Jsonl,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    command: String,
    seed: u64,
    paths: Paths,
    lm: LMConfig,
    doppel: DoppelConfig,
    pretrain: PretrainConfig,
    train: DoppelTrainConfig,
    sampler: SamplerConfig,
    data: Option<SyntheticTaskSpec>,
    generate: GenerateConfig,
    instances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            paths: Paths::default(),
            lm: LMConfig::default(),
            doppel: DoppelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: DoppelTrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: None,
            generate: GenerateConfig::default(),
            instances: 200,
        }
    }
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Refusal(anyhow::Error),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Refusal(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let refusal = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(
                    Error::NotFrozen
                        | Error::Frozen
                        | Error::Version { .. }
                        | Error::Checkpoint(_)
                        | Error::TapMismatch { .. }
                )
            )
        });
        if refusal {
            Failure::Refusal(e)
        } else {
            Failure::Config(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Config(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(flags: &Flags, command: &str) -> anyhow::Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    cfg.command = command.to_string();
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.corpus, &flags.corpus),
        (&mut p.alphabet, &flags.alphabet),
        (&mut p.dataset, &flags.dataset),
        (&mut p.checkpoint_in, &flags.checkpoint),
        (&mut p.checkpoint_out, &flags.out),
        (&mut p.log, &flags.log),
        (&mut p.report, &flags.report),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(e) = flags.epochs {
        cfg.pretrain.epochs = e;
        cfg.train.epochs = e;
    }
    if let Some(s) = &flags.prompt {
        cfg.generate.prompt = s.clone();
    }
    if let Some(n) = flags.max_new {
        cfg.generate.max_new = n;
    }
    if let Some(f) = flags.format {
        cfg.generate.format = f;
    }
    if let Some(k) = flags.instances {
        cfg.instances = k;
    }
    // --seed (or the absence of a config file) sets every stage seed
    if flags.seed.is_some() || flags.config.is_none() {
        cfg.pretrain.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.sampler.seed = cfg.seed;
        if let Some(d) = &mut cfg.data {
            d.seed = cfg.seed;
        }
    }
    for path in [
        &cfg.paths.corpus,
        &cfg.paths.alphabet,
        &cfg.paths.checkpoint_in,
    ]
    .into_iter()
    .flatten()
    {
        if !path.exists() {
            return Err(anyhow!("input path {} does not exist", path.display()));
        }
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("missing --{flag}"))
}

fn record(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("run config serializes")
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn checkpoint_alphabet(ckpt: &Checkpoint) -> anyhow::Result<Option<Alphabet>> {
    Ok(match &ckpt.meta.alphabet {
        Some(chars) => Some(Alphabet::new(chars.clone())?),
        None => None,
    })
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = required(&cfg.paths.checkpoint_in, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_pretrain(cfg: &RunConfig) -> Outcome {
    let corpus_path = required(&cfg.paths.corpus, "corpus")?;
    let text = fs::read_to_string(corpus_path).context("reading corpus")?;
    let alphabet = match &cfg.paths.alphabet {
        Some(p) => Alphabet::load(p)?,
        None => Alphabet::from_text(&text)?,
    };
    let out = required(&cfg.paths.checkpoint_out, "out")?;
    let lm_cfg = LMConfig {
        vocab_size: alphabet.len(),
        ..cfg.lm.clone()
    };
    let mut lm = LanguageModel::new(lm_cfg, cfg.seed)?;
    let windows = pretrain_windows(&alphabet.encode(&text)?, cfg.pretrain.seq_len);
    let losses = lm.pretrain(&windows, &cfg.pretrain)?;
    language_checkpoint(&lm, Some(&alphabet), Some(record(cfg))).save(out)?;
    let mut log = output(&cfg.paths.log)?;
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(
            log,
            "{}",
            serde_json::json!({"epoch": epoch + 1, "train_loss": loss})
        )?;
    }
    log.flush()?;
    Ok(())
}

fn cmd_freeze(cfg: &RunConfig) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let out = required(&cfg.paths.checkpoint_out, "out")?;
    let mut lm = language_from_checkpoint(&ckpt)?;
    lm.freeze();
    let alphabet = checkpoint_alphabet(&ckpt)?;
    let run = ckpt.meta.run_config.clone();
    language_checkpoint(&lm, alphabet.as_ref(), run).save(out)?;
    eprintln!("frozen; language checksum {:016x}", lm.checksum());
    Ok(())
}

fn cmd_make_data(cfg: &RunConfig) -> Outcome {
    let spec = cfg
        .data
        .as_ref()
        .ok_or_else(|| anyhow!("make-data needs a `data` section in --config"))?;
    let dir = required(&cfg.paths.dataset, "dataset")?;
    let alphabet = match (&cfg.paths.alphabet, &cfg.paths.checkpoint_in) {
        (Some(p), _) => Some(Alphabet::load(p)?),
        (None, Some(_)) => checkpoint_alphabet(&load_checkpoint(cfg)?)?,
        (None, None) => None,
    };
    let data = generate_synthetic_dataset(spec, alphabet.as_ref())?;
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &data.train)?;
    write_jsonl(&dir.join("val.jsonl"), &data.val)?;
    eprintln!(
        "wrote {} train and {} val sequences",
        data.train.len(),
        data.val.len()
    );
    Ok(())
}

fn cmd_train_doppel(cfg: &RunConfig) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let dir = required(&cfg.paths.dataset, "dataset")?;
    let out = required(&cfg.paths.checkpoint_out, "out")?;
    let train: Vec<SupervisedSequence> = read_jsonl(&dir.join("train.jsonl"))?;
    let val_path = dir.join("val.jsonl");
    let val: Vec<SupervisedSequence> = if val_path.exists() {
        read_jsonl(&val_path)?
    } else {
        Vec::new()
    };
    let mut bm = match ckpt.meta.doppel {
        Some(_) => BicameralModel::from_checkpoint(&ckpt)?,
        None => {
            let n = train
                .first()
                .map_or(cfg.doppel.n_objectives, |s| s.n_objectives());
            let dcfg = DoppelConfig {
                n_objectives: n,
                ..cfg.doppel.clone()
            };
            BicameralModel::attach(language_from_checkpoint(&ckpt)?, dcfg, cfg.seed)?
        }
    };
    let logs = train_doppelganger(&mut bm, &train, &val, &cfg.train)?;
    let alphabet = checkpoint_alphabet(&ckpt)?;
    bm.to_checkpoint(alphabet.as_ref(), Some(record(cfg)))
        .save(out)?;
    let mut log = output(&cfg.paths.log)?;
    for l in &logs {
        serde_json::to_writer(&mut log, l)?;
        writeln!(log)?;
    }
    log.flush()?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig) -> Outcome {
    let ckpt = load_checkpoint(cfg)?;
    let alphabet = checkpoint_alphabet(&ckpt)?;
    let with_scores = ckpt.meta.doppel.is_some();
    let bm = if with_scores {
        BicameralModel::from_checkpoint(&ckpt)?
    } else {
        // language-only checkpoint: events carry no scores
        BicameralModel::attach(
            language_from_checkpoint(&ckpt)?,
            cfg.doppel.clone(),
            cfg.seed,
        )?
    };
    let prompt = match &alphabet {
        Some(a) => a.encode(&cfg.generate.prompt)?,
        None => cfg
            .generate
            .prompt
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .context("prompt ids must be integers without an alphabet")
            })
            .collect::<anyhow::Result<_>>()?,
    };
    if prompt.is_empty() {
        return Err(Failure::Config(anyhow!("--prompt must not be empty")));
    }
    let mut session = generate(&bm, &prompt, cfg.generate.max_new, cfg.sampler.clone())?;
    if let Some(a) = &alphabet {
        session = session.with_alphabet(a);
    }
    if !with_scores {
        session = session.without_scores();
    }
    let mut out = output(&None)?;
    let mut text = String::new();
    for event in session {
        let e = event?;
        match cfg.generate.format {
            Format::Jsonl => {
                serde_json::to_writer(&mut out, &e)?;
                writeln!(out)?;
            }
            Format::Plain => {
                let marker = if e.pos < prompt.len() { ' ' } else { '+' };
                let scores: Vec<String> = e.scores.iter().map(|s| format!("{s:.3}")).collect();
                let line = format!(
                    "{marker}{:>4}  {:<6} {}",
                    e.pos,
                    format!("{:?}", e.token),
                    scores.join(" ")
                );
                writeln!(out, "{}", line.trim_end())?;
                text.push_str(&e.token);
            }
        }
        out.flush()?;
    }
    if cfg.generate.format == Format::Plain {
        writeln!(out, "{text}")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_lemma_demo(cfg: &RunConfig) -> Outcome {
    let mut out = output(&cfg.paths.report)?;
    let mut failures = 0;
    for k in 0..cfg.instances {
        let seed = cfg.seed.wrapping_add(k as u64);
        let report = verify_supremacy(&random_instance(seed)?)?;
        if !report.verdict {
            failures += 1;
        }
        serde_json::to_writer(&mut out, &report)?;
        writeln!(out)?;
    }
    out.flush()?;
    eprintln!("{} instances, {failures} violations", cfg.instances);
    if failures > 0 {
        return Err(Failure::Numeric(format!(
            "{failures} instances violate the inequality"
        )));
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Outcome {
    let reports = gradcheck::suite(cfg.seed)?;
    let mut out = output(&cfg.paths.report)?;
    writeln!(
        out,
        "{:<24} {:>8} {:>12}  result",
        "operation", "checked", "max rel err"
    )?;
    for r in &reports {
        writeln!(
            out,
            "{:<24} {:>8} {:>12.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        )?;
    }
    out.flush()?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags, run): (&str, &Flags, fn(&RunConfig) -> Outcome) = match &cli.command {
        Command::Pretrain(f) => ("pretrain", f, cmd_pretrain),
        Command::Freeze(f) => ("freeze", f, cmd_freeze),
        Command::MakeData(f) => ("make-data", f, cmd_make_data),
        Command::TrainDoppel(f) => ("train-doppel", f, cmd_train_doppel),
        Command::Generate(f) => ("generate", f, cmd_generate),
        Command::LemmaDemo(f) => ("lemma-demo", f, cmd_lemma_demo),
        Command::Gradcheck(f) => ("gradcheck", f, cmd_gradcheck),
    };
    let result = load_config(flags, name)
        .map_err(Failure::Config)
        .and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("error: {e:#}"),
                Failure::Refusal(e) => eprintln!("refused: {e:#}"),
                Failure::Numeric(msg) => eprintln!("numeric failure: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
