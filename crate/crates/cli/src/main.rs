use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use smlp::analysis::{attention_cost, model_costs, probe_all_pairs, sgu_cost, smoe_cost, CostReport, Verdict};
use smlp::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use smlp::data::{Corpus, Vocab};
use smlp::model::{Model, ModelConfig};
use smlp::score::{score_choices, ChoiceTask};
use smlp::train::{evaluate_ppl, TrainConfig, Trainer};
use smlp::{Error, Result};

/// Longest sequence the leak probe will scan.
const PROBE_MAX_T: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "smlp", version, about = "Train, evaluate and analyse sparse all-MLP language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a UTF-8 text corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print validation perplexity of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Print parameter and FLOPs counts.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Check that no output depends on a later input token. Exits 2 on a leak.
    ProbeLeak {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Zero-shot multiple-choice accuracy.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value_t = Normalize::None)]
        normalize: Normalize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Normalize {
    None,
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MixingModule {
    Attention,
    Sgu,
    Smoe,
    All,
}

/// Standalone token-mixing module costs.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixingConfig {
    module: MixingModule,
    hidden: usize,
    seq_len: usize,
    #[serde(default = "default_heads")]
    heads: Vec<usize>,
}

fn default_heads() -> Vec<usize> {
    vec![16, 1]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    #[serde(default)]
    train: TrainConfig,
    mixing: Option<MixingConfig>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SMLP_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("SMLP_SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    let mut cfg: ConfigFile =
        toml::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = env_seed()? {
        if let Some(m) = cfg.model.as_mut() {
            m.seed = seed;
        }
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn require_model(cfg: ConfigFile, path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let model = cfg
        .model
        .ok_or_else(|| Error::Config(format!("{} has no [model] section", path.display())))?;
    Ok((model, cfg.train))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn train(config: &Path, corpus_path: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let (mut mcfg, tcfg) = require_model(load_config(config)?, config)?;
    let text = read_text(corpus_path)?;
    if text.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", corpus_path.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let loaded = load_checkpoint(ckpt)?;
            let vocab = loaded
                .meta
                .vocab
                .as_deref()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))
                .and_then(Vocab::from_chars)?;
            let corpus = Corpus::with_vocab(vocab, &text, tcfg.valid_fraction);
            let t = Trainer::resume(loaded.model, loaded.state, tcfg, &corpus)?;
            (t, corpus)
        }
        None => {
            let corpus = Corpus::from_text(&text, tcfg.valid_fraction)?;
            // A zero vocab_size takes the corpus vocabulary.
            if mcfg.vocab_size == 0 {
                mcfg.vocab_size = corpus.vocab.len();
            }
            let model = Model::build(&mcfg)?;
            (Trainer::new(model, tcfg, &corpus)?, corpus)
        }
    };
    let (trainer, corpus) = (&mut trainer.0, &trainer.1);
    let ckpt_path = out.join("checkpoint.bin");
    let metrics_path = out.join("metrics.txt");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let vocab = corpus.vocab.chars();
    let save = |t: &Trainer| {
        let meta = CheckpointMeta {
            model: t.model.cfg.clone(),
            train: t.cfg.clone(),
            vocab: Some(vocab.clone()),
        };
        save_checkpoint(&ckpt_path, &t.model, &t.state, &meta)
    };
    let total = trainer.cfg.steps;
    let first = trainer.state.step + 1;
    trainer.run(corpus, |t, m| {
        let log = t.cfg.log_every.max(1);
        if m.step % log == 0 || m.step == total || m.step == first {
            println!("{m}");
            writeln!(metrics, "{m}").map_err(io_err(&metrics_path))?;
        }
        if t.cfg.checkpoint_every > 0 && m.step % t.cfg.checkpoint_every == 0 {
            save(t)?;
        }
        Ok(())
    })?;
    save(trainer)?;
    if corpus.valid().len() > trainer.model.cfg.seq_len {
        println!("valid_ppl={:.6}", evaluate_ppl(&trainer.model, corpus.valid())?);
    }
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

fn checkpoint_vocab(meta: &CheckpointMeta) -> Result<Vocab> {
    meta.vocab
        .as_deref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))
        .and_then(Vocab::from_chars)
}

fn eval(ckpt: &Path, corpus_path: &Path) -> Result<()> {
    let loaded = load_checkpoint(ckpt)?;
    let vocab = checkpoint_vocab(&loaded.meta)?;
    let corpus = Corpus::with_vocab(vocab, &read_text(corpus_path)?, loaded.meta.train.valid_fraction);
    let ppl = evaluate_ppl(&loaded.model, corpus.valid())?;
    println!("valid_ppl={ppl:.6}");
    Ok(())
}

fn mixing_report(m: &MixingConfig) -> CostReport {
    let mut rows = Vec::new();
    let attention = matches!(m.module, MixingModule::Attention | MixingModule::All);
    let sgu = matches!(m.module, MixingModule::Sgu | MixingModule::All);
    if attention {
        rows.extend(m.heads.iter().map(|&h| attention_cost(m.hidden, m.seq_len, h)));
    }
    if sgu {
        rows.extend(m.heads.iter().map(|&h| sgu_cost(m.hidden, m.seq_len, h)));
    }
    if matches!(m.module, MixingModule::Smoe | MixingModule::All) {
        rows.push(smoe_cost(m.hidden, m.seq_len));
    }
    CostReport::comparison(rows)
}

fn analyze(config: &Path, json: bool) -> Result<()> {
    let cfg = load_config(config)?;
    if cfg.model.is_none() && cfg.mixing.is_none() {
        return Err(Error::Config(format!("{} has neither [model] nor [mixing]", config.display())));
    }
    if let Some(m) = &cfg.mixing {
        for &h in &m.heads {
            if h == 0 || m.hidden % h != 0 {
                return Err(Error::Divisibility {
                    what: "hidden",
                    value: m.hidden,
                    by: h,
                });
            }
        }
        let r = mixing_report(m);
        println!("{}", if json { r.to_json() } else { r.to_string() });
    }
    if let Some(mcfg) = &cfg.model {
        let r = model_costs(&Model::build(mcfg)?);
        println!("{}", if json { r.to_json() } else { r.to_string() });
    }
    Ok(())
}

fn probe(config: &Path, ckpt: Option<&Path>) -> Result<ExitCode> {
    let model = match ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            let (mcfg, _) = require_model(load_config(config)?, config)?;
            Model::build(&mcfg)?
        }
    };
    let t = model.cfg.seq_len;
    if t > PROBE_MAX_T {
        return Err(Error::Config(format!("probe-leak supports seq_len <= {PROBE_MAX_T}, got {t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
    let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..model.cfg.vocab_size)).collect();
    let s = probe_all_pairs(&model, &tokens)?;
    let verdict = s.verdict();
    println!(
        "pairs={} leaks={} worst_t={} worst_u={} max_delta={:e} verdict={}",
        s.pairs,
        s.leaks,
        s.worst.t,
        s.worst.u,
        s.worst.max_delta,
        if verdict == Verdict::Causal { "causal" } else { "leak" }
    );
    Ok(if verdict == Verdict::Causal {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn score(ckpt: &Path, task: &Path, normalize: Normalize) -> Result<()> {
    let loaded = load_checkpoint(ckpt)?;
    let vocab = checkpoint_vocab(&loaded.meta)?;
    let task = ChoiceTask::from_jsonl(&read_text(task)?)?;
    let report = score_choices(&loaded.model, &vocab, &task, normalize == Normalize::PerToken)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for (i, item) in report.items.iter().enumerate() {
        let scores: Vec<String> = item.scores.iter().map(|s| format!("{s:.6}")).collect();
        let pick = item.pick.map_or("skipped".to_string(), |p| p.to_string());
        println!("item={i} pick={pick} correct={} scores=[{}]", item.correct, scores.join(", "));
    }
    println!("accuracy={:.6} items={}", report.accuracy, report.items.len());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            corpus,
            out,
            resume,
        } => train(&config, &corpus, &out, resume.as_deref())?,
        Command::Eval { ckpt, corpus } => eval(&ckpt, &corpus)?,
        Command::Analyze { config, json } => analyze(&config, json)?,
        Command::ProbeLeak { config, ckpt } => return probe(&config, ckpt.as_deref()),
        Command::Score { ckpt, task, normalize } => score(&ckpt, &task, normalize)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
