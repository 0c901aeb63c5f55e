//! Optimizer, learning-rate schedule, the training step and evaluation.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{window_starts, Batcher, Corpus};
use crate::error::{Error, Result};
use crate::model::{LmOutput, Mode, Model};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub warmup_init_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Embedding dropout. The reference recipe uses 0.1.
    pub dropout: f64,
    pub valid_fraction: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Seeds batch order and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 5e-4,
            warmup_steps: 4000,
            warmup_init_lr: 1e-7,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            dropout: 0.0,
            valid_fraction: 0.1,
            log_every: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.clip_norm < 0.0 || self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("clip_norm, weight_decay must be >= 0 and adam_eps > 0");
        }
        Ok(())
    }

    /// Inverse-square-root schedule with linear warmup; `step` is 1-based.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.warmup_init_lr + (self.lr - self.warmup_init_lr) * step as f64 / self.warmup_steps as f64
        } else {
            self.lr * (self.warmup_steps.max(1) as f64 / step.max(1) as f64).sqrt()
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros() }
    }

    /// One update at 1-based step `t` with learning rate `lr`.
    pub fn update(&mut self, cfg: &TrainConfig, t: u64, lr: f64, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                *w -= lr * cfg.weight_decay * *w;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let params: Vec<&Tensor> = model.store.iter().map(|(_, t)| t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            step: 0,
            adam: Adam::new(&params),
            rng,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean total loss, balance term included.
    pub loss: f64,
    /// Mean masked cross-entropy.
    pub ce: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Worst sparse layer over the batch; `None` for dense models.
    pub imbalance_ratio: Option<f64>,
    pub wall_ms: u128,
}

impl StepMetrics {
    pub fn ppl(&self) -> f64 {
        self.ce.exp()
    }
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} ppl={:.4} lr={:.4e} imbalance_ratio=",
            self.step,
            self.loss,
            self.ppl(),
            self.lr
        )?;
        match self.imbalance_ratio {
            Some(r) => write!(f, "{r:.4}")?,
            None => write!(f, "na")?,
        }
        write!(f, " wall_ms={}", self.wall_ms)
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut total = vars[0];
    for &v in &vars[1..] {
        total = tape.add(total, v)?;
    }
    Ok(total)
}

/// Per-layer expert loads summed over the batch; worst `max / (M/N)`.
fn batch_imbalance(outputs: &[LmOutput]) -> Option<f64> {
    let layers = outputs.first()?.plans.len();
    (0..layers)
        .map(|l| {
            let n = outputs[0].plans[l].plan.n_experts;
            let mut loads = vec![0usize; n];
            for out in outputs {
                for (e, c) in out.plans[l].plan.loads().into_iter().enumerate() {
                    loads[e] += c;
                }
            }
            let total: usize = loads.iter().sum();
            *loads.iter().max().expect("experts") as f64 / (total as f64 / n as f64)
        })
        .reduce(f64::max)
}

/// One optimizer step on a batch of `T+1`-token windows.
pub fn train_step(model: &mut Model, state: &mut TrainState, cfg: &TrainConfig, batch: &[Vec<usize>]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("training batch"));
    }
    let start = Instant::now();
    let step = state.step + 1;
    let mut tape = Tape::new();
    let ps = model.store.bind(&mut tape, true);
    let mut totals = Vec::with_capacity(batch.len());
    let mut ces = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for window in batch {
        let mut mode = Mode {
            training: true,
            dropout: cfg.dropout,
            rng: Some(&mut state.rng),
        };
        let (total, ce, out) = model.lm_loss(&mut tape, &ps, window, &mut mode)?;
        totals.push(total);
        ces.push(ce);
        outputs.push(out);
    }
    let inv = 1.0 / batch.len() as f64;
    let total = sum_vars(&mut tape, &totals)?;
    let loss = tape.scale(total, inv);
    let loss_value = tape.value(loss).data()[0];
    let ce_value = ces.iter().map(|&c| tape.value(c).data()[0]).sum::<f64>() * inv;
    if !loss_value.is_finite() {
        return Err(Error::Diverged { step, loss: loss_value });
    }
    tape.backward(loss)?;
    let mut grads = ps.grads(&tape);
    let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Diverged { step, loss: loss_value });
    }
    if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
        let s = cfg.clip_norm / grad_norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    let lr = cfg.lr_at(step);
    let mut params: Vec<&mut Tensor> = model.store.values_mut().iter_mut().collect();
    state.adam.update(cfg, step, lr, &mut params, &grads);
    model.enforce_causal();
    state.step = step;
    Ok(StepMetrics {
        step,
        loss: loss_value,
        ce: ce_value,
        lr,
        grad_norm,
        imbalance_ratio: batch_imbalance(&outputs),
        wall_ms: start.elapsed().as_millis(),
    })
}

/// Mean masked next-token NLL over every full window of `tokens`, in inference mode.
pub fn evaluate_loss(model: &Model, tokens: &[usize]) -> Result<f64> {
    let t = model.cfg.seq_len;
    let starts = window_starts(tokens.len(), t);
    if starts.is_empty() {
        return Err(Error::EmptySplit("evaluation split is shorter than one window"));
    }
    let mut sum = 0.0;
    for &s in &starts {
        let mut tape = Tape::new();
        let ps = model.store.bind(&mut tape, false);
        let (_, ce, _) = model.lm_loss(&mut tape, &ps, &tokens[s..s + t + 1], &mut Mode::eval())?;
        sum += tape.value(ce).data()[0];
    }
    // Every window has the same number of scored positions.
    Ok(sum / starts.len() as f64)
}

pub fn evaluate_ppl(model: &Model, tokens: &[usize]) -> Result<f64> {
    evaluate_loss(model, tokens).map(f64::exp)
}

/// Owns a model, its optimizer state and the batch stream for one corpus.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub state: TrainState,
    pub cfg: TrainConfig,
    batcher: Batcher,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, corpus: &Corpus) -> Result<Self> {
        let state = TrainState::new(&model, cfg.seed);
        Self::resume(model, state, cfg, corpus)
    }

    pub fn resume(model: Model, state: TrainState, cfg: TrainConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.vocab.len() > model.cfg.vocab_size {
            return Err(Error::Config(format!(
                "corpus needs {} token ids but the model has vocab_size {}",
                corpus.vocab.len(),
                model.cfg.vocab_size
            )));
        }
        let batcher = Batcher::new(corpus.train(), model.cfg.seq_len, cfg.batch_size, cfg.seed)?;
        Ok(Self {
            model,
            state,
            cfg,
            batcher,
        })
    }

    pub fn step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let batch = self.batcher.batch(corpus.train(), self.state.step);
        train_step(&mut self.model, &mut self.state, &self.cfg, &batch)
    }

    /// Trains until `cfg.steps` steps are complete, reporting every step.
    pub fn run(&mut self, corpus: &Corpus, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        while self.state.step < self.cfg.steps {
            let m = self.step(corpus)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig};
    use crate::routing::RouterKind;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-7);
        assert_eq!(cfg.lr_at(4000), 5e-4);
        assert!((cfg.lr_at(16000) - 2.5e-4).abs() < 1e-18);
        assert!((cfg.lr_at(2000) - (1e-7 + (5e-4 - 1e-7) * 0.5)).abs() < 1e-18);
        assert!(cfg.lr_at(100) < cfg.lr_at(101));
        let flat = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(flat.lr_at(1), 5e-4);
    }

    /// Straight scalar transcription of the update rule.
    fn reference_adam(cfg: &TrainConfig, w0: f64, grads: &[f64], lrs: &[f64]) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w *= 1.0 - lr * cfg.weight_decay;
            w -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
        w
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let cfg = TrainConfig::default();
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 1e-3];
        let lrs: Vec<f64> = (1..=grads.len() as u64).map(|t| cfg.lr_at(t) * 1000.0).collect();
        let mut p = Tensor::scalar(0.8);
        let mut adam = Adam::new(&[&p]);
        for (t, (&g, &lr)) in grads.iter().zip(&lrs).enumerate() {
            adam.update(&cfg, t as u64 + 1, lr, &mut [&mut p], &[vec![g]]);
        }
        let want = reference_adam(&cfg, 0.8, &grads, &lrs);
        assert!((p.data()[0] - want).abs() <= 1e-12, "{} vs {want}", p.data()[0]);
    }

    fn synthetic_corpus() -> Corpus {
        // 64 distinct characters in a fixed repeating order.
        let alphabet: Vec<char> = ('!'..='`').collect();
        assert_eq!(alphabet.len(), 64);
        let text: String = (0..4000).map(|i| alphabet[(i * 7 + i / 64) % 64]).collect();
        Corpus::from_text(&text, 0.1).unwrap()
    }

    fn small_model(arch: Arch, vocab: usize) -> Model {
        let mut cfg = ModelConfig::new(arch, vocab, 16, 32, 64, 2);
        if arch == Arch::Smlp {
            cfg.n_sparse = 1;
            cfg.n_experts = 2;
        }
        Model::build(&cfg).unwrap()
    }

    #[test]
    fn loss_falls_on_a_synthetic_corpus() {
        let corpus = synthetic_corpus();
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 3e-3,
            warmup_steps: 20,
            ..TrainConfig::default()
        };
        let model = small_model(Arch::Smlp, corpus.vocab.len());
        let mut trainer = Trainer::new(model, cfg, &corpus).unwrap();
        let first = trainer.step(&corpus).unwrap();
        assert!((first.ce - (corpus.vocab.len() as f64).ln()).abs() < 0.1, "{}", first.ce);
        let mut last = first.clone();
        trainer.run(&corpus, |_, m| {
            last = m.clone();
            Ok(())
        })
        .unwrap();
        assert_eq!(last.step, 200);
        assert!(last.loss < first.loss, "{} !< {}", last.loss, first.loss);
        assert!(last.imbalance_ratio.unwrap() >= 1.0);
        assert!(last.to_string().starts_with("step=200 loss="));
    }

    #[test]
    fn untrained_perplexity_is_near_vocabulary_size() {
        let text: String = (0..2000).map(|i| char::from(b'0' + (i * 13 % 48) as u8)).collect();
        let corpus = Corpus::from_text(&text, 0.5).unwrap();
        let model = small_model(Arch::Gmlp, 50);
        let ppl = evaluate_ppl(&model, corpus.valid()).unwrap();
        assert!((ppl - 50.0).abs() < 2.5, "{ppl}");
        let loss = evaluate_loss(&model, corpus.valid()).unwrap();
        assert_eq!(ppl, loss.exp());
        assert!(matches!(evaluate_ppl(&model, &[1, 2, 3]), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn repeated_cycle_is_memorized() {
        let text = "abcd".repeat(600);
        let corpus = Corpus::from_text(&text, 0.1).unwrap();
        let cfg = TrainConfig {
            steps: 150,
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(small_model(Arch::Gmlp, corpus.vocab.len()), cfg, &corpus).unwrap();
        trainer.run(&corpus, |_, _| Ok(())).unwrap();
        let ppl = evaluate_ppl(&trainer.model, corpus.valid()).unwrap();
        assert!(ppl < 1.05, "{ppl}");
    }

    #[test]
    fn nan_loss_reports_divergence_with_step() {
        let corpus = synthetic_corpus();
        let mut model = small_model(Arch::Gmlp, corpus.vocab.len());
        let id = model.store.find("embed.tokens").unwrap();
        model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let mut trainer = Trainer::new(model, TrainConfig::default(), &corpus).unwrap();
        let err = trainer.step(&corpus).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err}");
    }

    #[test]
    fn sgu_weights_stay_causal_after_steps() {
        let corpus = synthetic_corpus();
        let mut mcfg = ModelConfig::new(Arch::Smlp, corpus.vocab.len(), 16, 32, 64, 1);
        mcfg.n_sparse = 1;
        mcfg.n_experts = 2;
        mcfg.router = Some(RouterKind::PartialPrediction);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(Model::build(&mcfg).unwrap(), cfg, &corpus).unwrap();
        trainer.run(&corpus, |_, _| Ok(())).unwrap();
        for (name, t) in trainer.model.store.iter() {
            if name.ends_with(".spatial") {
                let (r, c) = t.dims2().unwrap();
                for i in 0..r {
                    for j in i + 1..c {
                        assert_eq!(t.get2(i, j), 0.0, "{name}[{i},{j}]");
                    }
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = toml::from_str("steps = 5\nlr = 1e-3\n").unwrap();
        assert_eq!(parsed.steps, 5);
        assert_eq!(parsed.beta2, 0.98);
        assert!(toml::from_str::<TrainConfig>("stepz = 5\n").is_err());
    }
}
