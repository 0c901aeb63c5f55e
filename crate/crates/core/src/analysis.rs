//! Parameter and FLOPs accounting, the causality probe, and load-balance metrics.
//!
//! FLOPs are counted for one forward pass over one sequence of `T` tokens.
//! A multiply-accumulate is 2 FLOPs, a bias or residual add 1 per element,
//! and softmax, layer norm, gelu and sigmoid 5 per element.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Block, Model, ModelConfig};
use crate::moe::{NaiveGmlpMoe, SpatialMoe, TokenMoe};
use crate::nn::{Attention, Ffn, GmlpBlock, LayerNorm, Linear, Sgu};
use crate::routing::{RouterKind, RoutingPlan};

pub const CONVENTION: &str = "forward pass, one sequence; MAC = 2 FLOPs; add = 1; softmax/layernorm/gelu/sigmoid = 5 per element";

/// Elementwise cost of a transcendental or normalising op.
const NONLINEAR: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub heads: usize,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub convention: String,
    pub modules: Vec<ModuleCost>,
    pub total_params: u64,
    pub total_flops: u64,
    /// False for side-by-side comparisons whose rows are alternatives.
    #[serde(skip)]
    pub summed: bool,
}

impl CostReport {
    pub fn new(modules: Vec<ModuleCost>) -> Self {
        Self {
            convention: CONVENTION.to_string(),
            total_params: modules.iter().map(|m| m.params).sum(),
            total_flops: modules.iter().map(|m| m.flops).sum(),
            modules,
            summed: true,
        }
    }

    /// A report of alternative modules; the text form omits the total row.
    pub fn comparison(modules: Vec<ModuleCost>) -> Self {
        Self {
            summed: false,
            ..Self::new(modules)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.modules.iter().map(|m| m.name.len()).max().unwrap_or(6).max(6);
        let row = |f: &mut fmt::Formatter<'_>, name: &str, heads: String, params: u64, flops: u64| {
            writeln!(
                f,
                "{name:<width$}  {heads:>5}  {params:>12}  {:>10.3}  {flops:>14}  {:>9.3}",
                params as f64 / 1e6,
                flops as f64 / 1e9
            )
        };
        writeln!(
            f,
            "{:<width$}  {:>5}  {:>12}  {:>10}  {:>14}  {:>9}",
            "module", "heads", "params", "params (M)", "FLOPs", "FLOPs (G)"
        )?;
        for m in &self.modules {
            row(f, &m.name, m.heads.to_string(), m.params, m.flops)?;
        }
        if self.summed {
            row(f, "total", String::new(), self.total_params, self.total_flops)?;
        }
        write!(f, "convention: {}", self.convention)
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

fn linear_flops(rows: usize, l: &Linear) -> u64 {
    2 * u(rows) * u(l.in_dim) * u(l.out_dim) + u(rows) * u(l.out_dim)
}

fn layer_norm_flops(rows: usize, ln: &LayerNorm) -> u64 {
    NONLINEAR * u(rows) * u(ln.dim)
}

fn ffn_flops(rows: usize, ffn: &Ffn) -> u64 {
    linear_flops(rows, &ffn.fc1) + NONLINEAR * u(rows) * u(ffn.fc1.out_dim) + linear_flops(rows, &ffn.fc2)
}

/// `W_s·X + b` for a `len`-token slice of `cols` channels.
fn sgu_flops(len: usize, cols: usize) -> u64 {
    2 * u(len) * u(len) * u(cols) + u(len) * u(cols)
}

fn attention_flops(seq_len: usize, a: &Attention) -> u64 {
    let (t, h, heads) = (u(seq_len), u(a.query.in_dim), u(a.heads));
    let d = h / heads;
    let proj = linear_flops(seq_len, &a.query) + linear_flops(seq_len, &a.key) + linear_flops(seq_len, &a.value);
    // Per head: scores, scaling, softmax, weighted sum of values.
    let per_head = 2 * t * t * d + t * t + NONLINEAR * t * t + 2 * t * t * d;
    proj + heads * per_head + linear_flops(seq_len, &a.output)
}

fn gmlp_block_cost(name: &str, seq_len: usize, g: &GmlpBlock) -> Vec<ModuleCost> {
    let h = g.norm1.dim;
    let cols = h / g.heads.len();
    let rows = u(seq_len) * u(h);
    vec![
        ModuleCost {
            name: format!("{name}.sgu"),
            heads: g.heads.len(),
            params: u(2 * h) + g.heads.iter().map(|s| u(s.num_params())).sum::<u64>(),
            flops: layer_norm_flops(seq_len, &g.norm1) + u(g.heads.len()) * sgu_flops(seq_len, cols) + rows,
        },
        ModuleCost {
            name: format!("{name}.ffn"),
            heads: 1,
            params: u(2 * h) + u(g.ffn.num_params()),
            flops: layer_norm_flops(seq_len, &g.norm2) + ffn_flops(seq_len, &g.ffn) + rows,
        },
    ]
}

fn attention_module(name: &str, seq_len: usize, norm: &LayerNorm, a: &Attention) -> ModuleCost {
    ModuleCost {
        name: format!("{name}.attn"),
        heads: a.heads,
        params: u(2 * norm.dim) + u(a.num_params()),
        flops: layer_norm_flops(seq_len, norm) + attention_flops(seq_len, a) + u(seq_len) * u(norm.dim),
    }
}

fn ffn_module(name: &str, seq_len: usize, norm: &LayerNorm, ffn: &Ffn) -> ModuleCost {
    ModuleCost {
        name: format!("{name}.ffn"),
        heads: 1,
        params: u(2 * norm.dim) + u(ffn.num_params()),
        flops: layer_norm_flops(seq_len, norm) + ffn_flops(seq_len, ffn) + u(seq_len) * u(norm.dim),
    }
}

/// Router cost for `items` routed vectors of length `in_dim`.
fn router_flops(kind: RouterKind, items: usize, in_dim: usize, n: usize) -> u64 {
    match kind {
        RouterKind::SoftmaxTopk | RouterKind::PartialPrediction | RouterKind::NaiveSmoe => {
            2 * u(items) * u(in_dim) * u(n) + NONLINEAR * u(items) * u(n)
        }
        RouterKind::BalancedAssignment => 2 * u(items) * u(in_dim) * u(n) + NONLINEAR * u(items),
        RouterKind::Hash | RouterKind::DeterministicChunk => 0,
    }
}

fn tmoe_module(name: &str, seq_len: usize, norm: &LayerNorm, m: &TokenMoe) -> ModuleCost {
    let (t, h) = (seq_len, m.dim);
    let k = m.router.k;
    let gated = m.router.kind != RouterKind::Hash;
    // Every token passes through k experts; expert FFNs share one shape.
    let experts = u(k) * ffn_flops(t, &m.experts[0]);
    let gate = if gated { u(k) * u(t) * u(h) } else { 0 };
    let combine = u(k.saturating_sub(1)) * u(t) * u(h);
    ModuleCost {
        name: format!("{name}.tmoe"),
        heads: m.experts.len(),
        params: u(2 * h) + u(m.num_params()),
        flops: layer_norm_flops(t, norm)
            + router_flops(m.router.kind, t, h, m.router.n_experts)
            + experts
            + gate
            + combine
            + u(t) * u(h),
    }
}

fn smoe_module(name: &str, seq_len: usize, norm: &LayerNorm, m: &SpatialMoe) -> ModuleCost {
    let (t, h) = (seq_len, norm.dim);
    let len = t - m.prefix_len;
    let router_in = if m.router.kind == RouterKind::PartialPrediction { m.prefix_len } else { t };
    let gate = if m.router.kind == RouterKind::DeterministicChunk { 0 } else { u(h) * u(len) };
    ModuleCost {
        name: format!("{name}.smoe"),
        heads: 1,
        params: u(2 * h) + u(m.num_params()),
        // Each hidden row visits exactly one expert: all experts together mix H rows.
        flops: layer_norm_flops(t, norm)
            + router_flops(m.router.kind, h, router_in, m.router.n_experts)
            + sgu_flops(len, h)
            + gate
            + u(t) * u(h),
    }
}

/// Assumes an even token split: each expert mixes `T/N` tokens.
fn naive_module(name: &str, seq_len: usize, m: &NaiveGmlpMoe) -> ModuleCost {
    let n = m.experts.len();
    let (t, h) = (seq_len, m.dim);
    let share = t.div_ceil(n);
    let block = &m.experts[0];
    let per_expert = layer_norm_flops(share, &block.norm1)
        + sgu_flops(share, h)
        + layer_norm_flops(share, &block.norm2)
        + ffn_flops(share, &block.ffn)
        + 2 * u(share) * u(h);
    ModuleCost {
        name: format!("{name}.token_gmlp"),
        heads: n,
        params: u(m.num_params()),
        flops: router_flops(m.router.kind, t, h, n) + u(n) * per_expert,
    }
}

/// Costs of every module of a built model.
pub fn model_costs(model: &Model) -> CostReport {
    let cfg = &model.cfg;
    let (t, h, v) = (cfg.seq_len, cfg.embed_dim, cfg.vocab_size);
    let mut modules = vec![ModuleCost {
        name: "embed".into(),
        heads: 1,
        params: u(v * h + t * h),
        flops: u(t * h),
    }];
    for (i, block) in model.blocks.iter().enumerate() {
        let name = format!("block{i}");
        match block {
            Block::DenseGmlp(g) => modules.extend(gmlp_block_cost(&name, t, g)),
            Block::DenseTransformer(l) => {
                modules.push(attention_module(&name, t, &l.norm1, &l.attn));
                modules.push(ffn_module(&name, t, &l.norm2, &l.ffn));
            }
            Block::SparseSmlp(l) => {
                modules.push(smoe_module(&name, t, &l.norm1, &l.smoe));
                modules.push(tmoe_module(&name, t, &l.norm2, &l.tmoe));
            }
            Block::SparseTransformerMoe(l) => {
                modules.push(attention_module(&name, t, &l.norm1, &l.attn));
                modules.push(tmoe_module(&name, t, &l.norm2, &l.tmoe));
            }
            Block::NaiveGmlpMoe(n) => modules.push(naive_module(&name, t, n)),
        }
    }
    modules.push(ModuleCost {
        name: "final_norm".into(),
        heads: 1,
        params: u(2 * h),
        flops: layer_norm_flops(t, &model.final_norm),
    });
    modules.push(ModuleCost {
        name: "lm_head (tied)".into(),
        heads: 1,
        params: 0,
        flops: 2 * u(t) * u(h) * u(v),
    });
    CostReport::new(modules)
}

/// Builds the model described by `cfg` and counts its costs.
pub fn count_costs(cfg: &ModelConfig) -> Result<CostReport> {
    Ok(model_costs(&Model::build(cfg)?))
}

/// Costs of a standalone self-attention module over `T` tokens.
pub fn attention_cost(hidden: usize, seq_len: usize, heads: usize) -> ModuleCost {
    let a = shape_only_attention(hidden, heads);
    ModuleCost {
        name: "self-attention".into(),
        heads,
        params: u(a.num_params()),
        flops: attention_flops(seq_len, &a),
    }
}

/// Costs of a standalone multi-head SGU: `h` spatial matrices of `T×T`.
pub fn sgu_cost(hidden: usize, seq_len: usize, heads: usize) -> ModuleCost {
    let sgu = Sgu {
        weight: dummy_id(),
        bias: dummy_id(),
        seq_len,
        causal: true,
    };
    ModuleCost {
        name: "spatial gating unit".into(),
        heads,
        params: u(heads) * u(sgu.num_params()),
        flops: u(heads) * sgu_flops(seq_len, hidden / heads),
    }
}

/// Costs of one deterministic sMoE expert (one SGU head) and the whole
/// layer's mixing work over all `H` hidden dimensions.
pub fn smoe_cost(hidden: usize, seq_len: usize) -> ModuleCost {
    ModuleCost {
        name: "s-MoE (per expert)".into(),
        heads: 1,
        params: u(seq_len * seq_len + seq_len),
        flops: sgu_flops(seq_len, hidden),
    }
}

/// The token-mixing comparison at `H = T = 1024`.
pub fn token_mixing_comparison(hidden: usize, seq_len: usize) -> CostReport {
    CostReport::comparison(vec![
        attention_cost(hidden, seq_len, 16),
        attention_cost(hidden, seq_len, 1),
        sgu_cost(hidden, seq_len, 16),
        sgu_cost(hidden, seq_len, 1),
        smoe_cost(hidden, seq_len),
    ])
}

fn dummy_id() -> crate::params::ParamId {
    // Shape-only modules never touch a store.
    let mut store = crate::params::ParamStore::new();
    store.add("shape", crate::tensor::Tensor::scalar(0.0))
}

fn shape_only_attention(hidden: usize, heads: usize) -> Attention {
    let lin = || Linear {
        weight: dummy_id(),
        bias: dummy_id(),
        in_dim: hidden,
        out_dim: hidden,
    };
    Attention {
        query: lin(),
        key: lin(),
        value: lin(),
        output: lin(),
        heads,
    }
}

/// Threshold on the logit change above which the probe reports a leak.
pub const LEAK_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Causal,
    Leak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeakReport {
    pub t: usize,
    pub u: usize,
    pub max_delta: f64,
    pub verdict: Verdict,
}

impl LeakReport {
    fn new(t: usize, u: usize, max_delta: f64) -> Self {
        let verdict = if max_delta <= LEAK_THRESHOLD {
            Verdict::Causal
        } else {
            Verdict::Leak
        };
        Self { t, u, max_delta, verdict }
    }
}

fn perturbed(model: &Model, tokens: &[usize], u: usize) -> Vec<usize> {
    let mut p = tokens.to_vec();
    p[u] = (p[u] + 1) % model.cfg.vocab_size;
    p
}

fn row_deltas(a: &crate::tensor::Tensor, b: &crate::tensor::Tensor, rows: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .collect()
}

/// Replaces token `u` with the next id and reports the largest logit change
/// at positions `0..=t`. Runs in inference mode.
pub fn probe_causality(model: &Model, tokens: &[usize], t: usize, u: usize) -> Result<LeakReport> {
    if u <= t || u >= tokens.len() {
        return Err(Error::Config(format!(
            "probe needs t < u < {}, got t={t}, u={u}",
            tokens.len()
        )));
    }
    let base = model.logits(tokens)?;
    let moved = model.logits(&perturbed(model, tokens, u))?;
    let max_delta = row_deltas(&base, &moved, t + 1).into_iter().fold(0.0, f64::max);
    Ok(LeakReport::new(t, u, max_delta))
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub pairs: usize,
    pub leaks: usize,
    /// Pair with the largest change.
    pub worst: LeakReport,
}

impl ProbeSummary {
    pub fn verdict(&self) -> Verdict {
        if self.leaks == 0 {
            Verdict::Causal
        } else {
            Verdict::Leak
        }
    }
}

/// Probes every pair `t < u`, one perturbed forward pass per `u`.
pub fn probe_all_pairs(model: &Model, tokens: &[usize]) -> Result<ProbeSummary> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::Config("probing needs at least two positions".into()));
    }
    let base = model.logits(tokens)?;
    let mut pairs = 0;
    let mut leaks = 0;
    let mut worst = LeakReport::new(0, 1, 0.0);
    for u in 1..n {
        let moved = model.logits(&perturbed(model, tokens, u))?;
        let deltas = row_deltas(&base, &moved, u);
        let mut running = 0.0f64;
        for (t, d) in deltas.into_iter().enumerate() {
            running = running.max(d);
            let report = LeakReport::new(t, u, running);
            pairs += 1;
            if report.verdict == Verdict::Leak {
                leaks += 1;
            }
            if report.max_delta > worst.max_delta {
                worst = report;
            }
        }
    }
    Ok(ProbeSummary { pairs, leaks, worst })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceMetrics {
    pub loads: Vec<usize>,
    pub max_load: usize,
    pub min_load: usize,
    /// `max_load / (M/N)`: 1 at perfect balance, `N` when one expert takes all.
    pub imbalance_ratio: f64,
}

pub fn balance_metrics(plan: &RoutingPlan) -> Result<BalanceMetrics> {
    if plan.is_empty() {
        return Err(Error::Routing("balance metrics need a nonempty plan".into()));
    }
    let loads = plan.loads();
    let total: usize = loads.iter().sum();
    let max_load = *loads.iter().max().expect("at least one expert");
    let min_load = *loads.iter().min().expect("at least one expert");
    let imbalance_ratio = max_load as f64 / (total as f64 / plan.n_experts as f64);
    Ok(BalanceMetrics {
        loads,
        max_load,
        min_load,
        imbalance_ratio,
    })
}
