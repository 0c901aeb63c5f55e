//! Sparse layers: token-routed FFN experts (tMoE), hidden-dimension-routed
//! SGU experts (sMoE), and a naive token-routed gMLP layer kept as a control.
//!
//! `TokenMoe` and `SpatialMoe` return only the routed expert term; the block
//! that owns them adds the residual. `NaiveGmlpMoe` experts are whole gMLP
//! blocks, so its output already includes their residual paths.
//!
//! Experts run in index order and their outputs are scattered back through
//! precomputed index maps, so results do not depend on execution order.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Ffn, GmlpBlock, Sgu};
use crate::params::{Bound, ParamId, ParamStore};
use crate::routing::{
    balanced_assignment_route, deterministic_chunk_route, hash_route, naive_smoe_route, partial_prediction_route,
    softmax_topk_route, switch_balance_loss_var, RouterKind, RouterParams, RoutingPlan,
};
use crate::tensor::{Tape, Tensor, Var};

/// Router hyperparameters plus the id of its learned weight, if any.
#[derive(Debug, Clone)]
pub struct Router {
    pub kind: RouterKind,
    pub weight: Option<ParamId>,
    pub k: usize,
    pub n_experts: usize,
    pub hash_seed: u64,
}

impl Router {
    /// `in_dim` is the length of each routed item: `H` for token routers,
    /// the prefix length for partial prediction and `T` for the naive gate.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: RouterKind,
        in_dim: usize,
        n_experts: usize,
        k: usize,
        hash_seed: u64,
    ) -> Result<Self> {
        if n_experts == 0 || k == 0 || k > n_experts {
            return Err(Error::Config(format!("top-k width {k} must lie in [1, {n_experts}]")));
        }
        let weight = kind.is_learned().then(|| {
            let bound = (1.0 / in_dim as f64).sqrt();
            store.add_uniform(format!("{name}.router"), &[in_dim, n_experts], bound, rng)
        });
        Ok(Self {
            kind,
            weight,
            k,
            n_experts,
            hash_seed,
        })
    }

    /// Snapshot of the router with the weight values currently on the tape.
    pub fn params(&self, tape: &Tape, ps: &Bound) -> Result<RouterParams> {
        let w = self.weight.map(|id| tape.value(ps.var(id)).clone());
        Ok(RouterParams::new(self.kind, w, self.k, self.n_experts)?.with_hash_seed(self.hash_seed))
    }

    pub fn num_params(&self, in_dim: usize) -> usize {
        if self.weight.is_some() {
            in_dim * self.n_experts
        } else {
            0
        }
    }
}

/// Per-call routing inputs beyond the hidden states.
#[derive(Debug, Clone, Copy)]
pub struct RouteContext<'a> {
    /// Token ids of the sequence, consumed by hash routing.
    pub token_ids: &'a [usize],
    /// Balanced assignment only balances in training mode.
    pub training: bool,
}

/// Result of a sparse layer.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub y: Var,
    pub plan: RoutingPlan,
    /// Switch balance loss on the tape, for softmax top-k token routing.
    pub aux_loss: Option<Var>,
}

/// Token routing on the tape: the plan from current values plus differentiable
/// gates for each expert's items.
struct TokenDispatch {
    plan: RoutingPlan,
    /// `[M]` gate vector per expert, absent when all gates are exactly 1.
    gates: Vec<Option<Var>>,
    aux_loss: Option<Var>,
}

fn dispatch_tokens(tape: &mut Tape, ps: &Bound, router: &Router, x: Var, ctx: RouteContext) -> Result<TokenDispatch> {
    let rp = router.params(tape, ps)?;
    let items = tape.value(x).clone();
    let (plan, scores) = match router.kind {
        RouterKind::SoftmaxTopk => {
            let logits = tape.matmul(x, ps.var(router.weight.expect("learned router")))?;
            let probs = tape.softmax(logits, 1)?;
            (softmax_topk_route(&rp, &items)?, Some(probs))
        }
        RouterKind::BalancedAssignment => {
            let aff = tape.matmul(x, ps.var(router.weight.expect("learned router")))?;
            (balanced_assignment_route(&rp, &items, ctx.training)?, Some(aff))
        }
        RouterKind::Hash => {
            if ctx.token_ids.len() != items.shape()[0] {
                return Err(Error::Shape {
                    op: "hash routing",
                    detail: format!("{} token ids for {} rows", ctx.token_ids.len(), items.shape()[0]),
                });
            }
            (hash_route(&rp, ctx.token_ids)?, None)
        }
        other => return Err(Error::Routing(format!("{} does not route tokens", other.name()))),
    };
    let gates = match scores {
        None => vec![None; plan.n_experts],
        Some(s) => plan
            .expert_items()
            .iter()
            .enumerate()
            .map(|(e, items)| {
                if items.is_empty() {
                    return Ok(None);
                }
                let pairs: Vec<(usize, usize)> = items.iter().map(|&(i, _)| (i, e)).collect();
                let g = tape.pick(s, &pairs)?;
                Ok(Some(if router.kind == RouterKind::BalancedAssignment {
                    tape.sigmoid(g)
                } else {
                    g
                }))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let aux_loss = match (router.kind, scores) {
        (RouterKind::SoftmaxTopk, Some(probs)) => Some(switch_balance_loss_var(tape, &plan, probs)?),
        _ => None,
    };
    Ok(TokenDispatch { plan, gates, aux_loss })
}

/// Token-routed mixture of FFN experts.
#[derive(Debug, Clone)]
pub struct TokenMoe {
    pub router: Router,
    pub experts: Vec<Ffn>,
    pub dim: usize,
}

impl TokenMoe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: RouterKind,
        dim: usize,
        ffn_dim: usize,
        n_experts: usize,
        k: usize,
        hash_seed: u64,
    ) -> Result<Self> {
        if !kind.routes_tokens() {
            return Err(Error::Config(format!("{} cannot drive a token mixture", kind.name())));
        }
        let router = Router::new(store, rng, name, kind, dim, n_experts, k, hash_seed)?;
        let experts = (0..n_experts)
            .map(|e| Ffn::new(store, rng, &format!("{name}.expert{e}"), dim, ffn_dim))
            .collect();
        Ok(Self { router, experts, dim })
    }

    /// `x: [T×H]` to `Σ_{i∈plan} pᵢ·Eᵢ(x)` per token, `[T×H]`.
    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var, ctx: RouteContext) -> Result<MoeOutput> {
        let (t, h) = tape.value(x).dims2()?;
        let d = dispatch_tokens(tape, ps, &self.router, x, ctx)?;
        let mut parts = Vec::new();
        for (e, items) in d.plan.expert_items().iter().enumerate() {
            if items.is_empty() {
                continue;
            }
            let rows: Vec<usize> = items.iter().map(|&(i, _)| i).collect();
            let xe = tape.gather_rows(x, &rows)?;
            let mut ye = self.experts[e].forward(tape, ps, xe)?;
            if let Some(g) = d.gates[e] {
                ye = tape.scale_rows(ye, g)?;
            }
            parts.push((ye, rows));
        }
        let y = tape.scatter_rows(&parts, t, h)?;
        Ok(MoeOutput {
            y,
            plan: d.plan,
            aux_loss: d.aux_loss,
        })
    }

    pub fn num_params(&self) -> usize {
        self.router.num_params(self.dim) + self.experts.iter().map(Ffn::num_params).sum::<usize>()
    }
}

/// Hidden-dimension-routed mixture of causal SGU experts.
///
/// The input is viewed as `V = Xᵀ ∈ R^{H×T}`; each routed row is a hidden
/// dimension's trajectory over the sequence, and each expert mixes along it.
#[derive(Debug, Clone)]
pub struct SpatialMoe {
    pub router: Router,
    pub experts: Vec<Sgu>,
    pub seq_len: usize,
    /// Leading positions used only for routing (partial prediction), else 0.
    pub prefix_len: usize,
}

impl SpatialMoe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: RouterKind,
        seq_len: usize,
        dim: usize,
        n_experts: usize,
        prefix_len: usize,
    ) -> Result<Self> {
        let (router_in, expert_len) = match kind {
            RouterKind::DeterministicChunk => {
                if !dim.is_multiple_of(n_experts) {
                    return Err(Error::Divisibility {
                        what: "hidden size",
                        value: dim,
                        by: n_experts,
                    });
                }
                (0, seq_len)
            }
            RouterKind::PartialPrediction => {
                if prefix_len == 0 || prefix_len >= seq_len {
                    return Err(Error::Config(format!(
                        "routing prefix of {prefix_len} positions must lie in [1, {seq_len})"
                    )));
                }
                (prefix_len, seq_len - prefix_len)
            }
            RouterKind::NaiveSmoe => (seq_len, seq_len),
            other => return Err(Error::Config(format!("{} cannot drive a hidden-dimension mixture", other.name()))),
        };
        let router = Router::new(store, rng, name, kind, router_in, n_experts, 1, 0)?;
        let experts = (0..n_experts)
            .map(|e| Sgu::new(store, rng, &format!("{name}.expert{e}"), expert_len, true))
            .collect();
        Ok(Self {
            router,
            experts,
            seq_len,
            prefix_len: if kind == RouterKind::PartialPrediction { prefix_len } else { 0 },
        })
    }

    /// `x: [T×H]` to the recombined expert output `[T×H]`. Under partial
    /// prediction the first `prefix_len` rows of the output are zero.
    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var) -> Result<MoeOutput> {
        let (t, h) = tape.value(x).dims2()?;
        if t != self.seq_len {
            return Err(Error::Shape {
                op: "smoe",
                detail: format!("sequence length {t} does not match {}", self.seq_len),
            });
        }
        let v = tape.transpose(x)?;
        let (routed, plan, scores) = match self.router.kind {
            RouterKind::DeterministicChunk => (v, deterministic_chunk_route(h, self.router.n_experts)?, None),
            RouterKind::PartialPrediction => {
                let v1 = tape.slice(v, 1, 0, self.prefix_len)?;
                let v2 = tape.slice(v, 1, self.prefix_len, t - self.prefix_len)?;
                let rp = self.router.params(tape, ps)?;
                let plan = partial_prediction_route(&rp, tape.value(v1))?;
                let logits = tape.matmul(v1, ps.var(self.router.weight.expect("learned router")))?;
                (v2, plan, Some(tape.softmax(logits, 1)?))
            }
            RouterKind::NaiveSmoe => {
                let rp = self.router.params(tape, ps)?;
                let plan = naive_smoe_route(&rp, tape.value(v))?;
                let logits = tape.matmul(v, ps.var(self.router.weight.expect("learned router")))?;
                (v, plan, Some(tape.softmax(logits, 1)?))
            }
            _ => unreachable!("checked at construction"),
        };
        let width = tape.shape(routed)[1];
        let mut parts = Vec::new();
        for (e, items) in plan.expert_items().iter().enumerate() {
            if items.is_empty() {
                continue;
            }
            let rows: Vec<usize> = items.iter().map(|&(i, _)| i).collect();
            let ve = tape.gather_rows(routed, &rows)?;
            let mut ye = self.experts[e].forward_transposed(tape, ps, ve)?;
            if let Some(s) = scores {
                let pairs: Vec<(usize, usize)> = rows.iter().map(|&i| (i, e)).collect();
                let g = tape.pick(s, &pairs)?;
                ye = tape.scale_rows(ye, g)?;
            }
            parts.push((ye, rows));
        }
        let mut out = tape.scatter_rows(&parts, h, width)?;
        if self.prefix_len > 0 {
            let zeros = tape.constant(Tensor::zeros(&[h, self.prefix_len]));
            out = tape.concat(&[zeros, out], 1)?;
        }
        let y = tape.transpose(out)?;
        Ok(MoeOutput { y, plan, aux_loss: None })
    }

    pub fn enforce_causal(&self, store: &mut ParamStore) {
        for sgu in &self.experts {
            sgu.enforce_causal(store);
        }
    }

    pub fn num_params(&self) -> usize {
        let router_in = match self.router.kind {
            RouterKind::PartialPrediction => self.prefix_len,
            _ => self.seq_len,
        };
        self.router.num_params(router_in) + self.experts.iter().map(Sgu::num_params).sum::<usize>()
    }
}

/// Token-routed mixture whose experts are complete gMLP blocks.
///
/// Each expert sees only the tokens routed to it, in their original order,
/// and mixes them with the top-left corner of its spatial weights. A token
/// therefore never interacts with tokens sent elsewhere.
#[derive(Debug, Clone)]
pub struct NaiveGmlpMoe {
    pub router: Router,
    pub experts: Vec<GmlpBlock>,
    pub dim: usize,
}

impl NaiveGmlpMoe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: RouterKind,
        seq_len: usize,
        dim: usize,
        ffn_dim: usize,
        n_experts: usize,
        hash_seed: u64,
    ) -> Result<Self> {
        if !kind.routes_tokens() {
            return Err(Error::Config(format!("{} cannot drive a token mixture", kind.name())));
        }
        let router = Router::new(store, rng, name, kind, dim, n_experts, 1, hash_seed)?;
        let experts = (0..n_experts)
            .map(|e| GmlpBlock::new(store, rng, &format!("{name}.expert{e}"), seq_len, dim, ffn_dim, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { router, experts, dim })
    }

    /// Full block output `[T×H]`. With gate `p ≠ 1` a token's output is
    /// `x + p·(E(x) − x)`: the expert's update scaled by the gate.
    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var, ctx: RouteContext) -> Result<MoeOutput> {
        let (t, h) = tape.value(x).dims2()?;
        let d = dispatch_tokens(tape, ps, &self.router, x, ctx)?;
        let mut parts = Vec::new();
        for (e, items) in d.plan.expert_items().iter().enumerate() {
            if items.is_empty() {
                continue;
            }
            let rows: Vec<usize> = items.iter().map(|&(i, _)| i).collect();
            let xe = tape.gather_rows(x, &rows)?;
            let mut ye = self.experts[e].forward(tape, ps, xe)?;
            if let Some(g) = d.gates[e] {
                let delta = tape.sub(ye, xe)?;
                let delta = tape.scale_rows(delta, g)?;
                ye = tape.add(xe, delta)?;
            }
            parts.push((ye, rows));
        }
        let y = tape.scatter_rows(&parts, t, h)?;
        Ok(MoeOutput {
            y,
            plan: d.plan,
            aux_loss: d.aux_loss,
        })
    }

    pub fn enforce_causal(&self, store: &mut ParamStore) {
        for b in &self.experts {
            b.enforce_causal(store);
        }
    }

    pub fn num_params(&self) -> usize {
        self.router.num_params(self.dim) + self.experts.iter().map(GmlpBlock::num_params).sum::<usize>()
    }
}
