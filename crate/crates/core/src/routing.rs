//! Gating functions that decide which expert processes which item.
//!
//! Token routers (`softmax_topk`, `balanced_assignment`, `hash`) route rows of
//! a `[T×H]` token matrix. Spatial routers (`deterministic_chunk`,
//! `partial_prediction`, `naive_smoe`) route hidden dimensions, i.e. rows of
//! the transposed `[H×T]` representation.
//!
//! Every router here is a pure function of its inputs. Routing decisions are
//! not differentiable; gate values are recomputed on the tape by the MoE
//! layers so that gradients reach the router weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    SoftmaxTopk,
    BalancedAssignment,
    Hash,
    DeterministicChunk,
    PartialPrediction,
    NaiveSmoe,
}

impl RouterKind {
    pub fn routes_tokens(self) -> bool {
        matches!(self, Self::SoftmaxTopk | Self::BalancedAssignment | Self::Hash)
    }

    pub fn routes_hidden(self) -> bool {
        !self.routes_tokens()
    }

    /// Whether the router owns a learned `W_r`.
    pub fn is_learned(self) -> bool {
        !matches!(self, Self::Hash | Self::DeterministicChunk)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SoftmaxTopk => "softmax_topk",
            Self::BalancedAssignment => "balanced_assignment",
            Self::Hash => "hash",
            Self::DeterministicChunk => "deterministic_chunk",
            Self::PartialPrediction => "partial_prediction",
            Self::NaiveSmoe => "naive_smoe",
        }
    }
}

/// Router configuration together with the current value of its weights.
#[derive(Debug, Clone)]
pub struct RouterParams {
    pub kind: RouterKind,
    pub weight: Option<Tensor>,
    pub k: usize,
    pub n_experts: usize,
    pub hash_seed: u64,
}

impl RouterParams {
    pub fn new(kind: RouterKind, weight: Option<Tensor>, k: usize, n_experts: usize) -> Result<Self> {
        if n_experts == 0 || k == 0 || k > n_experts {
            return Err(Error::Routing(format!("top-k width {k} must lie in [1, {n_experts}]")));
        }
        if kind.is_learned() != weight.is_some() {
            return Err(Error::Routing(format!(
                "{} router {} learned weights",
                kind.name(),
                if kind.is_learned() { "requires" } else { "takes no" }
            )));
        }
        if let Some(w) = &weight {
            let (_, n) = w.dims2()?;
            if n != n_experts {
                return Err(Error::Dimension {
                    op: "router weight",
                    lhs: w.shape().to_vec(),
                    rhs: vec![n_experts],
                });
            }
        }
        Ok(Self {
            kind,
            weight,
            k,
            n_experts,
            hash_seed: 0,
        })
    }

    pub fn with_hash_seed(mut self, seed: u64) -> Self {
        self.hash_seed = seed;
        self
    }

    fn expect_kind(&self, kind: RouterKind) -> Result<&Tensor> {
        if self.kind != kind {
            return Err(Error::Routing(format!(
                "expected a {} router, got {}",
                kind.name(),
                self.kind.name()
            )));
        }
        self.weight
            .as_ref()
            .ok_or_else(|| Error::Routing(format!("{} router has no weights", kind.name())))
    }
}

/// Per-item expert choices with their gate probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub n_experts: usize,
    /// For each routed item, `(expert, gate)` pairs ordered by descending gate.
    pub assignments: Vec<Vec<(usize, f64)>>,
    /// Full pre-selection distribution `[M×N]`, for softmax routers.
    pub full_probs: Option<Tensor>,
    pub aux_loss: Option<f64>,
}

impl RoutingPlan {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Items handled by each expert, ascending, together with the slot of that
    /// expert in the item's assignment list.
    pub fn expert_items(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.n_experts];
        for (item, choices) in self.assignments.iter().enumerate() {
            for (slot, &(e, _)) in choices.iter().enumerate() {
                out[e].push((item, slot));
            }
        }
        out
    }

    /// Number of (item, expert) assignments per expert.
    pub fn loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.n_experts];
        for choices in &self.assignments {
            for &(e, _) in choices {
                loads[e] += 1;
            }
        }
        loads
    }

    /// First-choice expert of every item.
    pub fn top1(&self) -> Vec<usize> {
        self.assignments.iter().map(|c| c[0].0).collect()
    }

    /// True when every gate is exactly one (hash and deterministic routing).
    pub fn unit_gates(&self) -> bool {
        self.assignments.iter().flatten().all(|&(_, g)| g == 1.0)
    }
}

/// Row-wise `softmax(items · W_r)`.
pub fn softmax_probs(items: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (m, d) = items.dims2()?;
    let (d2, n) = weight.dims2()?;
    if d != d2 {
        return Err(Error::Dimension {
            op: "router logits",
            lhs: vec![m, d],
            rhs: vec![d2, n],
        });
    }
    let logits = matmul_raw(items.data(), weight.data(), m, d, n);
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![m, n], logits)?);
    let p = tape.softmax(l, 1)?;
    Ok(tape.value(p).clone())
}

/// Indices of the `k` largest entries of `row`, largest first; ties go to the lower index.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-`k` selection over a full `[M×N]` probability matrix.
pub fn select_topk(probs: &Tensor, k: usize) -> Result<RoutingPlan> {
    let (m, n) = probs.dims2()?;
    if k == 0 || k > n {
        return Err(Error::Routing(format!("top-k width {k} must lie in [1, {n}]")));
    }
    let assignments = (0..m)
        .map(|i| {
            let row = probs.row(i);
            top_k_indices(row, k).into_iter().map(|e| (e, row[e])).collect()
        })
        .collect();
    Ok(RoutingPlan {
        n_experts: n,
        assignments,
        full_probs: Some(probs.clone()),
        aux_loss: None,
    })
}

/// Learned softmax gating followed by top-`k` selection.
pub fn softmax_topk_route(p: &RouterParams, items: &Tensor) -> Result<RoutingPlan> {
    let w = p.expect_kind(RouterKind::SoftmaxTopk)?;
    let probs = softmax_probs(items, w)?;
    let mut plan = select_topk(&probs, p.k)?;
    plan.aux_loss = Some(switch_balance_loss(&plan, &probs)?);
    Ok(plan)
}

/// Per-expert top-1 fraction `f` and mean probability `P`.
fn balance_terms(plan: &RoutingPlan, full_probs: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, n) = full_probs.dims2()?;
    if m != plan.len() || n != plan.n_experts || m == 0 {
        return Err(Error::Dimension {
            op: "switch_balance_loss",
            lhs: vec![plan.len(), plan.n_experts],
            rhs: vec![m, n],
        });
    }
    let mut frac = vec![0.0; n];
    for e in plan.top1() {
        frac[e] += 1.0 / m as f64;
    }
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for (acc, &p) in mean.iter_mut().zip(full_probs.row(i)) {
            *acc += p;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    Ok((frac, mean))
}

/// Switch-style auxiliary load-balancing loss `N · Σᵢ fᵢ·Pᵢ`; equals 1 at perfect balance.
pub fn switch_balance_loss(plan: &RoutingPlan, full_probs: &Tensor) -> Result<f64> {
    let (frac, mean) = balance_terms(plan, full_probs)?;
    let n = plan.n_experts as f64;
    Ok(n * frac.iter().zip(&mean).map(|(f, p)| f * p).sum::<f64>())
}

/// [`switch_balance_loss`] on the tape; differentiable through the mean probabilities.
pub fn switch_balance_loss_var(tape: &mut Tape, plan: &RoutingPlan, probs: Var) -> Result<Var> {
    let (frac, _) = balance_terms(plan, tape.value(probs))?;
    let (m, n) = tape.value(probs).dims2()?;
    let ones = tape.constant(Tensor::full(&[1, m], 1.0 / m as f64));
    let mean = tape.matmul(ones, probs)?;
    let weights = tape.constant(Tensor::new(vec![1, n], frac.iter().map(|f| f * n as f64).collect())?);
    let prod = tape.mul(mean, weights)?;
    Ok(tape.sum(prod))
}

/// Balanced assignment over an `[M×N]` affinity matrix: maximises the total
/// affinity subject to every expert receiving `⌊M/N⌋` or `⌈M/N⌉` items.
///
/// Solved exactly as a linear assignment problem. Each expert offers
/// `⌊M/N⌋` regular slots plus one overflow slot; overflow slots carry a
/// penalty larger than any achievable affinity gain, so all regular slots fill
/// first and exactly `M mod N` overflow slots are used.
pub fn balanced_assign(affinity: &Tensor) -> Result<Vec<usize>> {
    let (m, n) = affinity.dims2()?;
    if !affinity.all_finite() {
        return Err(Error::Routing("non-finite routing affinity".into()));
    }
    let floor = m / n;
    let per_expert = floor + 1;
    let a = affinity.data();
    let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let penalty = (hi - lo + 1.0) * (m as f64 + 1.0);
    let slots = n * per_expert;
    let mut cost = vec![0.0; m * slots];
    for i in 0..m {
        for e in 0..n {
            for s in 0..per_expert {
                let extra = if s == floor { penalty } else { 0.0 };
                cost[i * slots + e * per_expert + s] = -a[i * n + e] + extra;
            }
        }
    }
    let col_of_row = hungarian(&cost, m, slots);
    Ok(col_of_row.into_iter().map(|c| c / per_expert).collect())
}

/// Minimum-cost assignment of `rows` rows to distinct columns (`rows <= cols`)
/// with the shortest augmenting path form of the Hungarian method.
fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    // 1-based potentials and matching; column 0 is a sentinel.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut row_of_col = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; rows];
    for j in 1..=cols {
        if row_of_col[j] != 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

fn argmax_lower(row: &[f64]) -> usize {
    top_k_indices(row, 1)[0]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Balanced routing in training; per-item argmax at inference. Gates are
/// `sigmoid(affinity)` of the chosen pair.
pub fn balanced_assignment_route(p: &RouterParams, items: &Tensor, training: bool) -> Result<RoutingPlan> {
    let w = p.expect_kind(RouterKind::BalancedAssignment)?;
    let (m, d) = items.dims2()?;
    let (d2, n) = w.dims2()?;
    if d != d2 {
        return Err(Error::Dimension {
            op: "balanced_assignment_route",
            lhs: vec![m, d],
            rhs: vec![d2, n],
        });
    }
    let affinity = Tensor::new(vec![m, n], matmul_raw(items.data(), w.data(), m, d, n))?;
    let owner = if training {
        balanced_assign(&affinity)?
    } else {
        (0..m).map(|i| argmax_lower(affinity.row(i))).collect()
    };
    let assignments = owner
        .iter()
        .enumerate()
        .map(|(i, &e)| vec![(e, sigmoid(affinity.get2(i, e)))])
        .collect();
    Ok(RoutingPlan {
        n_experts: n,
        assignments,
        full_probs: None,
        aux_loss: None,
    })
}

/// Seeded 64-bit mixer used by hash routing.
///
/// ```text
/// z = id XOR (seed · 0x9E3779B97F4A7C15)        (wrapping)
/// z = z + 0x9E3779B97F4A7C15                    (wrapping)
/// z = (z XOR (z >> 30)) · 0xBF58476D1CE4E5B9    (wrapping)
/// z = (z XOR (z >> 27)) · 0x94D049BB133111EB    (wrapping)
/// return z XOR (z >> 31)
/// ```
///
/// The last three lines are the SplitMix64 finalizer.
pub fn hash64(id: u64, seed: u64) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = id ^ seed.wrapping_mul(GOLDEN);
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Routes each token id to `hash64(id, seed) mod N` with gate 1.
pub fn hash_route(p: &RouterParams, token_ids: &[usize]) -> Result<RoutingPlan> {
    if p.kind != RouterKind::Hash {
        return Err(Error::Routing(format!("expected a hash router, got {}", p.kind.name())));
    }
    let n = p.n_experts as u64;
    let assignments = token_ids
        .iter()
        .map(|&id| vec![((hash64(id as u64, p.hash_seed) % n) as usize, 1.0)])
        .collect();
    Ok(RoutingPlan {
        n_experts: p.n_experts,
        assignments,
        full_probs: None,
        aux_loss: None,
    })
}

/// Hidden dimension `d` goes to expert `d / (H/N)`, gate 1. No parameters.
pub fn deterministic_chunk_route(hidden: usize, n_experts: usize) -> Result<RoutingPlan> {
    if n_experts == 0 || !hidden.is_multiple_of(n_experts) {
        return Err(Error::Divisibility {
            what: "hidden size",
            value: hidden,
            by: n_experts,
        });
    }
    let width = hidden / n_experts;
    Ok(RoutingPlan {
        n_experts,
        assignments: (0..hidden).map(|d| vec![(d / width, 1.0)]).collect(),
        full_probs: None,
        aux_loss: None,
    })
}

/// Number of leading tokens used for routing under partial prediction: `⌊fraction·T⌋`, at least 1.
pub fn partial_prefix_len(seq_len: usize, fraction: f64) -> usize {
    ((fraction * seq_len as f64).floor() as usize).max(1)
}

/// Hidden-dimension routing learned from the first tokens only: `v1` is the
/// `[H × ⌊0.2T⌋]` slice of the transposed representation.
pub fn partial_prediction_route(p: &RouterParams, v1: &Tensor) -> Result<RoutingPlan> {
    let w = p.expect_kind(RouterKind::PartialPrediction)?;
    select_topk(&softmax_probs(v1, w)?, p.k)
}

/// Hidden-dimension routing over the whole sequence, `W_r ∈ R^{T×N}`.
/// Reads future tokens, so it breaks autoregressive causality; kept as a
/// negative control.
pub fn naive_smoe_route(p: &RouterParams, v: &Tensor) -> Result<RoutingPlan> {
    let w = p.expect_kind(RouterKind::NaiveSmoe)?;
    select_topk(&softmax_probs(v, w)?, p.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Best total affinity over every balanced assignment, by enumeration.
    fn brute_force_best(aff: &Tensor) -> f64 {
        let (m, n) = aff.dims2().unwrap();
        let (lo, hi) = (m / n, m.div_ceil(n));
        let mut best = f64::NEG_INFINITY;
        let mut choice = vec![0usize; m];
        loop {
            let mut loads = vec![0; n];
            for &e in &choice {
                loads[e] += 1;
            }
            if loads.iter().all(|&l| l >= lo && l <= hi) {
                let total: f64 = choice.iter().enumerate().map(|(i, &e)| aff.get2(i, e)).sum();
                best = best.max(total);
            }
            let mut pos = 0;
            loop {
                if pos == m {
                    return best;
                }
                choice[pos] += 1;
                if choice[pos] < n {
                    break;
                }
                choice[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_gates_and_expert_zero() {
        let p = RouterParams::new(RouterKind::SoftmaxTopk, Some(Tensor::zeros(&[3, 4])), 1, 4).unwrap();
        let items = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let plan = softmax_topk_route(&p, &items).unwrap();
        for a in &plan.assignments {
            assert_eq!(a[0].0, 0);
            assert!((a[0].1 - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn top1_is_argmax_of_logits() {
        // Identity items make the logits equal the weight rows.
        let w = Tensor::from_rows(&[&[0.1, 2.3, -1.0]]).unwrap();
        let p = RouterParams::new(RouterKind::SoftmaxTopk, Some(w), 1, 3).unwrap();
        let plan = softmax_topk_route(&p, &Tensor::from_rows(&[&[1.0]]).unwrap()).unwrap();
        assert_eq!(plan.top1(), vec![1]);
    }

    #[test]
    fn top2_matches_enumeration_of_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let w = random(&mut rng, &[4, 3], -2.0, 2.0);
            let items = random(&mut rng, &[1, 4], -2.0, 2.0);
            let p = RouterParams::new(RouterKind::SoftmaxTopk, Some(w.clone()), 2, 3).unwrap();
            let plan = softmax_topk_route(&p, &items).unwrap();
            // Oracle: softmax by hand, then the pair with the largest sum.
            let logits: Vec<f64> = (0..3).map(|e| (0..4).map(|d| items.get2(0, d) * w.get2(d, e)).sum()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            let mut best = (0, 1);
            for a in 0..3 {
                for b in a + 1..3 {
                    if probs[a] + probs[b] > probs[best.0] + probs[best.1] {
                        best = (a, b);
                    }
                }
            }
            let mut chosen: Vec<usize> = plan.assignments[0].iter().map(|&(e, _)| e).collect();
            chosen.sort();
            assert_eq!(chosen, vec![best.0, best.1]);
        }
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        assert!(RouterParams::new(RouterKind::SoftmaxTopk, Some(Tensor::zeros(&[2, 2])), 3, 2).is_err());
        assert!(select_topk(&Tensor::zeros(&[1, 2]), 3).is_err());
    }

    #[test]
    fn balance_loss_extremes() {
        let uniform = Tensor::full(&[4, 4], 0.25);
        let plan = select_topk(&uniform, 1).unwrap();
        assert!((switch_balance_loss(&plan, &uniform).unwrap() - 1.0).abs() < 1e-15);

        let mut data = vec![0.0; 12];
        for i in 0..4 {
            data[i * 3] = 1.0;
        }
        let collapsed = Tensor::new(vec![4, 3], data).unwrap();
        let plan = select_topk(&collapsed, 1).unwrap();
        assert!((switch_balance_loss(&plan, &collapsed).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn balance_loss_matches_formula_and_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let items = random(&mut rng, &[8, 5], -1.0, 1.0);
        let w = random(&mut rng, &[5, 4], -2.0, 2.0);
        let probs = softmax_probs(&items, &w).unwrap();
        let plan = select_topk(&probs, 1).unwrap();
        // Direct evaluation of N·Σ f_i·P_i.
        let mut expect = 0.0;
        for e in 0..4 {
            let f = plan.top1().iter().filter(|&&x| x == e).count() as f64 / 8.0;
            let p: f64 = (0..8).map(|i| probs.get2(i, e)).sum::<f64>() / 8.0;
            expect += f * p;
        }
        expect *= 4.0;
        assert!((switch_balance_loss(&plan, &probs).unwrap() - expect).abs() < 1e-14);
        let mut tape = Tape::new();
        let pv = tape.constant(probs.clone());
        let l = switch_balance_loss_var(&mut tape, &plan, pv).unwrap();
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn balanced_assignment_prefers_higher_total() {
        let aff = Tensor::from_rows(&[&[5.0, 1.0], &[4.0, 3.0]]).unwrap();
        assert_eq!(balanced_assign(&aff).unwrap(), vec![0, 1]);
        assert_eq!(brute_force_best(&aff), 8.0);
    }

    #[test]
    fn balanced_assignment_splits_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random(&mut rng, &[3, 2], -1.0, 1.0);
        let p = RouterParams::new(RouterKind::BalancedAssignment, Some(w), 1, 2).unwrap();
        let items = random(&mut rng, &[4, 3], -1.0, 1.0);
        let plan = balanced_assignment_route(&p, &items, true).unwrap();
        assert_eq!(plan.loads(), vec![2, 2]);
    }

    #[test]
    fn balanced_assignment_inference_is_argmax() {
        // Everyone prefers expert 1; inference ignores balance.
        let w = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        let p = RouterParams::new(RouterKind::BalancedAssignment, Some(w), 1, 2).unwrap();
        let items = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let plan = balanced_assignment_route(&p, &items, false).unwrap();
        assert_eq!(plan.top1(), vec![1; 4]);
        let gate = plan.assignments[2][0].1;
        assert!((gate - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
        let trained = balanced_assignment_route(&p, &items, true).unwrap();
        assert_eq!(trained.loads(), vec![2, 2]);
    }

    #[test]
    fn balanced_assignment_with_fewer_items_than_experts() {
        let aff = Tensor::from_rows(&[&[0.0, 0.0, 9.0], &[0.0, 0.0, 8.0]]).unwrap();
        let owner = balanced_assign(&aff).unwrap();
        assert_eq!(owner[0], 2);
        assert_ne!(owner[1], 2);
    }

    #[test]
    fn hash_routing_is_deterministic() {
        let p = RouterParams::new(RouterKind::Hash, None, 1, 4).unwrap().with_hash_seed(99);
        let a = hash_route(&p, &[7, 7, 123]).unwrap();
        assert_eq!(a.assignments[0], a.assignments[1]);
        assert_eq!(a, hash_route(&p, &[7, 7, 123]).unwrap());
        let single = RouterParams::new(RouterKind::Hash, None, 1, 1).unwrap();
        assert!(hash_route(&single, &[1, 2, 3, 400]).unwrap().top1().iter().all(|&e| e == 0));
    }

    #[test]
    fn hash64_reference_values() {
        // SplitMix64 of 0 with seed 0 is the well-known first SplitMix64 output.
        assert_eq!(hash64(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_ne!(hash64(1, 0), hash64(1, 1));
    }

    #[test]
    fn hash_routing_spreads_ids_evenly() {
        let p = RouterParams::new(RouterKind::Hash, None, 1, 4).unwrap().with_hash_seed(5);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ids: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..1_000_000)).collect();
        let loads = hash_route(&p, &ids).unwrap().loads();
        for l in loads {
            let share = l as f64 / 10_000.0;
            assert!((share - 0.25).abs() <= 0.03, "share {share}");
        }
    }

    #[test]
    fn deterministic_chunks_are_contiguous() {
        let plan = deterministic_chunk_route(4, 2).unwrap();
        assert_eq!(plan.top1(), vec![0, 0, 1, 1]);
        assert_eq!(deterministic_chunk_route(6, 3).unwrap().top1(), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(deterministic_chunk_route(5, 1).unwrap().top1(), vec![0; 5]);
        assert!(deterministic_chunk_route(4, 2).unwrap().unit_gates());
        assert!(matches!(deterministic_chunk_route(6, 4), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn partial_prefix_length_rounding() {
        assert_eq!(partial_prefix_len(10, 0.2), 2);
        assert_eq!(partial_prefix_len(16, 0.2), 3);
        assert_eq!(partial_prefix_len(4, 0.2), 1);
    }

    #[test]
    fn partial_prediction_zero_input_ties_to_expert_zero() {
        let p = RouterParams::new(RouterKind::PartialPrediction, Some(Tensor::full(&[2, 3], 0.7)), 1, 3).unwrap();
        let plan = partial_prediction_route(&p, &Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(plan.top1(), vec![0; 4]);
        assert!(plan.assignments.iter().all(|a| (a[0].1 - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn partial_prediction_matches_closed_form() {
        // H=4 hidden rows, prefix of 2 tokens, N=2.
        let w = Tensor::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]).unwrap();
        let v1 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 1.0], &[-1.0, -1.0]]).unwrap();
        let p = RouterParams::new(RouterKind::PartialPrediction, Some(w), 1, 2).unwrap();
        let plan = partial_prediction_route(&p, &v1).unwrap();
        // logits: [1,-1], [0.5,2], [2.5,0], [-1.5,-1]
        let gate = |a: f64, b: f64| 1.0 / (1.0 + (b - a).exp());
        let expect = [(0, gate(1.0, -1.0)), (1, gate(2.0, 0.5)), (0, gate(2.5, 0.0)), (1, gate(-1.0, -1.5))];
        for (a, (e, g)) in plan.assignments.iter().zip(expect) {
            assert_eq!(a[0].0, e);
            assert!((a[0].1 - g).abs() < 1e-15);
        }
    }

    #[test]
    fn partial_prediction_shape_mismatch() {
        let p = RouterParams::new(RouterKind::PartialPrediction, Some(Tensor::zeros(&[3, 2])), 1, 2).unwrap();
        assert!(partial_prediction_route(&p, &Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn naive_smoe_sees_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = random(&mut rng, &[6, 3], -1.0, 1.0);
        let p = RouterParams::new(RouterKind::NaiveSmoe, Some(w), 1, 3).unwrap();
        let v = random(&mut rng, &[8, 6], -1.0, 1.0);
        let base = naive_smoe_route(&p, &v).unwrap();
        let mut v2 = v.clone();
        for r in 0..8 {
            v2.data_mut()[r * 6 + 5] += 3.0; // last token only
        }
        let after = naive_smoe_route(&p, &v2).unwrap();
        let diff: f64 = base
            .assignments
            .iter()
            .zip(&after.assignments)
            .map(|(a, b)| (a[0].1 - b[0].1).abs())
            .sum();
        assert!(diff > 0.0);

        let zero = RouterParams::new(RouterKind::NaiveSmoe, Some(Tensor::zeros(&[6, 3])), 1, 3).unwrap();
        assert!(naive_smoe_route(&zero, &v).unwrap().assignments.iter().all(|a| (a[0].1 - 1.0 / 3.0).abs() < 1e-15));
        let single = RouterParams::new(RouterKind::NaiveSmoe, Some(Tensor::zeros(&[6, 1])), 1, 1).unwrap();
        assert!(naive_smoe_route(&single, &v).unwrap().top1().iter().all(|&e| e == 0));
    }

    #[test]
    fn balanced_assignment_is_optimal_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..300 {
            let m = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=4);
            let aff = random(&mut rng, &[m, n], 0.0, 1.0);
            let owner = balanced_assign(&aff).unwrap();
            let got: f64 = owner.iter().enumerate().map(|(i, &e)| aff.get2(i, e)).sum();
            let best = brute_force_best(&aff);
            assert!((got - best).abs() < 1e-9, "m={m} n={n} got={got} best={best}");
        }
    }

    proptest! {
        #[test]
        fn balanced_loads_differ_by_at_most_one(m in 1usize..40, n in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let aff = random(&mut rng, &[m, n], -3.0, 3.0);
            let owner = balanced_assign(&aff).unwrap();
            let mut loads = vec![0usize; n];
            for e in owner { loads[e] += 1; }
            let (max, min) = (loads.iter().max().unwrap(), loads.iter().min().unwrap());
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn softmax_gates_form_a_distribution(seed in any::<u64>(), shift in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items = random(&mut rng, &[5, 3], -2.0, 2.0);
            let w = random(&mut rng, &[3, 4], -2.0, 2.0);
            let probs = softmax_probs(&items, &w).unwrap();
            for i in 0..5 {
                let s: f64 = probs.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(probs.row(i).iter().all(|&p| p > 0.0));
            }
            // A constant added to every logit of a row: append a bias column of ones.
            let mut aug = Vec::new();
            for i in 0..5 { aug.extend_from_slice(items.row(i)); aug.push(1.0); }
            let items_aug = Tensor::new(vec![5, 4], aug).unwrap();
            let mut wd = w.data().to_vec();
            wd.extend(std::iter::repeat_n(shift, 4));
            let w_aug = Tensor::new(vec![4, 4], wd).unwrap();
            let shifted = softmax_probs(&items_aug, &w_aug).unwrap();
            prop_assert!(probs.max_abs_diff(&shifted).unwrap() < 1e-12);
            prop_assert_eq!(select_topk(&probs, 1).unwrap().top1(), select_topk(&shifted, 1).unwrap().top1());
        }
    }
}
