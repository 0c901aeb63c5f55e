//! Dense building blocks: linear maps, layer norm, FFN, the Spatial Gating
//! Unit (single and multi-head) and multi-head self-attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng),
            bias: store.add_full(format!("{name}.bias"), &[out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, ps.var(self.weight))?;
        tape.add_row_bias(h, ps.var(self.bias))
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_full(format!("{name}.beta"), &[dim], 0.0),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, ps.var(self.gamma), ps.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Position-wise feed-forward network `gelu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, ps, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, ps, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

/// Spatial Gating Unit: a learned `T×T` token-mixing matrix applied along
/// the sequence axis, `Y = W_s·X + b_s`.
///
/// When causal, entries above the diagonal are held at exactly zero: they are
/// zeroed at construction and by [`Sgu::enforce_causal`] after every update.
#[derive(Debug, Clone)]
pub struct Sgu {
    pub weight: ParamId,
    pub bias: ParamId,
    pub seq_len: usize,
    pub causal: bool,
}

impl Sgu {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, seq_len: usize, causal: bool) -> Self {
        let bound = 1e-3 / seq_len as f64;
        let sgu = Self {
            weight: store.add_uniform(format!("{name}.spatial"), &[seq_len, seq_len], bound, rng),
            bias: store.add_full(format!("{name}.spatial_bias"), &[seq_len], 0.0),
            seq_len,
            causal,
        };
        sgu.enforce_causal(store);
        sgu
    }

    /// Zeroes the strict upper triangle of `W_s` if the unit is causal.
    pub fn enforce_causal(&self, store: &mut ParamStore) {
        if !self.causal {
            return;
        }
        let t = self.seq_len;
        let w = store.get_mut(self.weight).data_mut();
        for r in 0..t {
            w[r * t + r + 1..(r + 1) * t].fill(0.0);
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.seq_len {
            return Err(Error::Shape {
                op: "sgu",
                detail: format!("sequence length {len} does not match spatial weights of {}", self.seq_len),
            });
        }
        Ok(())
    }

    /// `x: [T×C]` to `[T×C]`.
    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var) -> Result<Var> {
        self.check_len(tape.shape(x)[0])?;
        let y = tape.matmul(ps.var(self.weight), x)?;
        tape.add_col_bias(y, ps.var(self.bias))
    }

    /// Same map in the transposed layout: `v: [C×T]` (one hidden vector per row)
    /// to `v·W_sᵀ + b_s`.
    pub fn forward_transposed(&self, tape: &mut Tape, ps: &Bound, v: Var) -> Result<Var> {
        self.check_len(tape.shape(v)[1])?;
        let wt = tape.transpose(ps.var(self.weight))?;
        let y = tape.matmul(v, wt)?;
        tape.add_row_bias(y, ps.var(self.bias))
    }

    /// Applies the top-left `ℓ×ℓ` corner of `W_s` to a length-`ℓ` subsequence `x: [ℓ×C]`.
    pub fn forward_prefix(&self, tape: &mut Tape, ps: &Bound, x: Var) -> Result<Var> {
        let len = tape.shape(x)[0];
        if len > self.seq_len {
            return Err(Error::Capacity {
                len,
                capacity: self.seq_len,
            });
        }
        if len == self.seq_len {
            return self.forward(tape, ps, x);
        }
        let rows = tape.slice(ps.var(self.weight), 0, 0, len)?;
        let w = tape.slice(rows, 1, 0, len)?;
        let b = tape.slice(ps.var(self.bias), 0, 0, len)?;
        let y = tape.matmul(w, x)?;
        tape.add_col_bias(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.seq_len * self.seq_len + self.seq_len
    }
}

/// Splits `x: [T×H]` into `heads.len()` column blocks, mixes block `i` with
/// `heads[i]`, and concatenates the results in block order.
pub fn multi_head_sgu(tape: &mut Tape, ps: &Bound, heads: &[Sgu], x: Var) -> Result<Var> {
    let h = tape.shape(x)[1];
    if heads.is_empty() || !h.is_multiple_of(heads.len()) {
        return Err(Error::Divisibility {
            what: "hidden size",
            value: h,
            by: heads.len(),
        });
    }
    let chunks = tape.chunk(x, heads.len(), 1)?;
    let outs = heads
        .iter()
        .zip(chunks)
        .map(|(sgu, c)| sgu.forward(tape, ps, c))
        .collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.concat(&outs, 1)
}

/// Multi-head scaled dot-product self-attention with an output projection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Divisibility {
                what: "embedding size",
                value: dim,
                by: heads,
            });
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var, causal: bool) -> Result<Var> {
        let dim = tape.shape(x)[1];
        if dim != self.query.in_dim {
            return Err(Error::Dimension {
                op: "self_attention",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.query.in_dim, self.query.out_dim],
            });
        }
        let head_dim = dim / self.heads;
        let q = self.query.forward(tape, ps, x)?;
        let k = self.key.forward(tape, ps, x)?;
        let v = self.value.forward(tape, ps, x)?;
        let qs = tape.chunk(q, self.heads, 1)?;
        let ks = tape.chunk(k, self.heads, 1)?;
        let vs = tape.chunk(v, self.heads, 1)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if causal {
                scores = tape.mask_upper(scores)?;
            }
            let attn = tape.softmax(scores, 1)?;
            ctx.push(tape.matmul(attn, vh)?);
        }
        let joined = if ctx.len() == 1 { ctx[0] } else { tape.concat(&ctx, 1)? };
        self.output.forward(tape, ps, joined)
    }

    /// `4·H·(H+1)`, independent of the head count.
    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.output.num_params()
    }
}

/// Pre-norm gMLP block: `x + SGU(LN x)`, then `x + FFN(LN x)`.
///
/// The spatial unit may be split into heads along the hidden axis. Inputs
/// shorter than `T` use the top-left corner of every head's `W_s`.
#[derive(Debug, Clone)]
pub struct GmlpBlock {
    pub norm1: LayerNorm,
    pub heads: Vec<Sgu>,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl GmlpBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        seq_len: usize,
        dim: usize,
        ffn_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Divisibility {
                what: "hidden size",
                value: dim,
                by: heads,
            });
        }
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let heads = (0..heads)
            .map(|i| Sgu::new(store, rng, &format!("{name}.sgu{i}"), seq_len, true))
            .collect();
        Ok(Self {
            norm1,
            heads,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), dim, ffn_dim),
        })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, ps, x)?;
        let mixed = if self.heads.len() == 1 {
            self.heads[0].forward_prefix(tape, ps, h)?
        } else {
            let parts = tape.chunk(h, self.heads.len(), 1)?;
            let outs = self
                .heads
                .iter()
                .zip(parts)
                .map(|(sgu, c)| sgu.forward_prefix(tape, ps, c))
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&outs, 1)?
        };
        let x = tape.add(x, mixed)?;
        let h = self.norm2.forward(tape, ps, x)?;
        let h = self.ffn.forward(tape, ps, h)?;
        tape.add(x, h)
    }

    pub fn enforce_causal(&self, store: &mut ParamStore) {
        for sgu in &self.heads {
            sgu.enforce_causal(store);
        }
    }

    pub fn num_params(&self) -> usize {
        let norms = 4 * self.norm1.dim;
        norms + self.heads.iter().map(Sgu::num_params).sum::<usize>() + self.ffn.num_params()
    }
}

/// Inverted dropout: zeroes entries with probability `p`, rescales survivors by `1/(1-p)`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let numel = shape.iter().product();
    let mask = (0..numel)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}
