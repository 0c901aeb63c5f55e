//! Full language models assembled from dense and sparse blocks.
//!
//! Every architecture shares the same frame: token plus learned position
//! embeddings, a stack of pre-norm residual blocks, a final layer norm, and an
//! output projection tied to the token embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{NaiveGmlpMoe, RouteContext, SpatialMoe, TokenMoe};
use crate::nn::{dropout, Attention, Ffn, GmlpBlock, LayerNorm};
use crate::params::{Bound, ParamId, ParamStore};
use crate::routing::{partial_prefix_len, RouterKind, RoutingPlan};
use crate::tensor::{Tape, Tensor, Var};

#[cfg(test)]
mod tests;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Dense gMLP blocks with sparse blocks holding an sMoE and a tMoE.
    Smlp,
    Gmlp,
    Transformer,
    /// Dense Transformer blocks with sparse attention + tMoE blocks.
    TransformerMoe,
    /// Dense gMLP blocks with naive token-routed gMLP blocks.
    GmlpTokenMoe,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Self::Smlp => "smlp",
            Self::Gmlp => "gmlp",
            Self::Transformer => "transformer",
            Self::TransformerMoe => "transformer_moe",
            Self::GmlpTokenMoe => "gmlp_token_moe",
        }
    }
}

fn default_experts() -> usize {
    1
}
fn default_heads() -> usize {
    1
}
fn default_top_k() -> usize {
    1
}
fn default_partial_fraction() -> f64 {
    0.2
}
fn default_balance_coef() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub n_dense: usize,
    #[serde(default)]
    pub n_sparse: usize,
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    /// Attention heads, or SGU heads in dense gMLP blocks.
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Hidden-dimension router of sMLP sparse blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router: Option<RouterKind>,
    /// Token router of tMoE layers and naive gMLP mixtures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_router: Option<RouterKind>,
    /// Experts per token in tMoE layers.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_partial_fraction")]
    pub partial_fraction: f64,
    /// Weight of the balance loss from softmax top-k routers.
    #[serde(default = "default_balance_coef")]
    pub balance_loss_coef: f64,
    #[serde(default)]
    pub hash_seed: u64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Minimal config with defaults for everything but the shape.
    pub fn new(arch: Arch, vocab_size: usize, seq_len: usize, embed_dim: usize, ffn_dim: usize, n_dense: usize) -> Self {
        Self {
            arch,
            vocab_size,
            seq_len,
            embed_dim,
            ffn_dim,
            n_dense,
            n_sparse: 0,
            n_experts: default_experts(),
            n_heads: default_heads(),
            router: None,
            token_router: None,
            top_k: default_top_k(),
            partial_fraction: default_partial_fraction(),
            balance_loss_coef: default_balance_coef(),
            hash_seed: 0,
            seed: 0,
        }
    }

    pub fn spatial_router(&self) -> RouterKind {
        self.router.unwrap_or(RouterKind::DeterministicChunk)
    }

    pub fn token_router_kind(&self) -> RouterKind {
        self.token_router.unwrap_or(match self.arch {
            Arch::GmlpTokenMoe => RouterKind::Hash,
            _ => RouterKind::BalancedAssignment,
        })
    }

    /// Number of leading positions excluded from the loss.
    pub fn masked_prefix(&self) -> usize {
        if self.arch == Arch::Smlp && self.n_sparse > 0 && self.spatial_router() == RouterKind::PartialPrediction {
            partial_prefix_len(self.seq_len, self.partial_fraction)
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return cfg(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.seq_len == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return cfg("seq_len, embed_dim and ffn_dim must be positive".into());
        }
        if self.n_dense + self.n_sparse == 0 {
            return cfg("model has no blocks".into());
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Divisibility {
                what: "embed_dim",
                value: self.embed_dim,
                by: self.n_heads,
            });
        }
        if !(self.partial_fraction > 0.0 && self.partial_fraction < 1.0) {
            return cfg(format!("partial_fraction must lie in (0, 1), got {}", self.partial_fraction));
        }
        if !(self.balance_loss_coef >= 0.0 && self.balance_loss_coef.is_finite()) {
            return cfg(format!("balance_loss_coef must be nonnegative, got {}", self.balance_loss_coef));
        }
        if matches!(self.arch, Arch::Gmlp | Arch::Transformer) && self.n_sparse > 0 {
            return cfg(format!("{} is dense; n_sparse must be 0", self.arch.name()));
        }
        if self.n_sparse > 0 {
            if self.n_experts == 0 {
                return cfg("n_experts must be at least 1".into());
            }
            if self.top_k == 0 || self.top_k > self.n_experts {
                return cfg(format!("top_k {} must lie in [1, {}]", self.top_k, self.n_experts));
            }
            let token = self.token_router_kind();
            if !token.routes_tokens() {
                return cfg(format!("token_router {} does not route tokens", token.name()));
            }
            if self.arch == Arch::GmlpTokenMoe && self.top_k != 1 {
                return cfg("gmlp_token_moe supports top_k = 1 only".into());
            }
            if self.arch == Arch::Smlp {
                let spatial = self.spatial_router();
                if !spatial.routes_hidden() {
                    return cfg(format!("router {} does not route hidden dimensions", spatial.name()));
                }
                if spatial == RouterKind::DeterministicChunk && !self.embed_dim.is_multiple_of(self.n_experts) {
                    return Err(Error::Divisibility {
                        what: "embed_dim",
                        value: self.embed_dim,
                        by: self.n_experts,
                    });
                }
                if spatial == RouterKind::PartialPrediction && self.masked_prefix() >= self.seq_len {
                    return cfg(format!("seq_len {} too short for partial prediction", self.seq_len));
                }
            }
        }
        if self.arch != Arch::Smlp && self.router.is_some() {
            return cfg(format!("router applies only to smlp, not {}", self.arch.name()));
        }
        placement(self.n_dense, self.n_sparse)?;
        Ok(())
    }
}

/// Dense-layer indices after which sparse blocks go: `⌊j·(N₁+N₂)/(N₂+1)⌋`
/// for `j = 1..=N₂`. Every index must fall in `[1, N₁]`.
pub fn placement(n_dense: usize, n_sparse: usize) -> Result<Vec<usize>> {
    let total = n_dense + n_sparse;
    (1..=n_sparse)
        .map(|j| {
            let idx = j * total / (n_sparse + 1);
            if idx == 0 || idx > n_dense {
                Err(Error::Config(format!(
                    "cannot place {n_sparse} sparse blocks among {n_dense} dense layers: sparse block {j} would follow dense layer {idx}"
                )))
            } else {
                Ok(idx)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    DenseGmlp,
    DenseTransformer,
    /// sMoE followed by tMoE.
    SparseSmlp,
    /// Self-attention followed by tMoE.
    SparseTransformerMoe,
    NaiveGmlpMoe,
}

impl BlockKind {
    pub fn is_sparse(self) -> bool {
        !matches!(self, Self::DenseGmlp | Self::DenseTransformer)
    }
}

/// Ordered block layout of a config.
pub fn block_spec(cfg: &ModelConfig) -> Result<Vec<BlockKind>> {
    let (dense, sparse) = match cfg.arch {
        Arch::Smlp => (BlockKind::DenseGmlp, BlockKind::SparseSmlp),
        Arch::Gmlp => (BlockKind::DenseGmlp, BlockKind::SparseSmlp),
        Arch::Transformer => (BlockKind::DenseTransformer, BlockKind::SparseTransformerMoe),
        Arch::TransformerMoe => (BlockKind::DenseTransformer, BlockKind::SparseTransformerMoe),
        Arch::GmlpTokenMoe => (BlockKind::DenseGmlp, BlockKind::NaiveGmlpMoe),
    };
    let after = placement(cfg.n_dense, cfg.n_sparse)?;
    let mut spec = Vec::with_capacity(cfg.n_dense + cfg.n_sparse);
    let mut next = after.iter().peekable();
    for d in 1..=cfg.n_dense {
        spec.push(dense);
        while next.next_if(|&&i| i == d).is_some() {
            spec.push(sparse);
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct SmlpLayer {
    pub norm1: LayerNorm,
    pub smoe: SpatialMoe,
    pub norm2: LayerNorm,
    pub tmoe: TokenMoe,
}

#[derive(Debug, Clone)]
pub struct TransformerMoeLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub tmoe: TokenMoe,
}

#[derive(Debug, Clone)]
pub enum Block {
    DenseGmlp(GmlpBlock),
    DenseTransformer(TransformerLayer),
    SparseSmlp(SmlpLayer),
    SparseTransformerMoe(TransformerMoeLayer),
    NaiveGmlpMoe(NaiveGmlpMoe),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Self::DenseGmlp(_) => BlockKind::DenseGmlp,
            Self::DenseTransformer(_) => BlockKind::DenseTransformer,
            Self::SparseSmlp(_) => BlockKind::SparseSmlp,
            Self::SparseTransformerMoe(_) => BlockKind::SparseTransformerMoe,
            Self::NaiveGmlpMoe(_) => BlockKind::NaiveGmlpMoe,
        }
    }
}

/// Forward-pass options.
#[derive(Debug)]
pub struct Mode<'a> {
    /// Selects balanced (training) or argmax (inference) assignment.
    pub training: bool,
    /// Dropout on the embedding output; needs `rng` when positive.
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Mode<'_> {
    pub fn eval() -> Self {
        Mode {
            training: false,
            dropout: 0.0,
            rng: None,
        }
    }
}

/// Routing decision of one sparse layer.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub block: usize,
    /// `"smoe"`, `"tmoe"` or `"token_gmlp"`.
    pub layer: &'static str,
    pub plan: RoutingPlan,
}

#[derive(Debug, Clone)]
pub struct LmOutput {
    /// `[T×V]` next-token logits.
    pub logits: Var,
    /// Positions that contribute to the loss.
    pub mask: Vec<bool>,
    /// Weighted sum of all balance losses, when any router provides one.
    pub aux_loss: Option<Var>,
    pub plans: Vec<LayerPlan>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

const EMBED_INIT: f64 = 0.02;

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (t, h, f) = (cfg.seq_len, cfg.embed_dim, cfg.ffn_dim);
        let embed = store.add_uniform("embed.tokens", &[cfg.vocab_size, h], EMBED_INIT, &mut rng);
        let pos = store.add_uniform("embed.positions", &[t, h], EMBED_INIT, &mut rng);
        let mut blocks = Vec::new();
        for (i, kind) in block_spec(cfg)?.into_iter().enumerate() {
            let name = format!("block{i}");
            let s = &mut store;
            let r = &mut rng;
            let ln = |s: &mut ParamStore, which: &str| LayerNorm::new(s, &format!("{name}.{which}"), h);
            let block = match kind {
                BlockKind::DenseGmlp => Block::DenseGmlp(GmlpBlock::new(s, r, &name, t, h, f, cfg.n_heads)?),
                BlockKind::DenseTransformer => Block::DenseTransformer(TransformerLayer {
                    norm1: ln(s, "norm1"),
                    attn: Attention::new(s, r, &format!("{name}.attn"), h, cfg.n_heads)?,
                    norm2: ln(s, "norm2"),
                    ffn: Ffn::new(s, r, &format!("{name}.ffn"), h, f),
                }),
                BlockKind::SparseSmlp => Block::SparseSmlp(SmlpLayer {
                    norm1: ln(s, "norm1"),
                    smoe: SpatialMoe::new(
                        s,
                        r,
                        &format!("{name}.smoe"),
                        cfg.spatial_router(),
                        t,
                        h,
                        cfg.n_experts,
                        partial_prefix_len(t, cfg.partial_fraction),
                    )?,
                    norm2: ln(s, "norm2"),
                    tmoe: token_moe(s, r, &name, cfg)?,
                }),
                BlockKind::SparseTransformerMoe => Block::SparseTransformerMoe(TransformerMoeLayer {
                    norm1: ln(s, "norm1"),
                    attn: Attention::new(s, r, &format!("{name}.attn"), h, cfg.n_heads)?,
                    norm2: ln(s, "norm2"),
                    tmoe: token_moe(s, r, &name, cfg)?,
                }),
                BlockKind::NaiveGmlpMoe => Block::NaiveGmlpMoe(NaiveGmlpMoe::new(
                    s,
                    r,
                    &format!("{name}.token_gmlp"),
                    cfg.token_router_kind(),
                    t,
                    h,
                    f,
                    cfg.n_experts,
                    cfg.hash_seed,
                )?),
            };
            blocks.push(block);
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", h);
        let model = Self {
            cfg: cfg.clone(),
            store,
            embed,
            pos,
            blocks,
            final_norm,
        };
        Ok(model)
    }

    /// Re-zeroes the upper triangle of every causal spatial matrix.
    pub fn enforce_causal(&mut self) {
        for b in &self.blocks {
            match b {
                Block::DenseGmlp(g) => g.enforce_causal(&mut self.store),
                Block::SparseSmlp(l) => l.smoe.enforce_causal(&mut self.store),
                Block::NaiveGmlpMoe(n) => n.enforce_causal(&mut self.store),
                Block::DenseTransformer(_) | Block::SparseTransformerMoe(_) => {}
            }
        }
    }

    /// Loss mask for one sequence.
    pub fn loss_mask(&self) -> Vec<bool> {
        let skip = self.cfg.masked_prefix();
        (0..self.cfg.seq_len).map(|i| i >= skip).collect()
    }

    /// Runs the network on exactly `T` token ids.
    pub fn forward_lm(&self, tape: &mut Tape, ps: &Bound, tokens: &[usize], mode: &mut Mode) -> Result<LmOutput> {
        let t = self.cfg.seq_len;
        if tokens.len() != t {
            return Err(Error::Shape {
                op: "forward_lm",
                detail: format!("expected {t} tokens, got {}", tokens.len()),
            });
        }
        let tok = tape.embedding(ps.var(self.embed), tokens)?;
        let mut x = tape.add(tok, ps.var(self.pos))?;
        if mode.dropout > 0.0 {
            let rng = mode
                .rng
                .as_deref_mut()
                .ok_or_else(|| Error::Config("dropout needs a random source".into()))?;
            x = dropout(tape, x, mode.dropout, rng)?;
        }
        let ctx = RouteContext {
            token_ids: tokens,
            training: mode.training,
        };
        let mut plans = Vec::new();
        let mut aux: Vec<Var> = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = match block {
                Block::DenseGmlp(g) => g.forward(tape, ps, x)?,
                Block::DenseTransformer(l) => {
                    let h = l.norm1.forward(tape, ps, x)?;
                    let h = l.attn.forward(tape, ps, h, true)?;
                    let x = tape.add(x, h)?;
                    let h = l.norm2.forward(tape, ps, x)?;
                    let h = l.ffn.forward(tape, ps, h)?;
                    tape.add(x, h)?
                }
                Block::SparseSmlp(l) => {
                    let h = l.norm1.forward(tape, ps, x)?;
                    let s = l.smoe.forward(tape, ps, h)?;
                    plans.push(LayerPlan {
                        block: i,
                        layer: "smoe",
                        plan: s.plan,
                    });
                    aux.extend(s.aux_loss);
                    let x = tape.add(x, s.y)?;
                    let h = l.norm2.forward(tape, ps, x)?;
                    let m = l.tmoe.forward(tape, ps, h, ctx)?;
                    plans.push(LayerPlan {
                        block: i,
                        layer: "tmoe",
                        plan: m.plan,
                    });
                    aux.extend(m.aux_loss);
                    tape.add(x, m.y)?
                }
                Block::SparseTransformerMoe(l) => {
                    let h = l.norm1.forward(tape, ps, x)?;
                    let h = l.attn.forward(tape, ps, h, true)?;
                    let x = tape.add(x, h)?;
                    let h = l.norm2.forward(tape, ps, x)?;
                    let m = l.tmoe.forward(tape, ps, h, ctx)?;
                    plans.push(LayerPlan {
                        block: i,
                        layer: "tmoe",
                        plan: m.plan,
                    });
                    aux.extend(m.aux_loss);
                    tape.add(x, m.y)?
                }
                Block::NaiveGmlpMoe(n) => {
                    let m = n.forward(tape, ps, x, ctx)?;
                    plans.push(LayerPlan {
                        block: i,
                        layer: "token_gmlp",
                        plan: m.plan,
                    });
                    aux.extend(m.aux_loss);
                    m.y
                }
            };
        }
        let h = self.final_norm.forward(tape, ps, x)?;
        let table_t = tape.transpose(ps.var(self.embed))?;
        let logits = tape.matmul(h, table_t)?;
        let aux_loss = match aux.split_first() {
            None => None,
            Some((&first, rest)) => {
                let mut total = first;
                for &a in rest {
                    total = tape.add(total, a)?;
                }
                Some(tape.scale(total, self.cfg.balance_loss_coef))
            }
        };
        Ok(LmOutput {
            logits,
            mask: self.loss_mask(),
            aux_loss,
            plans,
        })
    }

    /// Next-token loss on a `T+1` token window: masked cross-entropy plus the
    /// weighted balance loss. Returns `(total, cross_entropy, output)`.
    pub fn lm_loss(&self, tape: &mut Tape, ps: &Bound, window: &[usize], mode: &mut Mode) -> Result<(Var, Var, LmOutput)> {
        let t = self.cfg.seq_len;
        if window.len() != t + 1 {
            return Err(Error::Shape {
                op: "lm_loss",
                detail: format!("expected a window of {} tokens, got {}", t + 1, window.len()),
            });
        }
        let out = self.forward_lm(tape, ps, &window[..t], mode)?;
        let ce = tape.cross_entropy(out.logits, &window[1..], &out.mask)?;
        let total = match out.aux_loss {
            Some(a) => tape.add(ce, a)?,
            None => ce,
        };
        Ok((total, ce, out))
    }

    /// Inference-mode logits `[T×V]` for a token sequence of length `T`.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ps = self.store.bind(&mut tape, false);
        let out = self.forward_lm(&mut tape, &ps, tokens, &mut Mode::eval())?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

fn token_moe(store: &mut ParamStore, rng: &mut ChaCha8Rng, block: &str, cfg: &ModelConfig) -> Result<TokenMoe> {
    TokenMoe::new(
        store,
        rng,
        &format!("{block}.tmoe"),
        cfg.token_router_kind(),
        cfg.embed_dim,
        cfg.ffn_dim,
        cfg.n_experts,
        cfg.top_k,
        cfg.hash_seed,
    )
}
