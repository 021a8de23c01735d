//! The self-attention operator, its multi-head wrapper, and the pre-norm
//! transformer block.
//!
//! All forwards are batched: inputs are `[B, n, d]` and weights are shared
//! across the batch, which is how the model runs the same block over M local
//! patches (B = M) or over a batch of clouds. Rank-2 entry points wrap the
//! batched path with B = 1.
//!
//! Attention projections are bias-free (pure matrix products); the block MLP
//! carries biases. The MSA sublayer of a block can be disabled at runtime,
//! leaving only LayerNorm + MLP + residuals, which is the attention ablation
//! switch.

use std::cell::Cell;

use rand::RngCore;

use crate::tensor::{flops, xavier_uniform, Element, ParamSet, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Query/key/value projections of one attention head.
pub struct HeadParams<E: Element> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
}

impl<E: Element> HeadParams<E> {
    pub fn init(rng: &mut impl RngCore, d: usize, d_head: usize) -> Self {
        HeadParams {
            wq: xavier_uniform(rng, d, d_head),
            wk: xavier_uniform(rng, d, d_head),
            wv: xavier_uniform(rng, d, d_head),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.wq.shape();
        (s[0], s[1])
    }

    fn collect(&self, params: &mut ParamSet<E>, prefix: &str) {
        params.push(format!("{prefix}.wq"), self.wq.clone());
        params.push(format!("{prefix}.wk"), self.wk.clone());
        params.push(format!("{prefix}.wv"), self.wv.clone());
    }
}

/// Multi-head attention: h heads plus the output projection `wp`
/// mapping the concatenated head outputs (width h * d_head) back to d.
pub struct MsaParams<E: Element> {
    pub heads: Vec<HeadParams<E>>,
    pub wp: Tensor<E>,
}

impl<E: Element> MsaParams<E> {
    /// Per-head width is floor(d / h); `wp` restores width d, so d need not
    /// be divisible by h.
    pub fn init(rng: &mut impl RngCore, d: usize, h: usize) -> Self {
        assert!(h >= 1 && d >= h, "need 1 <= h <= d");
        let d_head = d / h;
        let heads = (0..h).map(|_| HeadParams::init(rng, d, d_head)).collect();
        MsaParams {
            heads,
            wp: xavier_uniform(rng, h * d_head, d),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn width(&self) -> usize {
        self.heads[0].dims().0
    }

    pub fn head_width(&self) -> usize {
        self.heads[0].dims().1
    }

    fn collect(&self, params: &mut ParamSet<E>, prefix: &str) {
        for (i, head) in self.heads.iter().enumerate() {
            head.collect(params, &format!("{prefix}.head{i}"));
        }
        params.push(format!("{prefix}.wp"), self.wp.clone());
    }
}

/// One pre-norm transformer block: LN -> MSA -> residual, then
/// LN -> MLP (one hidden GELU layer) -> residual.
pub struct TransformerBlockParams<E: Element> {
    pub ln1_gain: Tensor<E>,
    pub ln1_bias: Tensor<E>,
    pub ln2_gain: Tensor<E>,
    pub ln2_bias: Tensor<E>,
    pub msa: MsaParams<E>,
    pub mlp_w1: Tensor<E>,
    pub mlp_b1: Tensor<E>,
    pub mlp_w2: Tensor<E>,
    pub mlp_b2: Tensor<E>,
    /// When false the MSA sublayer contributes nothing (attention ablation).
    pub msa_enabled: Cell<bool>,
}

impl<E: Element> TransformerBlockParams<E> {
    pub fn init(rng: &mut impl RngCore, d: usize, h: usize, expansion: usize) -> Self {
        let hidden = expansion * d;
        TransformerBlockParams {
            ln1_gain: Tensor::full(&[d], E::one()),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], E::one()),
            ln2_bias: Tensor::zeros(&[d]),
            msa: MsaParams::init(rng, d, h),
            mlp_w1: xavier_uniform(rng, d, hidden),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: xavier_uniform(rng, hidden, d),
            mlp_b2: Tensor::zeros(&[d]),
            msa_enabled: Cell::new(true),
        }
    }

    pub fn width(&self) -> usize {
        self.msa.width()
    }

    pub fn hidden(&self) -> usize {
        self.mlp_w1.shape()[1]
    }

    pub fn collect(&self, params: &mut ParamSet<E>, prefix: &str) {
        params.push(format!("{prefix}.ln1.gain"), self.ln1_gain.clone());
        params.push(format!("{prefix}.ln1.bias"), self.ln1_bias.clone());
        self.msa.collect(params, &format!("{prefix}.msa"));
        params.push(format!("{prefix}.ln2.gain"), self.ln2_gain.clone());
        params.push(format!("{prefix}.ln2.bias"), self.ln2_bias.clone());
        params.push(format!("{prefix}.mlp.w1"), self.mlp_w1.clone());
        params.push(format!("{prefix}.mlp.b1"), self.mlp_b1.clone());
        params.push(format!("{prefix}.mlp.w2"), self.mlp_w2.clone());
        params.push(format!("{prefix}.mlp.b2"), self.mlp_b2.clone());
    }
}

/// Enables or disables a block's MSA sublayer; the MLP sublayer always runs.
pub fn masked_msa_mode<E: Element>(block: &TransformerBlockParams<E>, enabled: bool) {
    block.msa_enabled.set(enabled);
}

/// Which branch an attention map came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BranchTag {
    Global,
    /// Local branch, tagged with the patch (anchor) index.
    LocalPatch(usize),
}

impl std::fmt::Display for BranchTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BranchTag::Global => write!(f, "global"),
            BranchTag::LocalPatch(i) => write!(f, "local:{i}"),
        }
    }
}

/// Post-softmax attention weights of one (layer, branch): `[h, n, n]`.
#[derive(Clone, Debug)]
pub struct AttentionMap<E: Element> {
    pub probs: Vec<E>,
    pub heads: usize,
    pub n: usize,
    pub layer_index: usize,
    pub branch: BranchTag,
}

impl<E: Element> AttentionMap<E> {
    pub fn row(&self, head: usize, query: usize) -> &[E] {
        let base = (head * self.n + query) * self.n;
        &self.probs[base..base + self.n]
    }
}

/// Raw per-head probabilities captured from a batched MSA call:
/// one `[B, n, n]` buffer per head.
pub struct CapturedProbs<E: Element> {
    pub per_head: Vec<Vec<E>>,
    pub batch: usize,
    pub n: usize,
}

impl<E: Element> CapturedProbs<E> {
    /// Reassembles the [h, n, n] map of one batch element.
    pub fn map_for(
        &self,
        batch_index: usize,
        layer_index: usize,
        branch: BranchTag,
    ) -> AttentionMap<E> {
        let nn = self.n * self.n;
        let mut probs = Vec::with_capacity(self.per_head.len() * nn);
        for head in &self.per_head {
            probs.extend_from_slice(&head[batch_index * nn..(batch_index + 1) * nn]);
        }
        AttentionMap {
            probs,
            heads: self.per_head.len(),
            n: self.n,
            layer_index,
            branch,
        }
    }
}

/// Scaled dot-product self-attention of one head over `[B, n, d]`:
/// `Softmax(Q K^T / sqrt(d_head)) V`. Returns `([B, n, d_head], [B, n, n])`.
pub fn self_attention_batched<E: Element>(
    x: &Tensor<E>,
    head: &HeadParams<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "self_attention expects [B, n, d], got {s:?}"
        )));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let (dh_in, d_head) = head.dims();
    if dh_in != d {
        return Err(Error::Shape {
            op: "self_attention",
            lhs: s,
            rhs: head.wq.shape(),
        });
    }
    let flat = x.reshape(&[b * n, d])?;
    let (q, k, v) = {
        let _g = flops::scope("qkv");
        (
            flat.matmul(&head.wq)?.reshape(&[b, n, d_head])?,
            flat.matmul(&head.wk)?.reshape(&[b, n, d_head])?,
            flat.matmul(&head.wv)?.reshape(&[b, n, d_head])?,
        )
    };
    let probs = {
        let logits = {
            let _g = flops::scope("att_mm");
            q.bmm_nt(&k)?
        };
        let _g = flops::scope("att_sm");
        logits
            .scale(1.0 / (d_head as f64).sqrt())
            .softmax_rows()?
    };
    let out = {
        let _g = flops::scope("att_mm");
        probs.bmm(&v)?
    };
    Ok((out, probs))
}

/// Rank-2 wrapper: `[n, d] -> ([n, d_head], [n, n])`.
pub fn self_attention<E: Element>(
    x: &Tensor<E>,
    head: &HeadParams<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "self_attention expects [n, d], got {s:?}"
        )));
    }
    let (n, d) = (s[0], s[1]);
    let (out, probs) = self_attention_batched(&x.reshape(&[1, n, d])?, head)?;
    let d_head = head.dims().1;
    Ok((out.reshape(&[n, d_head])?, probs.reshape(&[n, n])?))
}

/// Multi-head self-attention over `[B, n, d]`: concatenates the per-head
/// outputs column-wise and projects back to width d with `wp`. When
/// `capture` is set, the post-softmax weights of every head are copied out.
pub fn multi_head_sa_batched<E: Element>(
    x: &Tensor<E>,
    p: &MsaParams<E>,
    mut capture: Option<&mut Option<CapturedProbs<E>>>,
) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "multi_head_sa expects [B, n, d], got {s:?}"
        )));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut probs_out: Vec<Vec<E>> = Vec::new();
    for head in &p.heads {
        let (out, probs) = self_attention_batched(x, head)?;
        if capture.is_some() {
            probs_out.push(probs.value());
        }
        outs.push(out);
    }
    if let Some(slot) = capture.as_deref_mut() {
        *slot = Some(CapturedProbs {
            per_head: probs_out,
            batch: b,
            n,
        });
    }
    let cat = Tensor::concat_last(&outs)?; // [B, n, h*d_head]
    let hd = p.heads.len() * p.head_width();
    let out = {
        let _g = flops::scope("proj");
        cat.reshape(&[b * n, hd])?.matmul(&p.wp)?
    };
    out.reshape(&[b, n, d])
}

/// Rank-2 wrapper for [`multi_head_sa_batched`].
pub fn multi_head_sa<E: Element>(x: &Tensor<E>, p: &MsaParams<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "multi_head_sa expects [n, d], got {s:?}"
        )));
    }
    let out = multi_head_sa_batched(&x.reshape(&[1, s[0], s[1]])?, p, None)?;
    out.reshape(&[s[0], s[1]])
}

/// Pre-norm transformer block over `[B, n, d]`:
/// `x1 = MSA(LN(x)) + x; out = MLP(LN(x1)) + x1`.
pub fn transformer_block_batched<E: Element>(
    x: &Tensor<E>,
    p: &TransformerBlockParams<E>,
    capture: Option<&mut Option<CapturedProbs<E>>>,
) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 3 || s[2] != p.width() {
        return Err(Error::Shape {
            op: "transformer_block",
            lhs: s,
            rhs: vec![p.width()],
        });
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let x1 = if p.msa_enabled.get() {
        let normed = {
            let _g = flops::scope("ln");
            x.layer_norm(&p.ln1_gain, &p.ln1_bias, LAYER_NORM_EPS)?
        };
        let att = multi_head_sa_batched(&normed, &p.msa, capture)?;
        let _g = flops::scope("residual");
        att.add(x)?
    } else {
        x.clone()
    };
    let normed = {
        let _g = flops::scope("ln");
        x1.layer_norm(&p.ln2_gain, &p.ln2_bias, LAYER_NORM_EPS)?
    };
    let hidden = {
        let _g = flops::scope("mlp");
        normed
            .reshape(&[b * n, d])?
            .matmul(&p.mlp_w1)?
            .add_bias(&p.mlp_b1)?
            .gelu()
            .matmul(&p.mlp_w2)?
            .add_bias(&p.mlp_b2)?
            .reshape(&[b, n, d])?
    };
    let _g = flops::scope("residual");
    hidden.add(&x1)
}

/// Rank-2 wrapper for [`transformer_block_batched`].
pub fn transformer_block<E: Element>(
    x: &Tensor<E>,
    p: &TransformerBlockParams<E>,
) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "transformer_block expects [n, d], got {s:?}"
        )));
    }
    let out = transformer_block_batched(&x.reshape(&[1, s[0], s[1]])?, p, None)?;
    out.reshape(&[s[0], s[1]])
}
