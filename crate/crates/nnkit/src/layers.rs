//! Parameterized building blocks. Each layer holds [`ParamId`]s into a
//! [`ParamStore`] and is applied to a [`Graph`] through a [`Bound`] set of
//! parameter handles.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and bias ~ uniform(±1/√fan_in).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::uniform(&[fan_out], bound, rng))?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta, eps: 1e-6 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], T::from_f64_lossy(self.eps))
    }
}

/// Lookup table `[vocab, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let table = store.add(format!("{name}.table"), Tensor::uniform(&[vocab, dim], bound, rng))?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, ids: &[usize]) -> Result<Var> {
        g.gather_rows(p[self.table], ids)
    }
}

/// Multi-head scaled dot-product self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(crate::NnError::Config(format!(
                "hidden size {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(SelfAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), hidden, 3 * hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, hidden, rng)?,
            heads,
        })
    }

    /// `x` is `[batch*seq, H]`; keys where `key_mask` is false are ignored.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let qkv = self.qkv.forward(g, p, x)?;
        let a = g.attention(qkv, self.heads, batch, seq, key_mask)?;
        self.out.forward(g, p, a)
    }
}

/// `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), input, hidden, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, output, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }
}

/// Post-norm transformer encoder layer: self-attention and a feed-forward
/// block, each followed by a residual add and layer normalization.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: SelfAttention::new(store, &format!("{name}.attn"), hidden, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), hidden)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), hidden, ffn_hidden, hidden, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), hidden)?,
            dropout: 0.0,
        })
    }

    /// `dropout_seed` freezes the dropout masks; `None` draws from the graph RNG.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, p, x, batch, seq, key_mask)?;
        let a = g.dropout(a, self.dropout, dropout_seed)?;
        let h = g.add(x, a)?;
        let h = self.ln1.forward(g, p, h)?;
        let f = self.ffn.forward(g, p, h)?;
        let f = g.dropout(f, self.dropout, dropout_seed.map(|s| s ^ 0x9e37_79b9))?;
        let o = g.add(h, f)?;
        self.ln2.forward(g, p, o)
    }
}

/// Single-sequence convenience wrapper: `x` is `[M, H]`, output `[M, H]`.
pub fn multi_head_self_attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, attn: &SelfAttention, x: Var) -> Result<Var> {
    let m = g.shape(x)[0];
    attn.forward(g, p, x, 1, m, None)
}
