//! Small pre-norm transformer over caption tokens, shared by the denoiser's
//! text encoder and the matcher's caption encoder.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::nn::{attention, Bound, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
}

struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

pub struct TransformerEncoder {
    cfg: TransformerConfig,
    token_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

/// A padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    /// `[batch, len]`, false at padding.
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Pads to the longest sequence; an empty sequence becomes one pad token
    /// that is attended to like a real token.
    pub fn new(seqs: &[&[u16]], cfg: &TransformerConfig) -> Result<Self> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        if len > cfg.max_tokens {
            return Err(Error::param(format!(
                "sequence of {len} tokens exceeds the maximum {}",
                cfg.max_tokens
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for i in 0..len {
                match s.get(i) {
                    Some(&id) => {
                        if id as usize >= cfg.vocab_size {
                            return Err(Error::Vocabulary {
                                id: id as usize,
                                size: cfg.vocab_size,
                            });
                        }
                        ids.push(id as usize);
                        valid.push(true);
                    }
                    None => {
                        ids.push(PAD as usize);
                        valid.push(s.is_empty() && i == 0);
                    }
                }
            }
        }
        Ok(Self {
            ids,
            valid,
            batch: seqs.len(),
            len,
        })
    }
}

impl TransformerEncoder {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &TransformerConfig) -> Self {
        let d = cfg.dim;
        let token_emb = b.normal("token_emb", &[cfg.vocab_size, d], 0.5);
        let pos_emb = b.normal("pos_emb", &[cfg.max_tokens, d], 0.5);
        let blocks = (0..cfg.layers)
            .map(|i| {
                b.scope(&format!("block{i}"), |b| Block {
                    ln1: LayerNorm::new(b, "ln1", d),
                    qkv: Linear::new(b, "qkv", d, 3 * d, true),
                    proj: Linear::new(b, "proj", d, d, true),
                    ln2: LayerNorm::new(b, "ln2", d),
                    ff1: Linear::new(b, "ff1", d, cfg.ff_mult * d, true),
                    ff2: Linear::new(b, "ff2", cfg.ff_mult * d, d, true),
                })
            })
            .collect();
        let ln_out = LayerNorm::new(b, "ln_out", d);
        Self {
            cfg: cfg.clone(),
            token_emb,
            pos_emb,
            blocks,
            ln_out,
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Token embeddings `[B, L, D]` and their masked mean `[B, D]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: &TokenBatch) -> (Var<'t, T>, Var<'t, T>) {
        let (b, l, d) = (tokens.batch, tokens.len, self.cfg.dim);
        let pos = p.var(self.pos_emb).take_rows(l);
        let mut x = p
            .var(self.token_emb)
            .gather_rows(&tokens.ids)
            .reshape(&[b, l, d])
            .add_tiled(&pos);
        for blk in &self.blocks {
            let h = blk.ln1.forward(p, &x);
            let qkv = blk.qkv.forward(p, &h).reshape(&[b, l, 3, d]).permute(&[2, 0, 1, 3]);
            let (q, k, v) = (qkv.narrow(0, 1), qkv.narrow(1, 1), qkv.narrow(2, 1));
            let (q, k, v) = (q.reshape(&[b, l, d]), k.reshape(&[b, l, d]), v.reshape(&[b, l, d]));
            let a = attention(&q, &k, &v, self.cfg.heads, Some(&tokens.valid));
            x = x.add(&blk.proj.forward(p, &a));
            let h = blk.ln2.forward(p, &x);
            let h = blk.ff2.forward(p, &blk.ff1.forward(p, &h).silu());
            x = x.add(&h);
        }
        let x = self.ln_out.forward(p, &x);
        let pooled = x.masked_mean_tokens(&tokens.valid);
        (x, pooled)
    }
}
