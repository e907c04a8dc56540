//! Input embeddings and the conv → self-attention → feed-forward block.

use cfqa_tensor::{Graph, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::text::vocab::{CHAR_PAD, PAD};
use crate::text::Token;

/// An encoded sequence. `mask[i]` is true for padding positions, which no
/// query attends to.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub rows: Var,
    pub mask: Vec<bool>,
    /// Per-head attention weights of the block, `[len × len]` each.
    pub attention: Vec<Var>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn key_mask(&self) -> Option<&[bool]> {
        self.mask.iter().any(|&m| m).then_some(self.mask.as_slice())
    }
}

/// Word embedding concatenated with the column-wise maximum over the
/// token's character embeddings (padding characters excluded).
pub fn embed_tokens<T: Scalar>(g: &mut Graph<'_, T>, tokens: &[Token]) -> Result<Var> {
    let words = g.param("emb.word")?;
    let chars = g.param("emb.char")?;
    let ids: Vec<usize> = tokens.iter().map(|t| t.id).collect();
    let groups: Vec<Vec<usize>> = tokens
        .iter()
        .map(|t| {
            let live: Vec<usize> = t.chars.iter().copied().filter(|&c| c != CHAR_PAD).collect();
            if live.is_empty() {
                vec![CHAR_PAD]
            } else {
                live
            }
        })
        .collect();
    let xw = g.select_rows(words, &ids)?;
    let xc = g.gather_max(chars, &groups)?;
    Ok(g.concat_cols(&[xw, xc])?)
}

pub fn sinusoid_table<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            data.push(T::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[len, d], data).expect("positive extents")
}

/// Multi-head scaled dot-product self-attention; returns the projected
/// output and each head's weight matrix.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    key_mask: Option<&[bool]>,
    n_heads: usize,
    prefix: &str,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(x).cols();
    let dk = d / n_heads;
    let wq = g.param(&format!("{prefix}.wq"))?;
    let wk = g.param(&format!("{prefix}.wk"))?;
    let wv = g.param(&format!("{prefix}.wv"))?;
    let wo = g.param(&format!("{prefix}.wo"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores, key_mask)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((g.matmul(cat, wo)?, weights))
}

fn sublayer<T: Scalar>(g: &mut Graph<'_, T>, x: Var, out: Var, residual: bool) -> Result<Var> {
    Ok(if residual { g.add(x, out)? } else { out })
}

/// One encoder block: each of conv, self-attention and feed-forward reads a
/// layer-normalized input and, with residuals on, adds back onto its input.
pub fn block<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    key_mask: Option<&[bool]>,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<(Var, Vec<Var>)> {
    let p = |g: &mut Graph<'_, T>, n: &str| g.param(&format!("{prefix}.{n}"));

    let (g1, b1) = (p(g, "ln1.g")?, p(g, "ln1.b")?);
    let h = g.layer_norm(x, g1, b1)?;
    let (cw, cb) = (p(g, "conv.w")?, p(g, "conv.b")?);
    let c = g.conv1d(h, cw)?;
    let c = g.add_broadcast(c, cb)?;
    let c = g.relu(c);
    let x = sublayer(g, x, c, cfg.use_residual)?;

    let (g2, b2) = (p(g, "ln2.g")?, p(g, "ln2.b")?);
    let h = g.layer_norm(x, g2, b2)?;
    let (a, weights) = self_attention(g, h, key_mask, cfg.n_heads, &format!("{prefix}.attn"))?;
    let x = sublayer(g, x, a, cfg.use_residual)?;

    let (g3, b3) = (p(g, "ln3.g")?, p(g, "ln3.b")?);
    let h = g.layer_norm(x, g3, b3)?;
    let (w1, fb1) = (p(g, "ffn.w1")?, p(g, "ffn.b1")?);
    let (w2, fb2) = (p(g, "ffn.w2")?, p(g, "ffn.b2")?);
    let f = g.matmul(h, w1)?;
    let f = g.add_broadcast(f, fb1)?;
    let f = g.relu(f);
    let f = g.matmul(f, w2)?;
    let f = g.add_broadcast(f, fb2)?;
    let x = sublayer(g, x, f, cfg.use_residual)?;
    Ok((x, weights))
}

/// Project embeddings to `d_model`, add positions, and run one block.
pub fn encode_sequence<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    mask: Vec<bool>,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<Encoded> {
    let w = g.param(&format!("{prefix}.proj.w"))?;
    let b = g.param(&format!("{prefix}.proj.b"))?;
    let h = g.matmul(x, w)?;
    let mut h = g.add_broadcast(h, b)?;
    if cfg.use_positional {
        let pe = g.constant(sinusoid_table(mask.len(), cfg.d_model));
        h = g.add(h, pe)?;
    }
    let key_mask = mask.iter().any(|&m| m).then_some(mask.as_slice());
    let (rows, attention) = block(g, h, key_mask, cfg, &format!("{prefix}.block"))?;
    Ok(Encoded { rows, mask, attention })
}

/// Embed and encode a token sequence; PAD tokens are masked.
pub fn encode_tokens<T: Scalar>(
    g: &mut Graph<'_, T>,
    tokens: &[Token],
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<Encoded> {
    let x = embed_tokens(g, tokens)?;
    let mask = tokens.iter().map(|t| t.id == PAD).collect();
    encode_sequence(g, x, mask, cfg, prefix)
}
