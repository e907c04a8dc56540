//! Span extraction: trilinear context-query attention, three passes of a
//! shared block, and start/end distributions.

use cfqa_tensor::{Graph, Scalar, Var};

use crate::config::{DecodeMode, ModelConfig};
use crate::error::Result;
use crate::model::encoder::{block, Encoded};

/// `S[i,j] = w0 · [q_j, d_i, q_j ⊙ d_i]` for context rows `d` `[n×dm]` and
/// question rows `q` `[m×dm]`; `w0` is `[3dm × 1]`.
pub fn trilinear<T: Scalar>(g: &mut Graph<'_, T>, q: Var, d: Var, w0: Var) -> Result<Var> {
    let dm = g.value(d).cols();
    let wq = g.slice_rows(w0, 0, dm)?;
    let wd = g.slice_rows(w0, dm, dm)?;
    let wm = g.slice_rows(w0, 2 * dm, dm)?;
    let col = g.matmul(d, wd)?;
    let row = g.matmul(q, wq)?;
    let row = g.transpose(row);
    let wm_row = g.transpose(wm);
    let dw = g.mul_broadcast(d, wm_row)?;
    let qt = g.transpose(q);
    let s = g.matmul(dw, qt)?;
    let s = g.add_broadcast(s, col)?;
    Ok(g.add_broadcast(s, row)?)
}

/// Context-to-query `A = softmax_rows(S)·Q` and query-to-context
/// `B = softmax_rows(S)·softmax_cols(S)ᵀ·D`, both `[n × dm]`.
pub fn context_query_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    s: Var,
    q: &Encoded,
    d: &Encoded,
) -> Result<(Var, Var)> {
    let s_row = g.softmax_rows(s, q.key_mask())?;
    let a = g.matmul(s_row, q.rows)?;
    let st = g.transpose(s);
    // softmax over the context axis, already transposed: [m × n]
    let s_col_t = g.softmax_rows(st, d.key_mask())?;
    let mix = g.matmul(s_row, s_col_t)?;
    let b = g.matmul(mix, d.rows)?;
    Ok((a, b))
}

/// Fuse `[d, a, d⊙a, d⊙b]`, project to `d_model` and apply the shared block
/// three times, returning each pass's output.
pub fn model_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    d: &Encoded,
    a: Var,
    b: Var,
    cfg: &ModelConfig,
) -> Result<[Var; 3]> {
    let da = g.mul(d.rows, a)?;
    let db = g.mul(d.rows, b)?;
    let fused = g.concat_cols(&[d.rows, a, da, db])?;
    let w = g.param("ans.fuse.w")?;
    let bias = g.param("ans.fuse.b")?;
    let x = g.matmul(fused, w)?;
    let x = g.add_broadcast(x, bias)?;
    let mask = d.key_mask();
    let (e0, _) = block(g, x, mask, cfg, "ans.block")?;
    let (e1, _) = block(g, e0, mask, cfg, "ans.block")?;
    let (e2, _) = block(g, e1, mask, cfg, "ans.block")?;
    Ok([e0, e1, e2])
}

/// Log-probabilities of start and end positions, each `[1 × n]`:
/// start from `[E0; E1]`, end from `[E0; E2]`.
pub fn span_log_probs<T: Scalar>(g: &mut Graph<'_, T>, e: [Var; 3], mask: Option<&[bool]>) -> Result<(Var, Var)> {
    let head = |g: &mut Graph<'_, T>, other: Var, name: &str| -> Result<Var> {
        let w = g.param(name)?;
        let x = g.concat_cols(&[e[0], other])?;
        let logits = g.matmul(x, w)?;
        let logits = g.transpose(logits);
        Ok(g.log_softmax_rows(logits, mask)?)
    };
    let start = head(g, e[1], "ans.start.w")?;
    let end = head(g, e[2], "ans.end.w")?;
    Ok((start, end))
}

/// The full forward pass from encodings to start/end log-probabilities.
pub fn answer_log_probs<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: &Encoded,
    d: &Encoded,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let w0 = g.param("ans.w0")?;
    let s = trilinear(g, q.rows, d.rows, w0)?;
    let (a, b) = context_query_attention(g, s, q, d)?;
    let e = model_encode(g, d, a, b, cfg)?;
    span_log_probs(g, e, d.key_mask())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    pub score: f64,
}

impl SpanPrediction {
    pub fn n_tokens(&self) -> usize {
        self.end - self.start + 1
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Choose a span from start/end distributions over the same `n` positions.
pub fn decode_span(p_start: Vec<f64>, p_end: Vec<f64>, max_span_len: usize, mode: DecodeMode) -> SpanPrediction {
    let n = p_start.len();
    debug_assert_eq!(n, p_end.len());
    let (start, end) = match mode {
        DecodeMode::Independent => {
            let s = argmax(&p_start);
            let e = argmax(&p_end);
            if e < s { (s, s) } else { (s, e) }
        }
        DecodeMode::Constrained => {
            let mut best = (0, 0, f64::NEG_INFINITY);
            for i in 0..n {
                for j in i..n.min(i + max_span_len) {
                    let sc = p_start[i] * p_end[j];
                    if sc > best.2 {
                        best = (i, j, sc);
                    }
                }
            }
            (best.0, best.1)
        }
    };
    let score = p_start[start] * p_end[end];
    SpanPrediction {
        start,
        end,
        p_start,
        p_end,
        score,
    }
}
