//! Sentence scoring and top-K narrowing.

use cfqa_tensor::{Graph, Scalar, Var};

use crate::error::{CfqaError, Result};
use crate::model::encoder::Encoded;
use crate::text::TokenDoc;

/// Unnormalized score of every sentence, `[1 × N]`.
///
/// Each sentence's encoded rows are appended to the question's rows; one
/// convolution with ReLU, a max over positions and a linear map give the
/// score.
pub fn sentence_scores<T: Scalar>(g: &mut Graph<'_, T>, question: &Encoded, ctx_enc: &Encoded, ctx: &TokenDoc) -> Result<Var> {
    if ctx.n_sentences() == 0 {
        return Err(CfqaError::Input("cannot score an empty context".into()));
    }
    let w = g.param("sel.conv.w")?;
    let b = g.param("sel.conv.b")?;
    let out = g.param("sel.out.w")?;
    let mut scores = Vec::with_capacity(ctx.n_sentences());
    for (off, s) in ctx.sentence_offsets().into_iter().zip(ctx.sentences()) {
        let rows = g.slice_rows(ctx_enc.rows, off, s.len())?;
        let x = g.concat_rows(&[question.rows, rows])?;
        let c = g.conv1d(x, w)?;
        let c = g.add_broadcast(c, b)?;
        let c = g.relu(c);
        let pooled = g.max_rows(c);
        scores.push(g.matmul(pooled, out)?);
    }
    Ok(if scores.len() == 1 { scores[0] } else { g.concat_cols(&scores)? })
}

/// Indices of the `min(k, N)` most probable sentences, in document order.
/// Equal probabilities favor the lower index.
pub fn select_top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k.min(probs.len())).collect();
    top.sort_unstable();
    top
}
