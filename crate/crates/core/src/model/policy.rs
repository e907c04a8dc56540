//! Actor and critic recurrent networks over the state sequence, and the
//! temporal-difference losses that train them.

use cfqa_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CfqaError, Result};

pub const N_ACTIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionId {
    Answer,
    Narrow,
    Excise,
}

impl ActionId {
    pub const ALL: [ActionId; N_ACTIONS] = [ActionId::Answer, ActionId::Narrow, ActionId::Excise];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn code(self) -> &'static str {
        match self {
            ActionId::Answer => "a1",
            ActionId::Narrow => "a2",
            ActionId::Excise => "a3",
        }
    }
}

/// Context rows, a separator row, then question rows. Contexts longer than
/// `max_ctx` keep their first and last halves.
pub fn state_sequence<T: Scalar>(g: &mut Graph<'_, T>, ctx_rows: Var, q_rows: Var, max_ctx: usize) -> Result<Var> {
    let n = g.value(ctx_rows).rows();
    let sep = g.param("state.sep")?;
    let mut parts = Vec::with_capacity(4);
    if n > max_ctx {
        let head = max_ctx.div_ceil(2);
        let tail = max_ctx - head;
        parts.push(g.slice_rows(ctx_rows, 0, head)?);
        if tail > 0 {
            parts.push(g.slice_rows(ctx_rows, n - tail, tail)?);
        }
    } else {
        parts.push(ctx_rows);
    }
    parts.push(sep);
    parts.push(q_rows);
    Ok(g.concat_rows(&parts)?)
}

/// Run the `{prefix}.gru` cell over the rows of `seq` from a zero state and
/// return the final hidden state `[1 × hidden]`.
pub fn run_gru<T: Scalar>(g: &mut Graph<'_, T>, seq: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.gru.w"))?;
    let u = g.param(&format!("{prefix}.gru.u"))?;
    let b = g.param(&format!("{prefix}.gru.b"))?;
    let hidden = g.value(u).rows();
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    for t in 0..g.value(seq).rows() {
        let x = g.slice_rows(seq, t, 1)?;
        h = g.gru_step(h, x, w, u, b)?;
    }
    Ok(h)
}

/// Unnormalized action scores `[1 × 3]`.
pub fn actor_logits<T: Scalar>(g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
    let w = g.param("actor.head.w")?;
    let b = g.param("actor.head.b")?;
    let logits = g.matmul(h, w)?;
    Ok(g.add_broadcast(logits, b)?)
}

/// Action log-probabilities `[1 × 3]`; `mask[a]` true removes action `a`.
pub fn actor_log_probs<T: Scalar>(g: &mut Graph<'_, T>, h: Var, mask: &[bool; N_ACTIONS]) -> Result<Var> {
    let logits = actor_logits(g, h)?;
    Ok(g.log_softmax_rows(logits, Some(mask))?)
}

/// Scalar state value `[1 × 1]`.
pub fn critic_value<T: Scalar>(g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
    let w = g.param("critic.head.w")?;
    let b = g.param("critic.head.b")?;
    let v = g.matmul(h, w)?;
    Ok(g.add_broadcast(v, b)?)
}

/// The quantities one step contributes to the losses.
#[derive(Clone, Debug)]
pub struct StepTerms {
    /// `log π(a|s)` (plus any log-probability of the module's own choice);
    /// `None` for forced steps, which carry no policy gradient.
    pub log_prob: Option<Var>,
    pub value: Var,
    pub reward: f64,
}

/// Advantages and bootstrap targets held fixed, e.g. for finite-difference
/// checks where they must not move with the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedTargets {
    pub deltas: Vec<f64>,
    pub targets: Vec<f64>,
}

pub struct AcLosses {
    pub actor: Var,
    pub critic: Var,
    pub deltas: Vec<f64>,
    pub targets: Vec<f64>,
}

/// `δₜ = rₜ + γ·vₜ₊₁ − vₜ` with `vₜ₊₁ = 0` after the last step.
///
/// Actor loss `Σ −log π(aₜ|sₜ)·δₜ` treats δ as a constant; critic loss
/// `Σ (rₜ + γ·vₜ₊₁ − vₜ)²` regresses `vₜ` onto a target in which `vₜ₊₁` is
/// also constant.
pub fn actor_critic_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    steps: &[StepTerms],
    gamma: f64,
    fixed: Option<&FixedTargets>,
) -> Result<AcLosses> {
    if steps.is_empty() {
        return Err(CfqaError::Input("actor-critic loss of an empty trajectory".into()));
    }
    let values: Vec<f64> = steps.iter().map(|s| g.value(s.value).item().as_f64()).collect();
    let (deltas, targets) = match fixed {
        Some(f) => (f.deltas.clone(), f.targets.clone()),
        None => {
            let targets: Vec<f64> = (0..steps.len())
                .map(|t| steps[t].reward + gamma * values.get(t + 1).copied().unwrap_or(0.0))
                .collect();
            let deltas = targets.iter().zip(&values).map(|(y, v)| y - v).collect();
            (deltas, targets)
        }
    };
    let mut actor_terms = Vec::new();
    let mut critic_terms = Vec::new();
    for (t, s) in steps.iter().enumerate() {
        if let Some(lp) = s.log_prob {
            actor_terms.push(g.scale(lp, T::of(-deltas[t])));
        }
        let y = g.constant(Tensor::scalar(T::of(targets[t])).reshape(&[1, 1])?);
        let diff = g.sub(s.value, y)?;
        let sq = g.mul(diff, diff)?;
        critic_terms.push(g.sum(sq));
    }
    let actor = sum_terms(g, actor_terms)?;
    let critic = sum_terms(g, critic_terms)?;
    Ok(AcLosses {
        actor,
        critic,
        deltas,
        targets,
    })
}

/// Sum of scalar terms, or a zero constant when there are none.
pub fn sum_terms<T: Scalar>(g: &mut Graph<'_, T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
