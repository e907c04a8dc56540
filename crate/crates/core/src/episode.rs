//! The answer / narrow / excise loop over one question.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::config::{RewardMode, RunConfig};
use crate::error::{CfqaError, Result};
use crate::metrics::{score_answer, EpisodeSummary};
use crate::model::policy::{ActionId, N_ACTIONS};
use crate::model::selector::select_top_k;
use crate::subcontext::excise_span;
use crate::text::{QAExample, TokenDoc};

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub k_initial: usize,
    pub step_cap: usize,
    pub reward_mode: RewardMode,
    pub enable_excise: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            k_initial: 5,
            step_cap: 5,
            reward_mode: RewardMode::SingleFinal,
            enable_excise: true,
        }
    }
}

impl From<&RunConfig> for EpisodeConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            k_initial: c.k_initial,
            step_cap: c.step_cap,
            reward_mode: c.reward_mode,
            enable_excise: c.enable_excise,
        }
    }
}

/// How the action is picked from the controller's probabilities.
#[derive(Clone, Debug, PartialEq)]
pub enum Chooser {
    /// Draw from the distribution (training).
    Sample,
    /// Most probable action, lower index on ties (evaluation).
    Argmax,
    /// Always the same action, answering when it is unavailable.
    Pinned(ActionId),
    /// Any of the three actions uniformly, ignoring availability.
    Uniform,
    /// Fixed sequence; answers once it runs out.
    Script(Vec<ActionId>),
}

impl Chooser {
    fn choose(&self, probs: &[f64; N_ACTIONS], step: usize, rng: &mut impl Rng) -> ActionId {
        match self {
            Chooser::Sample => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut last_live = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        last_live = i;
                        acc += p;
                        if u < acc {
                            return ActionId::from_index(i);
                        }
                    }
                }
                ActionId::from_index(last_live)
            }
            Chooser::Argmax => {
                let mut best = 0;
                for i in 1..N_ACTIONS {
                    if probs[i] > probs[best] {
                        best = i;
                    }
                }
                ActionId::from_index(best)
            }
            Chooser::Pinned(a) => *a,
            Chooser::Uniform => ActionId::from_index(rng.gen_range(0..N_ACTIONS)),
            Chooser::Script(s) => s.get(step).copied().unwrap_or(ActionId::Answer),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub action: ActionId,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub next_value: f64,
    /// Forced or substituted: the policy did not choose it.
    pub forced: bool,
}

/// Per-step record for the trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub action: ActionId,
    pub ctx_tokens: usize,
    pub ctx_sentences: usize,
    pub reward: f64,
    /// Flat inclusive span predicted at this step, if any.
    pub span: Option<(usize, usize)>,
    /// Sentences kept by a narrowing step.
    pub selected: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub id: String,
    pub answer: Vec<String>,
    pub transitions: Vec<Transition>,
    pub steps: Vec<StepLog>,
    /// Context after every step's transition, starting with the document.
    pub contexts: Vec<TokenDoc>,
    pub forced: bool,
    pub em: bool,
    pub f1: f64,
}

impl EpisodeResult {
    pub fn n_steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            id: self.id.clone(),
            em: if self.em { 1.0 } else { 0.0 },
            f1: self.f1,
            n_steps: self.n_steps(),
            actions: self
                .transitions
                .iter()
                .map(|t| t.action.code())
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Trajectory log line.
#[derive(Serialize)]
pub struct TrajectoryRecord<'a> {
    pub id: &'a str,
    pub steps: &'a [StepLog],
    pub answer: &'a [String],
    pub em: bool,
    pub f1: f64,
}

impl EpisodeResult {
    pub fn record(&self) -> TrajectoryRecord<'_> {
        TrajectoryRecord {
            id: &self.id,
            steps: &self.steps,
            answer: &self.answer,
            em: self.em,
            f1: self.f1,
        }
    }
}

/// Sentences of `ctx` that hold a gold answer entirely.
fn gold_sentences(ex: &QAExample, ctx: &TokenDoc) -> Vec<usize> {
    ctx.sentences()
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let words: Vec<&str> = s.iter().map(|t| ex.word(t)).collect();
            ex.answers
                .iter()
                .any(|a| crate::text::find_subsequence(&words, a).is_some())
        })
        .map(|(i, _)| i)
        .collect()
}

fn containment(ex: &QAExample, ctx: &TokenDoc) -> f64 {
    if ex.contains_answer(ctx) {
        1.0
    } else {
        0.0
    }
}

/// Run one episode. The loop allows `step_cap` free steps; at step
/// `step_cap` only answering is available, so an episode has at most
/// `step_cap + 1` steps and always ends by answering.
pub fn run_episode<A: Agent + ?Sized>(
    agent: &mut A,
    ex: &QAExample,
    cfg: &EpisodeConfig,
    chooser: &Chooser,
    rng: &mut impl Rng,
) -> Result<EpisodeResult> {
    agent.begin(ex)?;
    let mut ctx = ex.doc.clone();
    let mut k = cfg.k_initial.max(1);
    let mut transitions: Vec<Transition> = Vec::new();
    let mut steps = Vec::new();
    let mut contexts = vec![ctx.clone()];
    let shaped = cfg.reward_mode == RewardMode::Shaped;
    let mut answer = None;

    for step in 0..=cfg.step_cap {
        let at_cap = step == cfg.step_cap;
        let mask = [
            false,
            at_cap || ctx.n_sentences() <= 1,
            at_cap || !cfg.enable_excise || ctx.n_tokens() <= 1,
        ];
        let out = agent.policy(&ctx, &mask)?;
        let picked = chooser.choose(&out.probs, step, rng);
        let (mut action, mut forced) = if mask[picked.index()] {
            (ActionId::Answer, true)
        } else {
            (picked, false)
        };
        let ctx_tokens = ctx.n_tokens();
        let ctx_sentences = ctx.n_sentences();
        let mut log = StepLog {
            action,
            ctx_tokens,
            ctx_sentences,
            reward: 0.0,
            span: None,
            selected: None,
        };
        let mut reward = 0.0;
        let mut next_ctx = None;

        match action {
            ActionId::Answer => {}
            ActionId::Narrow => {
                let log_prob = agent.commit(action, !forced)?;
                let probs = agent.select(&ctx, &gold_sentences(ex, &ctx))?;
                let chosen = select_top_k(&probs, k);
                agent.narrowed(&chosen)?;
                let narrowed = ctx.subset(&chosen)?;
                if shaped {
                    reward = containment(ex, &narrowed);
                }
                k = k.saturating_sub(1).max(1);
                log.selected = Some(chosen);
                next_ctx = Some((narrowed, log_prob));
            }
            ActionId::Excise => {
                let span = agent.span(&ctx, ex.gold_span(&ctx))?;
                log.span = Some((span.start, span.end));
                match excise_span(&ctx, span.start, span.end) {
                    Ok((rest, _)) => {
                        let log_prob = agent.commit(action, !forced)?;
                        if shaped {
                            reward = containment(ex, &rest);
                        }
                        next_ctx = Some((rest, log_prob));
                    }
                    Err(CfqaError::ExcisionRefused) => {
                        // answer with the span that would have emptied the context
                        action = ActionId::Answer;
                        forced = true;
                        log.action = action;
                        agent.commit(action, false)?;
                        answer = Some(span);
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        if let Some(prev) = transitions.last_mut() {
            prev.next_value = out.value;
        }

        if action == ActionId::Answer {
            let log_prob = if answer.is_none() {
                let lp = agent.commit(action, !(forced || at_cap))?;
                let span = agent.span(&ctx, ex.gold_span(&ctx))?;
                log.span = Some((span.start, span.end));
                answer = Some(span);
                lp
            } else {
                0.0
            };
            let span = answer.as_ref().expect("answer span");
            let words: Vec<String> = ctx
                .tokens()
                .skip(span.start)
                .take(span.n_tokens())
                .map(|t| ex.word(t).to_string())
                .collect();
            let (em, f1) = score_answer(&words, &ex.answers);
            log.reward = f1;
            steps.push(log);
            transitions.push(Transition {
                action,
                log_prob,
                value: out.value,
                reward: f1,
                next_value: 0.0,
                forced: forced || at_cap,
            });
            return Ok(EpisodeResult {
                id: ex.id.clone(),
                answer: words,
                transitions,
                steps,
                contexts,
                forced: forced || at_cap,
                em,
                f1,
            });
        }

        let (new_ctx, log_prob) = next_ctx.expect("non-terminal step moves the context");
        log.reward = reward;
        steps.push(log);
        transitions.push(Transition {
            action,
            log_prob,
            value: out.value,
            reward,
            next_value: 0.0,
            forced,
        });
        ctx = new_ctx;
        contexts.push(ctx.clone());
    }
    unreachable!("the last step only allows answering")
}
