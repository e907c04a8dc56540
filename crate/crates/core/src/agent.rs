//! The decision makers an episode consults: the trained network, and
//! gold-reading and random stand-ins used for plumbing tests.

use rand::Rng;

use cfqa_tensor::init::{seeded, SeededRng};
use cfqa_tensor::{Graph, Scalar, Var};

use crate::config::ModelConfig;
use crate::error::{CfqaError, Result};
use crate::model::answer::{answer_log_probs, decode_span, SpanPrediction};
use crate::model::encoder::{encode_tokens, Encoded};
use crate::model::policy::{
    actor_critic_loss, actor_logits, critic_value, run_gru, state_sequence, sum_terms, ActionId, FixedTargets,
    StepTerms, N_ACTIONS,
};
use crate::model::selector::sentence_scores;
use crate::text::{QAExample, Token, TokenDoc};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyOut {
    /// Action probabilities; masked actions are exactly zero.
    pub probs: [f64; N_ACTIONS],
    pub value: f64,
}

/// The modules an episode dispatches to, plus the controller.
pub trait Agent {
    fn begin(&mut self, ex: &QAExample) -> Result<()>;
    /// Evaluate the controller on the current context.
    fn policy(&mut self, ctx: &TokenDoc, mask: &[bool; N_ACTIONS]) -> Result<PolicyOut>;
    /// Record the action taken at this step. `scored` is false for forced or
    /// substituted actions, which receive no policy gradient. Returns
    /// `log π(action)` (zero when unscored).
    fn commit(&mut self, action: ActionId, scored: bool) -> Result<f64>;
    /// Sentence distribution over `ctx`; `gold_sentences` lists the sentences
    /// holding a gold answer (for optional supervision).
    fn select(&mut self, ctx: &TokenDoc, gold_sentences: &[usize]) -> Result<Vec<f64>>;
    /// The sentences actually kept after a `select`.
    fn narrowed(&mut self, chosen: &[usize]) -> Result<()>;
    /// Span prediction over the flattened `ctx`; `gold` is the first gold
    /// occurrence, if any.
    fn span(&mut self, ctx: &TokenDoc, gold: Option<(usize, usize)>) -> Result<SpanPrediction>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentOptions {
    pub span_loss: bool,
    pub selector_supervised: bool,
    pub entropy_coef: f64,
    pub max_state_tokens: usize,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self {
            span_loss: true,
            selector_supervised: false,
            entropy_coef: 0.0,
            max_state_tokens: 512,
        }
    }
}

struct Pending {
    logits: Var,
    log_probs: Var,
    mask: [bool; N_ACTIONS],
    value: Var,
}

/// The network-backed agent. Records everything onto one graph so the
/// whole episode is differentiated at once.
pub struct NeuralAgent<'g, 'p, T: Scalar> {
    g: &'g mut Graph<'p, T>,
    cfg: &'g ModelConfig,
    opts: AgentOptions,
    question: Option<Encoded>,
    cached: Option<(TokenDoc, Encoded)>,
    pending: Option<Pending>,
    selection: Option<Var>,
    last_scored: bool,
    steps: Vec<StepTerms>,
    span_terms: Vec<Var>,
    selector_terms: Vec<Var>,
    entropy_terms: Vec<Var>,
    states: Vec<Var>,
}

/// The scalar losses of one episode.
pub struct EpisodeLoss {
    pub total: Var,
    pub actor: f64,
    pub critic: f64,
    pub span: f64,
    pub deltas: Vec<f64>,
    pub targets: Vec<f64>,
}

impl<'g, 'p, T: Scalar> NeuralAgent<'g, 'p, T> {
    pub fn new(g: &'g mut Graph<'p, T>, cfg: &'g ModelConfig, opts: AgentOptions) -> Self {
        Self {
            g,
            cfg,
            opts,
            question: None,
            cached: None,
            pending: None,
            selection: None,
            last_scored: false,
            steps: Vec::new(),
            span_terms: Vec::new(),
            selector_terms: Vec::new(),
            entropy_terms: Vec::new(),
            states: Vec::new(),
        }
    }

    pub fn graph(&self) -> &Graph<'p, T> {
        self.g
    }

    /// The state sequence fed to the recurrent networks at each step.
    pub fn state_sequences(&self) -> &[Var] {
        &self.states
    }

    pub fn question(&self) -> Option<&Encoded> {
        self.question.as_ref()
    }

    fn question_enc(&self) -> Result<Encoded> {
        self.question
            .clone()
            .ok_or_else(|| CfqaError::Input("episode has not begun".into()))
    }

    fn encode_ctx(&mut self, ctx: &TokenDoc) -> Result<Encoded> {
        if let Some((c, e)) = &self.cached {
            if c == ctx {
                return Ok(e.clone());
            }
        }
        let tokens: Vec<Token> = ctx.tokens().cloned().collect();
        let enc = encode_tokens(self.g, &tokens, self.cfg, "enc")?;
        self.cached = Some((ctx.clone(), enc.clone()));
        Ok(enc)
    }

    fn exp_row(&self, v: Var) -> Vec<f64> {
        self.g.value(v).data().iter().map(|x| x.as_f64().exp()).collect()
    }

    /// Assemble the episode loss from the per-step rewards (one per
    /// committed step). `fixed` pins advantages and critic targets.
    pub fn finish(self, rewards: &[f64], gamma: f64, fixed: Option<&FixedTargets>) -> Result<EpisodeLoss> {
        let Self {
            g,
            mut steps,
            span_terms,
            selector_terms,
            entropy_terms,
            opts,
            ..
        } = self;
        if rewards.len() != steps.len() {
            return Err(CfqaError::Input(format!(
                "{} rewards for {} recorded steps",
                rewards.len(),
                steps.len()
            )));
        }
        for (s, &r) in steps.iter_mut().zip(rewards) {
            s.reward = r;
        }
        let ac = actor_critic_loss(g, &steps, gamma, fixed)?;
        let span = sum_terms(g, span_terms)?;
        let sel = sum_terms(g, selector_terms)?;
        let mut total = g.add(ac.actor, ac.critic)?;
        total = g.add(total, span)?;
        total = g.add(total, sel)?;
        if opts.entropy_coef != 0.0 && !entropy_terms.is_empty() {
            let h = sum_terms(g, entropy_terms)?;
            let bonus = g.scale(h, T::of(-opts.entropy_coef));
            total = g.add(total, bonus)?;
        }
        let item = |v: Var| g.value(v).item().as_f64();
        Ok(EpisodeLoss {
            total,
            actor: item(ac.actor),
            critic: item(ac.critic),
            span: item(span),
            deltas: ac.deltas,
            targets: ac.targets,
        })
    }
}

impl<T: Scalar> Agent for NeuralAgent<'_, '_, T> {
    fn begin(&mut self, ex: &QAExample) -> Result<()> {
        let prefix = if self.cfg.share_question_encoder { "enc" } else { "qenc" };
        self.question = Some(encode_tokens(self.g, &ex.question, self.cfg, prefix)?);
        Ok(())
    }

    fn policy(&mut self, ctx: &TokenDoc, mask: &[bool; N_ACTIONS]) -> Result<PolicyOut> {
        let q = self.question_enc()?;
        let enc = self.encode_ctx(ctx)?;
        let g = &mut *self.g;
        let seq = state_sequence(g, enc.rows, q.rows, self.opts.max_state_tokens)?;
        self.states.push(seq);
        let ha = run_gru(g, seq, "actor")?;
        let hc = run_gru(g, seq, "critic")?;
        let logits = actor_logits(g, ha)?;
        let log_probs = g.log_softmax_rows(logits, Some(mask))?;
        let value = critic_value(g, hc)?;
        let probs = self.exp_row(log_probs);
        let out = PolicyOut {
            probs: [probs[0], probs[1], probs[2]],
            value: self.g.value(value).item().as_f64(),
        };
        self.pending = Some(Pending {
            logits,
            log_probs,
            mask: *mask,
            value,
        });
        Ok(out)
    }

    fn commit(&mut self, action: ActionId, scored: bool) -> Result<f64> {
        let p = self
            .pending
            .take()
            .ok_or_else(|| CfqaError::Input("commit without a policy evaluation".into()))?;
        let g = &mut *self.g;
        let log_prob = if scored {
            let lp = g.pick(p.log_probs, action.index())?;
            if self.opts.entropy_coef != 0.0 {
                let probs = g.softmax_rows(p.logits, Some(&p.mask))?;
                let plogp = g.mul(probs, p.log_probs)?;
                let s = g.sum(plogp);
                self.entropy_terms.push(g.neg(s));
            }
            Some(lp)
        } else {
            None
        };
        self.last_scored = scored;
        let lp_value = log_prob.map_or(0.0, |v| g.value(v).item().as_f64());
        self.steps.push(StepTerms {
            log_prob,
            value: p.value,
            reward: 0.0,
        });
        Ok(lp_value)
    }

    fn select(&mut self, ctx: &TokenDoc, gold_sentences: &[usize]) -> Result<Vec<f64>> {
        let q = self.question_enc()?;
        let enc = self.encode_ctx(ctx)?;
        let g = &mut *self.g;
        let scores = sentence_scores(g, &q, &enc, ctx)?;
        let log_probs = g.log_softmax_rows(scores, None)?;
        if self.opts.selector_supervised {
            if let Some(&gold) = gold_sentences.first() {
                let lp = g.pick(log_probs, gold)?;
                self.selector_terms.push(g.neg(lp));
            }
        }
        self.selection = Some(log_probs);
        Ok(self.exp_row(log_probs))
    }

    fn narrowed(&mut self, chosen: &[usize]) -> Result<()> {
        let sel = self
            .selection
            .take()
            .ok_or_else(|| CfqaError::Input("narrowing without a sentence distribution".into()))?;
        if !self.last_scored {
            return Ok(());
        }
        let g = &mut *self.g;
        let step = self.steps.last_mut().expect("a committed step");
        let mut lp = step.log_prob.expect("scored step has a log-probability");
        for &i in chosen {
            let t = g.pick(sel, i)?;
            lp = g.add(lp, t)?;
        }
        step.log_prob = Some(lp);
        Ok(())
    }

    fn span(&mut self, ctx: &TokenDoc, gold: Option<(usize, usize)>) -> Result<SpanPrediction> {
        let q = self.question_enc()?;
        let enc = self.encode_ctx(ctx)?;
        let (ls, le) = answer_log_probs(self.g, &q, &enc, self.cfg)?;
        if let (true, Some((s, e))) = (self.opts.span_loss, gold) {
            let g = &mut *self.g;
            let a = g.pick(ls, s)?;
            let b = g.pick(le, e)?;
            let ll = g.add(a, b)?;
            self.span_terms.push(g.neg(ll));
        }
        let (ps, pe) = (self.exp_row(ls), self.exp_row(le));
        Ok(decode_span(ps, pe, self.cfg.max_span_len, self.cfg.decode))
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn uniform_policy(mask: &[bool; N_ACTIONS]) -> PolicyOut {
    let live = mask.iter().filter(|m| !**m).count().max(1) as f64;
    PolicyOut {
        probs: mask.map(|m| if m { 0.0 } else { 1.0 / live }),
        value: 0.0,
    }
}

/// Reads the gold answer: selects the gold sentences and extracts the gold
/// span whenever it is present.
#[derive(Default)]
pub struct OracleAgent;

impl Agent for OracleAgent {
    fn begin(&mut self, _ex: &QAExample) -> Result<()> {
        Ok(())
    }

    fn policy(&mut self, _ctx: &TokenDoc, mask: &[bool; N_ACTIONS]) -> Result<PolicyOut> {
        Ok(uniform_policy(mask))
    }

    fn commit(&mut self, _action: ActionId, _scored: bool) -> Result<f64> {
        Ok(0.0)
    }

    fn select(&mut self, ctx: &TokenDoc, gold_sentences: &[usize]) -> Result<Vec<f64>> {
        let n = ctx.n_sentences();
        let mut p = vec![1.0; n];
        for &i in gold_sentences {
            p[i] = 1e6;
        }
        let z: f64 = p.iter().sum();
        Ok(p.into_iter().map(|x| x / z).collect())
    }

    fn narrowed(&mut self, _chosen: &[usize]) -> Result<()> {
        Ok(())
    }

    fn span(&mut self, ctx: &TokenDoc, gold: Option<(usize, usize)>) -> Result<SpanPrediction> {
        let n = ctx.n_tokens();
        let (s, e) = gold.unwrap_or((0, 0));
        Ok(decode_span(one_hot(n, s), one_hot(n, e), usize::MAX, crate::config::DecodeMode::Independent))
    }
}

/// Random sentence distributions and random valid spans.
pub struct RandomAgent {
    rng: SeededRng,
    max_span_len: usize,
}

impl RandomAgent {
    pub fn new(seed: u64, max_span_len: usize) -> Self {
        Self {
            rng: seeded(seed),
            max_span_len,
        }
    }
}

impl Agent for RandomAgent {
    fn begin(&mut self, _ex: &QAExample) -> Result<()> {
        Ok(())
    }

    fn policy(&mut self, _ctx: &TokenDoc, mask: &[bool; N_ACTIONS]) -> Result<PolicyOut> {
        Ok(uniform_policy(mask))
    }

    fn commit(&mut self, _action: ActionId, _scored: bool) -> Result<f64> {
        Ok(0.0)
    }

    fn select(&mut self, ctx: &TokenDoc, _gold: &[usize]) -> Result<Vec<f64>> {
        let p: Vec<f64> = (0..ctx.n_sentences()).map(|_| self.rng.gen::<f64>() + 1e-9).collect();
        let z: f64 = p.iter().sum();
        Ok(p.into_iter().map(|x| x / z).collect())
    }

    fn narrowed(&mut self, _chosen: &[usize]) -> Result<()> {
        Ok(())
    }

    fn span(&mut self, ctx: &TokenDoc, _gold: Option<(usize, usize)>) -> Result<SpanPrediction> {
        let n = ctx.n_tokens();
        let s = self.rng.gen_range(0..n);
        let e = self.rng.gen_range(s..n.min(s + self.max_span_len));
        Ok(decode_span(one_hot(n, s), one_hot(n, e), self.max_span_len, crate::config::DecodeMode::Constrained))
    }
}
