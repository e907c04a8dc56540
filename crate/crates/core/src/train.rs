//! Batched actor-critic training and greedy evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;
use sha2::{Digest, Sha256};

use cfqa_tensor::checkpoint::{self, ConfigHash};
use cfqa_tensor::init::seeded;
use cfqa_tensor::{AdaDelta, GradBuffer, Graph, ParamStore, Scalar};

use crate::agent::{AgentOptions, NeuralAgent};
use crate::config::{ModelConfig, RunConfig};
use crate::episode::{run_episode, Chooser, EpisodeConfig, EpisodeResult};
use crate::error::{CfqaError, Result};
use crate::metrics::RunMetrics;
use crate::model::init_params;
use crate::model::policy::N_ACTIONS;
use crate::text::{QAExample, Vocab};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "config.txt";

/// Seed of one episode, a function of the run seed, the example and the
/// update so results do not depend on scheduling.
pub fn episode_seed(run_seed: u64, example_id: &str, update: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(update.to_le_bytes());
    h.update(example_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn optimizer(cfg: &RunConfig) -> AdaDelta {
    AdaDelta {
        rho: cfg.rho,
        eps: cfg.eps,
        lr: cfg.lr,
        group_lr: Vec::new(),
    }
    .with_group_lr("actor.gru.", cfg.gru_lr)
    .with_group_lr("critic.gru.", cfg.gru_lr)
}

pub fn agent_options(cfg: &RunConfig) -> AgentOptions {
    AgentOptions {
        span_loss: cfg.span_loss,
        selector_supervised: cfg.selector_supervised,
        entropy_coef: cfg.entropy_coef,
        max_state_tokens: cfg.max_state_tokens,
    }
}

/// One optimizer update, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateLog {
    pub step: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub span_loss: f64,
    pub mean_delta: f64,
    pub actions: [usize; N_ACTIONS],
    pub train_em: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<RunMetrics>,
}

pub struct Evaluation {
    pub results: Vec<EpisodeResult>,
    pub metrics: RunMetrics,
}

/// A model under training: configuration, vocabulary, weights and
/// optimizer state.
pub struct Session<T: Scalar> {
    pub cfg: RunConfig,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub updates_done: usize,
    opt: AdaDelta,
}

struct EpisodeOutcome<T: Scalar> {
    grads: GradBuffer<T>,
    actor: f64,
    critic: f64,
    span: f64,
    deltas: Vec<f64>,
    result: EpisodeResult,
}

impl<T: Scalar> Session<T> {
    pub fn new(cfg: RunConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model();
        let mut store = init_params(&model, vocab.n_words(), vocab.n_chars(), cfg.seed);
        if let Some(path) = &cfg.glove_path {
            crate::model::glove::load_glove(path, &vocab, &mut store)?;
            if cfg.freeze_word_embeddings {
                store.set_trainable("emb.word", false)?;
            }
        }
        Ok(Self {
            opt: optimizer(&cfg),
            cfg,
            model,
            vocab,
            store,
            updates_done: 0,
        })
    }

    /// Resume from saved weights; the config must hash identically unless
    /// `allow_mismatch`.
    pub fn from_parts(cfg: RunConfig, vocab: Vocab, store: ParamStore<T>, found: ConfigHash, allow_mismatch: bool) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model();
        let expected = model.hash(vocab.n_words(), vocab.n_chars());
        if expected != found && !allow_mismatch {
            return Err(CfqaError::HashMismatch {
                expected: hex::encode(expected),
                found: hex::encode(found),
            });
        }
        Ok(Self {
            opt: optimizer(&cfg),
            cfg,
            model,
            vocab,
            store,
            updates_done: 0,
        })
    }

    pub fn config_hash(&self) -> ConfigHash {
        self.model.hash(self.vocab.n_words(), self.vocab.n_chars())
    }

    fn run_one(&self, ex: &QAExample, update: u64) -> Result<EpisodeOutcome<T>> {
        let ecfg = EpisodeConfig::from(&self.cfg);
        let mut g = Graph::with_params(&self.store);
        let mut agent = NeuralAgent::new(&mut g, &self.model, agent_options(&self.cfg));
        let mut rng = seeded(episode_seed(self.cfg.seed, &ex.id, update));
        let result = run_episode(&mut agent, ex, &ecfg, &Chooser::Sample, &mut rng)?;
        let loss = agent.finish(&result.rewards(), self.cfg.gamma, None)?;
        let grads = g.backward(loss.total)?;
        let mut buf = GradBuffer::new();
        buf.accumulate(&g, &grads);
        Ok(EpisodeOutcome {
            grads: buf,
            actor: loss.actor,
            critic: loss.critic,
            span: loss.span,
            deltas: loss.deltas,
            result,
        })
    }

    fn run_batch(&self, batch: &[&QAExample], update: u64) -> Result<Vec<EpisodeOutcome<T>>> {
        let threads = self.cfg.threads.min(batch.len()).max(1);
        if threads == 1 {
            return batch.iter().map(|ex| self.run_one(ex, update)).collect();
        }
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|ex| self.run_one(ex, update)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("rollout thread panicked")?);
            }
            Ok(out)
        })
    }

    /// Roll out one sampled episode per example, average the gradients and
    /// apply one AdaDelta step. Per-episode gradients are summed in batch
    /// order, so the thread count does not change the result.
    pub fn update(&mut self, batch: &[&QAExample]) -> Result<UpdateLog> {
        if batch.is_empty() {
            return Err(CfqaError::Input("empty training batch".into()));
        }
        let update = self.updates_done as u64;
        let outcomes = self.run_batch(batch, update)?;
        let mut total = GradBuffer::new();
        let mut log = UpdateLog {
            step: self.updates_done + 1,
            actor_loss: 0.0,
            critic_loss: 0.0,
            span_loss: 0.0,
            mean_delta: 0.0,
            actions: [0; N_ACTIONS],
            train_em: 0.0,
            grad_norm: 0.0,
            eval: None,
        };
        let mut n_deltas = 0;
        for o in &outcomes {
            total.merge(&o.grads);
            log.actor_loss += o.actor;
            log.critic_loss += o.critic;
            log.span_loss += o.span;
            log.mean_delta += o.deltas.iter().sum::<f64>();
            n_deltas += o.deltas.len();
            for t in &o.result.transitions {
                log.actions[t.action.index()] += 1;
            }
            log.train_em += if o.result.em { 1.0 } else { 0.0 };
        }
        let n = outcomes.len() as f64;
        total.scale(T::of(1.0 / n));
        log.actor_loss /= n;
        log.critic_loss /= n;
        log.span_loss /= n;
        log.train_em /= n;
        log.mean_delta /= n_deltas.max(1) as f64;
        log.grad_norm = total.global_norm().as_f64();
        self.opt.step(&mut self.store, &total)?;
        self.updates_done += 1;
        Ok(log)
    }

    /// Greedy episodes over `examples`.
    pub fn evaluate(&self, examples: &[QAExample]) -> Result<Evaluation> {
        evaluate(&self.store, &self.model, &self.cfg, examples)
    }

    /// Train for `cfg.updates` updates over shuffled passes of `train`,
    /// evaluating on `eval` every `eval_every` updates and at the end.
    pub fn fit(
        &mut self,
        train: &[QAExample],
        eval: &[QAExample],
        mut on_log: impl FnMut(&UpdateLog) -> Result<()>,
    ) -> Result<Option<RunMetrics>> {
        if train.is_empty() && self.cfg.updates > 0 {
            return Err(CfqaError::Input("training set is empty".into()));
        }
        let mut rng = seeded(self.cfg.seed ^ 0x005E_ED0F_BA7C);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let bs = self.cfg.batch_size.min(train.len().max(1));
        for u in 0..self.cfg.updates {
            let mut batch = Vec::with_capacity(bs);
            while batch.len() < bs {
                if cursor == order.len() {
                    order = (0..train.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&train[order[cursor]]);
                cursor += 1;
            }
            let mut log = self.update(&batch)?;
            let last = u + 1 == self.cfg.updates;
            if !eval.is_empty() && self.cfg.eval_every > 0 && (u + 1) % self.cfg.eval_every == 0 && !last {
                log.eval = Some(self.evaluate(eval)?.metrics);
            }
            on_log(&log)?;
        }
        if eval.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.evaluate(eval)?.metrics))
    }

    /// Write weights, vocabulary and resolved config into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CfqaError::io(dir, e))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let bytes = checkpoint::to_bytes(&self.store, &self.config_hash());
        std::fs::write(&ckpt, bytes).map_err(|e| CfqaError::io(&ckpt, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.cfg.to_text()).map_err(|e| CfqaError::io(&cfg_path, e))
    }
}

/// Greedy (argmax) episodes with no parameter change.
pub fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    model: &ModelConfig,
    cfg: &RunConfig,
    examples: &[QAExample],
) -> Result<Evaluation> {
    let ecfg = EpisodeConfig::from(cfg);
    let opts = agent_options(cfg);
    let mut results = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut g = Graph::with_params(store);
        let mut agent = NeuralAgent::new(&mut g, model, opts.clone());
        let mut rng = seeded(episode_seed(cfg.seed, &ex.id, u64::MAX));
        results.push(run_episode(&mut agent, ex, &ecfg, &Chooser::Argmax, &mut rng)?);
    }
    let summaries: Vec<_> = results.iter().map(EpisodeResult::summary).collect();
    let metrics = RunMetrics::from_summaries(&summaries)?;
    Ok(Evaluation { results, metrics })
}

/// Load weights and check the embedded config hash.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, ConfigHash)> {
    let bytes = std::fs::read(path).map_err(|e| CfqaError::io(path, e))?;
    Ok(checkpoint::from_bytes(&bytes)?)
}

/// One JSON line per episode.
pub fn write_trajectories(mut w: impl Write, results: &[EpisodeResult]) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, &r.record())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
