//! A three-armed bandit for the actor-critic update in isolation.
//!
//! Each episode is one step: a random input sequence (which carries no
//! information about the reward) goes through the same GRU cells and heads
//! the controller uses, an action is sampled, and its fixed reward ends the
//! episode.

use rand::Rng;

use cfqa_tensor::init::{seeded, uniform_fan_in};
use cfqa_tensor::{AdaDelta, GradBuffer, Graph, ParamStore, Tensor};

use crate::error::Result;
use crate::model::policy::{actor_critic_loss, actor_log_probs, critic_value, run_gru, StepTerms, N_ACTIONS};

#[derive(Clone, Debug, PartialEq)]
pub struct BanditConfig {
    pub seed: u64,
    pub rewards: [f64; N_ACTIONS],
    pub d_in: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub updates: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Step multiplier of the GRU cells.
    pub gru_lr: f64,
    /// Step multiplier of the heads.
    pub lr: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rewards: [0.0, 0.0, 1.0],
            d_in: 8,
            hidden: 16,
            seq_len: 4,
            updates: 2000,
            batch_size: 8,
            gamma: 0.9,
            gru_lr: 1e-4,
            lr: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BanditReport {
    /// Mean action distribution over the batch, before each update.
    pub probs: Vec<[f64; N_ACTIONS]>,
    /// Mean distribution and value on fresh inputs after training.
    pub final_probs: [f64; N_ACTIONS],
    pub final_value: f64,
    /// First update (1-based) after which the best arm's probability
    /// exceeded 0.95, measured on the next batch.
    pub converged_at: Option<usize>,
}

impl BanditReport {
    pub fn best_arm(&self, rewards: &[f64; N_ACTIONS]) -> usize {
        (0..N_ACTIONS).fold(0, |b, i| if rewards[i] > rewards[b] { i } else { b })
    }
}

fn init_store(cfg: &BanditConfig) -> ParamStore<f64> {
    let mut rng = seeded(cfg.seed);
    let mut store = ParamStore::new();
    let h = cfg.hidden;
    for p in ["actor", "critic"] {
        store.insert(format!("{p}.gru.w"), uniform_fan_in(&[cfg.d_in, 3 * h], cfg.d_in, &mut rng));
        store.insert(format!("{p}.gru.u"), uniform_fan_in(&[h, 3 * h], h, &mut rng));
        store.insert(format!("{p}.gru.b"), Tensor::zeros(&[3 * h]));
    }
    store.insert("actor.head.w", Tensor::zeros(&[h, N_ACTIONS]));
    store.insert("actor.head.b", Tensor::zeros(&[N_ACTIONS]));
    store.insert("critic.head.w", Tensor::zeros(&[h, 1]));
    store.insert("critic.head.b", Tensor::zeros(&[1]));
    store
}

fn random_input(cfg: &BanditConfig, rng: &mut impl Rng) -> Tensor<f64> {
    let data = (0..cfg.seq_len * cfg.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[cfg.seq_len, cfg.d_in], data).expect("shape matches data")
}

fn sample(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn run_bandit(cfg: &BanditConfig) -> Result<BanditReport> {
    let mut store = init_store(cfg);
    let opt = AdaDelta::default()
        .with_lr(cfg.lr)
        .with_group_lr("actor.gru.", cfg.gru_lr)
        .with_group_lr("critic.gru.", cfg.gru_lr);
    let mut rng = seeded(cfg.seed.wrapping_add(1));
    let best = (0..N_ACTIONS).fold(0, |b, i| if cfg.rewards[i] > cfg.rewards[b] { i } else { b });
    let mut report = BanditReport {
        probs: Vec::with_capacity(cfg.updates),
        final_probs: [0.0; N_ACTIONS],
        final_value: 0.0,
        converged_at: None,
    };

    for u in 0..cfg.updates {
        let mut total = GradBuffer::new();
        let mut mean = [0.0; N_ACTIONS];
        for _ in 0..cfg.batch_size {
            let mut g = Graph::with_params(&store);
            let x = g.constant(random_input(cfg, &mut rng));
            let ha = run_gru(&mut g, x, "actor")?;
            let lp = actor_log_probs(&mut g, ha, &[false; N_ACTIONS])?;
            let hc = run_gru(&mut g, x, "critic")?;
            let value = critic_value(&mut g, hc)?;
            let probs: Vec<f64> = g.value(lp).data().iter().map(|l| l.exp()).collect();
            for (m, p) in mean.iter_mut().zip(&probs) {
                *m += p / cfg.batch_size as f64;
            }
            let a = sample(&probs, &mut rng);
            let log_prob = g.pick(lp, a)?;
            let step = StepTerms {
                log_prob: Some(log_prob),
                value,
                reward: cfg.rewards[a],
            };
            let losses = actor_critic_loss(&mut g, &[step], cfg.gamma, None)?;
            let loss = g.add(losses.actor, losses.critic)?;
            let grads = g.backward(loss)?;
            total.accumulate(&g, &grads);
        }
        if report.converged_at.is_none() && mean[best] > 0.95 && u > 0 {
            report.converged_at = Some(u);
        }
        report.probs.push(mean);
        total.scale(1.0 / cfg.batch_size as f64);
        opt.step(&mut store, &total)?;
    }

    let probes = 64;
    for _ in 0..probes {
        let mut g = Graph::with_params(&store);
        let x = g.constant(random_input(cfg, &mut rng));
        let ha = run_gru(&mut g, x, "actor")?;
        let lp = actor_log_probs(&mut g, ha, &[false; N_ACTIONS])?;
        let hc = run_gru(&mut g, x, "critic")?;
        let value = critic_value(&mut g, hc)?;
        for (m, l) in report.final_probs.iter_mut().zip(g.value(lp).data()) {
            *m += l.exp() / probes as f64;
        }
        report.final_value += g.value(value).item() / probes as f64;
    }
    Ok(report)
}
