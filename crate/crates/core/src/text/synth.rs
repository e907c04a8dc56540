//! Seeded generator of key/value reading tasks.
//!
//! Every document plants one key (a relation word plus subject words) followed
//! by its value in a single sentence; the question is the key. Distractor
//! sentences repeat the key with a different value, preceded by a marker word
//! that flags the statement as false.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use cfqa_tensor::init::seeded;

use crate::error::{CfqaError, Result};
use crate::text::dataset::RawExample;
use crate::text::tokenize::detokenize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    /// Inclusive range of sentences per document.
    pub sentences: (usize, usize),
    /// Inclusive range of tokens per sentence.
    pub tokens: (usize, usize),
    pub vocab_size: usize,
    pub distractor_rate: f64,
    /// Inclusive range of question (key) lengths.
    pub question_len: (usize, usize),
    /// Inclusive range of answer lengths.
    pub answer_len: (usize, usize),
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 100,
            sentences: (10, 10),
            tokens: (8, 12),
            vocab_size: 400,
            distractor_rate: 0.3,
            question_len: (2, 5),
            answer_len: (1, 2),
            id_prefix: "syn".into(),
        }
    }
}

/// Where the generator put things, for tests and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthMeta {
    pub gold_sentence: usize,
    pub distractors: Vec<usize>,
    pub n_sentences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub examples: Vec<RawExample>,
    pub meta: Vec<SynthMeta>,
}

struct Pools {
    marker: String,
    relations: Vec<String>,
    subjects: Vec<String>,
    values: Vec<String>,
    fillers: Vec<String>,
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn make_words(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(3..=7);
        let w: String = (0..len).map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn pools(vocab_size: usize, rng: &mut impl Rng) -> Pools {
    let mut words = make_words(vocab_size, rng).into_iter();
    let marker = words.next().expect("vocab_size >= 50");
    let rest: Vec<String> = words.collect();
    let n_rel = rest.len() / 10;
    let n_sub = rest.len() / 4;
    let n_val = rest.len() / 4;
    Pools {
        marker,
        relations: rest[..n_rel].to_vec(),
        subjects: rest[n_rel..n_rel + n_sub].to_vec(),
        values: rest[n_rel + n_sub..n_rel + n_sub + n_val].to_vec(),
        fillers: rest[n_rel + n_sub + n_val..].to_vec(),
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CfqaError::Config(m));
        for (name, (lo, hi)) in [
            ("sentences", self.sentences),
            ("tokens", self.tokens),
            ("question_len", self.question_len),
            ("answer_len", self.answer_len),
        ] {
            if lo == 0 || lo > hi {
                return err(format!("{name} range ({lo}, {hi}) is empty or starts at zero"));
            }
        }
        if self.vocab_size < 50 {
            return err(format!("vocab_size {} is below 50", self.vocab_size));
        }
        if self.question_len.0 < 2 {
            return err("questions need a relation and at least one subject".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return err("distractor_rate must lie in [0, 1]".into());
        }
        let longest = self.question_len.1 + self.answer_len.1 + 1;
        if longest > self.tokens.1 {
            return err(format!(
                "a planted statement needs up to {longest} tokens but sentences hold at most {}",
                self.tokens.1
            ));
        }
        Ok(())
    }
}

fn statement(len: usize, block: &[String], pools: &Pools, rng: &mut impl Rng) -> Vec<String> {
    let len = len.max(block.len());
    let at = rng.gen_range(0..=len - block.len());
    let mut s: Vec<String> = (0..len - block.len())
        .map(|_| pools.fillers.choose(rng).expect("fillers").clone())
        .collect();
    s.splice(at..at, block.iter().cloned());
    s
}

pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let pools = pools(cfg.vocab_size, &mut rng);
    let mut examples = Vec::with_capacity(cfg.n_docs);
    let mut meta = Vec::with_capacity(cfg.n_docs);

    for i in 0..cfg.n_docs {
        let n_sent = rng.gen_range(cfg.sentences.0..=cfg.sentences.1);
        let q_len = rng.gen_range(cfg.question_len.0..=cfg.question_len.1);
        let mut key = vec![pools.relations.choose(&mut rng).expect("relations").clone()];
        key.extend(pools.subjects.choose_multiple(&mut rng, q_len - 1).cloned());
        let a_len = rng.gen_range(cfg.answer_len.0..=cfg.answer_len.1);
        let value: Vec<String> = pools.values.choose_multiple(&mut rng, a_len).cloned().collect();

        let gold = rng.gen_range(0..n_sent);
        let mut sentences = Vec::with_capacity(n_sent);
        let mut distractors = Vec::new();
        for s in 0..n_sent {
            let len = rng.gen_range(cfg.tokens.0..=cfg.tokens.1);
            if s == gold {
                let block: Vec<String> = key.iter().chain(&value).cloned().collect();
                sentences.push(statement(len, &block, &pools, &mut rng));
            } else if rng.gen_bool(cfg.distractor_rate) {
                let others: Vec<&String> = pools.values.iter().filter(|v| !value.contains(v)).collect();
                let wrong_len = rng.gen_range(cfg.answer_len.0..=cfg.answer_len.1);
                let wrong = others.choose_multiple(&mut rng, wrong_len).map(|w| (*w).clone());
                let block: Vec<String> = key
                    .iter()
                    .cloned()
                    .chain(std::iter::once(pools.marker.clone()))
                    .chain(wrong)
                    .collect();
                sentences.push(statement(len, &block, &pools, &mut rng));
                distractors.push(s);
            } else {
                sentences.push(statement(len, &[], &pools, &mut rng));
            }
        }
        examples.push(RawExample {
            id: format!("{}{i:05}", cfg.id_prefix),
            document: detokenize(&sentences),
            question: key.join(" "),
            answers: vec![value.join(" ")],
        });
        meta.push(SynthMeta {
            gold_sentence: gold,
            distractors,
            n_sentences: n_sent,
        });
    }
    Ok(Corpus { examples, meta })
}
