//! The self-check suite behind `cfqa check`: finite-difference gradient
//! checks of every differentiable op and of the whole episode loss,
//! brute-force oracles for the discrete pieces, and the bandit.

use rand::Rng;

use cfqa_tensor::gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport};
use cfqa_tensor::init::{seeded, uniform};
use cfqa_tensor::{Fault, Graph, ParamStore, Tensor, Var};

use crate::agent::{AgentOptions, NeuralAgent};
use crate::bandit::{run_bandit, BanditConfig};
use crate::config::{DecodeMode, ModelConfig};
use crate::episode::{run_episode, Chooser, EpisodeConfig};
use crate::error::Result;
use crate::model::answer::{context_query_attention, decode_span, trilinear};
use crate::model::encoder::Encoded;
use crate::model::policy::FixedTargets;
use crate::model::{init_params, select_top_k, ActionId};
use crate::subcontext::excise_span;
use crate::text::{build_vocab, gen_synthetic, prepare, QAExample, SynthConfig, Token, TokenDoc};

pub const GROUPS: &[&str] = &["grad", "e2e", "topk", "excision", "decode", "trilinear", "attention", "bandit"];

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Run only checks whose group or full name is listed; empty runs all.
    pub only: Vec<String>,
    /// Seeded cases per gradient check.
    pub grad_cases: usize,
    /// Seeded cases of the end-to-end gradient check.
    pub e2e_cases: usize,
    pub seed: u64,
    /// Deliberately broken backward pass, to prove the checks can fail.
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            only: Vec::new(),
            grad_cases: 100,
            e2e_cases: 10,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    /// `group/name`, e.g. `grad/conv1d`.
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({} cases)", self.name, self.cases)?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

impl CheckOptions {
    fn wants(&self, group: &str) -> bool {
        self.only.is_empty() || self.only.iter().any(|o| o == group || o.starts_with(&format!("{group}/")))
    }

    fn wants_name(&self, name: &str) -> bool {
        let group = name.split('/').next().unwrap_or(name);
        self.only.is_empty() || self.only.iter().any(|o| o == group || o == name)
    }
}

/// Run the selected checks in a fixed order.
pub fn run_checks(opts: &CheckOptions) -> Result<Vec<CheckOutcome>> {
    for o in &opts.only {
        let group = o.split('/').next().unwrap_or(o);
        if !GROUPS.contains(&group) {
            return Err(crate::CfqaError::Config(format!(
                "unknown check `{o}` (groups: {})",
                GROUPS.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    if opts.wants("grad") {
        for op in grad_ops() {
            let name = format!("grad/{}", op.name);
            if opts.wants_name(&name) {
                out.push(run_grad_op(&op, &name, opts)?);
            }
        }
    }
    if opts.wants("e2e") {
        out.push(check_e2e(opts)?);
    }
    if opts.wants("topk") {
        out.push(check_topk(opts.seed, 1000));
    }
    if opts.wants("excision") {
        out.push(check_excision(opts.seed, 1000)?);
    }
    if opts.wants("decode") {
        out.push(check_decode(opts.seed, 500));
    }
    if opts.wants("trilinear") {
        out.push(check_trilinear(opts.seed, 100)?);
    }
    if opts.wants("attention") {
        out.push(check_attention(opts.seed, 100)?);
    }
    if opts.wants("bandit") {
        out.extend(check_bandit(opts.seed)?);
    }
    Ok(out)
}

// ---- gradients of single ops ---------------------------------------------

type Build = fn(&mut Graph<'_, f64>, &[Var], &[Tensor<f64>]) -> cfqa_tensor::Result<Var>;

/// One op under test: input shapes, constant extras (loss weights and the
/// like) and the function from inputs to a scalar loss.
struct GradOp {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    build: Build,
}

const N: usize = 10;
const D: usize = 4;

/// `Σ y ⊙ r` with `r` a fixed random weight, so no output element's
/// gradient can vanish by symmetry.
fn weigh(g: &mut Graph<'_, f64>, y: Var, r: &Tensor<f64>) -> cfqa_tensor::Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = Tensor::from_vec(&shape, r.data()[..shape.iter().product()].to_vec())?;
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn grad_ops() -> Vec<GradOp> {
    fn op(name: &'static str, inputs: &[&[usize]], build: Build) -> GradOp {
        GradOp {
            name,
            inputs: inputs.iter().map(|s| s.to_vec()).collect(),
            build,
        }
    }
    vec![
        op("matmul", &[&[N, D], &[D, 3]], |g, v, r| {
            let y = g.matmul(v[0], v[1])?;
            weigh(g, y, &r[0])
        }),
        op("add", &[&[N, D], &[N, D]], |g, v, r| {
            let y = g.add(v[0], v[1])?;
            let y = g.mul(y, y)?;
            weigh(g, y, &r[0])
        }),
        op("sub", &[&[N, D], &[N, D]], |g, v, r| {
            let y = g.sub(v[0], v[1])?;
            let y = g.mul(y, y)?;
            weigh(g, y, &r[0])
        }),
        op("mul", &[&[N, D], &[N, D]], |g, v, r| {
            let y = g.mul(v[0], v[1])?;
            weigh(g, y, &r[0])
        }),
        op("add_broadcast", &[&[N, D], &[D], &[N, 1]], |g, v, r| {
            let y = g.add_broadcast(v[0], v[1])?;
            let y = g.add_broadcast(y, v[2])?;
            let y = g.mul(y, y)?;
            weigh(g, y, &r[0])
        }),
        op("mul_broadcast", &[&[N, D], &[1, D], &[N, 1]], |g, v, r| {
            let y = g.mul_broadcast(v[0], v[1])?;
            let y = g.mul_broadcast(y, v[2])?;
            weigh(g, y, &r[0])
        }),
        op("scale", &[&[N, D]], |g, v, r| {
            let y = g.scale(v[0], -1.7);
            let y = g.mul(y, v[0])?;
            weigh(g, y, &r[0])
        }),
        op("transpose", &[&[N, D]], |g, v, r| {
            let y = g.transpose(v[0]);
            let y = g.mul(y, y)?;
            weigh(g, y, &r[0])
        }),
        op("sigmoid", &[&[N, D]], |g, v, r| {
            let y = g.sigmoid(v[0]);
            weigh(g, y, &r[0])
        }),
        op("tanh", &[&[N, D]], |g, v, r| {
            let y = g.tanh(v[0]);
            weigh(g, y, &r[0])
        }),
        op("relu", &[&[N, D]], |g, v, r| {
            let y = g.relu(v[0]);
            weigh(g, y, &r[0])
        }),
        op("softmax_rows", &[&[D, N]], |g, v, r| {
            let mut mask = vec![false; N];
            mask[3] = true;
            mask[N - 1] = true;
            let y = g.softmax_rows(v[0], Some(&mask))?;
            weigh(g, y, &r[0])
        }),
        op("log_softmax_rows", &[&[D, N]], |g, v, r| {
            let mut mask = vec![false; N];
            mask[0] = true;
            let y = g.log_softmax_rows(v[0], Some(&mask))?;
            // masked entries hold a large sentinel; weigh only live ones
            let live = g.slice_cols(y, 1, N - 1)?;
            weigh(g, live, &r[0])
        }),
        op("softmax_axis0", &[&[N, D]], |g, v, r| {
            let y = g.softmax(v[0], 0)?;
            weigh(g, y, &r[0])
        }),
        op("layer_norm", &[&[N, D], &[D], &[D]], |g, v, r| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weigh(g, y, &r[0])
        }),
        op("concat_cols", &[&[N, D], &[N, 2]], |g, v, r| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            let y = g.tanh(y);
            weigh(g, y, &r[0])
        }),
        op("concat_rows", &[&[N, D], &[3, D]], |g, v, r| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            let y = g.tanh(y);
            weigh(g, y, &r[0])
        }),
        op("slice", &[&[N, D]], |g, v, r| {
            let y = g.slice_rows(v[0], 2, 5)?;
            let y = g.slice_cols(y, 1, 2)?;
            let y = g.mul(y, y)?;
            weigh(g, y, &r[0])
        }),
        op("select_rows", &[&[N, D]], |g, v, r| {
            let y = g.select_rows(v[0], &[3, 0, 3, 9, 5])?;
            let y = g.tanh(y);
            weigh(g, y, &r[0])
        }),
        op("gather_max", &[&[N, D]], |g, v, r| {
            let groups = vec![vec![0, 1, 2], vec![4], vec![5, 9, 7, 3], vec![8, 6]];
            let y = g.gather_max(v[0], &groups)?;
            weigh(g, y, &r[0])
        }),
        op("max_rows", &[&[N, D]], |g, v, r| {
            let y = g.max_rows(v[0]);
            weigh(g, y, &r[0])
        }),
        op("conv1d", &[&[N, D], &[3, D, 5]], |g, v, r| {
            let y = g.conv1d(v[0], v[1])?;
            let y = g.tanh(y);
            weigh(g, y, &r[0])
        }),
        op("sum_mean", &[&[N, D]], |g, v, _| {
            let sq = g.mul(v[0], v[0])?;
            let a = g.sum(sq);
            let t = g.tanh(v[0]);
            let b = g.mean(t);
            g.add(a, b)
        }),
        op("pick", &[&[N, D]], |g, v, _| {
            let t = g.tanh(v[0]);
            let a = g.pick(t, 7)?;
            let b = g.pick(t, 30)?;
            let ab = g.mul(a, b)?;
            g.add(ab, a)
        }),
        op("gru_step", &[&[2, 6], &[2, D], &[D, 18], &[6, 18], &[18]], |g, v, r| {
            let h = g.gru_step(v[0], v[1], v[2], v[3], v[4])?;
            let h = g.gru_step(h, v[1], v[2], v[3], v[4])?;
            weigh(g, h, &r[0])
        }),
    ]
}

fn grad_detail(report: &GradCheckReport) -> String {
    match report.worst() {
        Some(m) => format!(
            "{} mismatches; worst {}[{}] analytic {:.6e} numeric {:.6e}",
            report.mismatches.len(),
            m.tensor,
            m.index,
            m.analytic,
            m.numeric
        ),
        None => String::new(),
    }
}

fn run_grad_op(op: &GradOp, name: &str, opts: &CheckOptions) -> Result<CheckOutcome> {
    let cfg = GradCheckConfig::default();
    let mut failures = 0;
    let mut first = String::new();
    for case in 0..opts.grad_cases {
        let mut rng = seeded(opts.seed ^ (case as u64).wrapping_mul(0xA24B_AED4_963E_E407) ^ hash_name(op.name));
        let inputs: Vec<Tensor<f64>> = op.inputs.iter().map(|s| uniform(s, 1.0, &mut rng)).collect();
        let extras = vec![uniform(&[64], 1.0, &mut rng)];
        let fault = opts.fault;
        let build = op.build;
        let report = check_inputs(
            &inputs,
            |g, v| {
                if let Some(f) = fault {
                    g.inject_fault(f);
                }
                build(g, v, &extras)
            },
            &cfg,
        )?;
        if !report.passed() {
            failures += 1;
            if first.is_empty() {
                first = format!("case {case}: {}", grad_detail(&report));
            }
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        passed: failures == 0,
        cases: opts.grad_cases,
        detail: if failures == 0 {
            String::new()
        } else {
            format!("{failures} failing cases; {first}")
        },
    })
}

fn hash_name(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

// ---- end-to-end episode loss ----------------------------------------------

/// A deliberately small model so a full finite-difference sweep is cheap.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_word: 4,
        d_char: 3,
        d_model: 4,
        conv_kernel: 3,
        conv_filters: 4,
        n_heads: 2,
        use_positional: true,
        use_residual: true,
        share_question_encoder: true,
        char_width: 4,
        selector_kernel: 3,
        selector_filters: 3,
        gru_hidden: 5,
        max_span_len: 4,
        decode: DecodeMode::Constrained,
    }
}

/// A three-sentence synthetic example of about ten tokens.
pub fn tiny_example(seed: u64, char_width: usize) -> Result<(QAExample, usize, usize)> {
    let cfg = SynthConfig {
        n_docs: 1,
        sentences: (3, 3),
        tokens: (3, 4),
        vocab_size: 50,
        distractor_rate: 0.5,
        question_len: (2, 2),
        answer_len: (1, 1),
        id_prefix: "tiny".into(),
    };
    let corpus = gen_synthetic(&cfg, seed)?;
    let vocab = build_vocab(&corpus.examples)?;
    let ex = prepare(&corpus.examples[0], &vocab, char_width, 0)?;
    Ok((ex, vocab.n_words(), vocab.n_chars()))
}

/// Parameters of the tiny model with nonzero actor and critic heads, so
/// gradients reach the recurrent cells.
pub fn tiny_store(model: &ModelConfig, n_words: usize, n_chars: usize, seed: u64) -> Result<ParamStore<f64>> {
    let mut store = init_params::<f64>(model, n_words, n_chars, seed);
    let mut rng = seeded(seed ^ 0x4EAD);
    for name in ["actor.head.w", "actor.head.b", "critic.head.w", "critic.head.b"] {
        let shape = store.value(name)?.shape().to_vec();
        *store.value_mut(name)? = uniform(&shape, 0.5, &mut rng);
    }
    Ok(store)
}

fn episode_loss(
    g: &mut Graph<'_, f64>,
    model: &ModelConfig,
    ex: &QAExample,
    script: &[ActionId],
    fixed: Option<&FixedTargets>,
    fault: Option<Fault>,
) -> Result<(Var, FixedTargets)> {
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let opts = AgentOptions {
        entropy_coef: 0.01,
        ..AgentOptions::default()
    };
    let mut agent = NeuralAgent::new(g, model, opts);
    let mut rng = seeded(0);
    let res = run_episode(
        &mut agent,
        ex,
        &EpisodeConfig::default(),
        &Chooser::Script(script.to_vec()),
        &mut rng,
    )?;
    let loss = agent.finish(&res.rewards(), 0.9, fixed)?;
    Ok((
        loss.total,
        FixedTargets {
            deltas: loss.deltas,
            targets: loss.targets,
        },
    ))
}

/// Finite-difference check of the full episode loss (actor, critic, span and
/// selector terms) with respect to every parameter the episode touches.
pub fn e2e_case(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model = tiny_model();
    let (ex, n_words, n_chars) = tiny_example(seed, model.char_width)?;
    let mut store = tiny_store(&model, n_words, n_chars, seed)?;
    let script = [ActionId::Narrow, ActionId::Excise, ActionId::Answer];
    let fixed = {
        let mut g = Graph::with_params(&store);
        episode_loss(&mut g, &model, &ex, &script, None, None)?.1
    };
    let cfg = GradCheckConfig {
        max_elems: Some(6),
        seed,
        ..GradCheckConfig::default()
    };
    let report = check_params(
        &mut store,
        |g| {
            episode_loss(g, &model, &ex, &script, Some(&fixed), fault)
                .map(|r| r.0)
                .map_err(|e| cfqa_tensor::TensorError::Contract(e.to_string()))
        },
        &cfg,
    )?;
    Ok(report)
}

fn check_e2e(opts: &CheckOptions) -> Result<CheckOutcome> {
    let mut failures = 0;
    let mut first = String::new();
    for case in 0..opts.e2e_cases {
        let report = e2e_case(opts.seed.wrapping_add(case as u64), opts.fault)?;
        if !report.passed() {
            failures += 1;
            if first.is_empty() {
                first = format!("case {case}: {}", grad_detail(&report));
            }
        }
    }
    Ok(CheckOutcome {
        name: "e2e/episode_loss".into(),
        passed: failures == 0,
        cases: opts.e2e_cases,
        detail: if failures == 0 {
            String::new()
        } else {
            format!("{failures} failing cases; {first}")
        },
    })
}

// ---- discrete oracles ------------------------------------------------------

fn outcome(name: &str, cases: usize, failure: Option<String>) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed: failure.is_none(),
        cases,
        detail: failure.unwrap_or_default(),
    }
}

/// Like `outcome`, but the detail is kept on success too.
fn measured(name: &str, cases: usize, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        cases,
        detail,
    }
}

/// The chosen set is correct iff it has `min(k, n)` members and every
/// chosen sentence beats every unchosen one (ties go to the lower index).
fn topk_is_valid(probs: &[f64], k: usize, chosen: &[usize]) -> bool {
    if chosen.len() != k.min(probs.len()) || chosen.windows(2).any(|w| w[0] >= w[1]) {
        return false;
    }
    let inside = |j: usize| chosen.contains(&j);
    chosen.iter().all(|&i| {
        (0..probs.len())
            .filter(|&j| !inside(j))
            .all(|j| probs[i] > probs[j] || (probs[i] == probs[j] && i < j))
    })
}

fn check_topk(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = seeded(seed ^ 0x70B);
    for case in 0..cases {
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=7);
        // a coarse grid makes ties common
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
        let chosen = select_top_k(&probs, k);
        if !topk_is_valid(&probs, k, &chosen) {
            return outcome("topk/oracle", cases, Some(format!("case {case}: {probs:?} k={k} -> {chosen:?}")));
        }
    }
    outcome("topk/oracle", cases, None)
}

fn random_doc(rng: &mut impl Rng) -> Result<TokenDoc> {
    let n_sent = rng.gen_range(1..=4);
    let mut next = 0;
    let sentences = (0..n_sent)
        .map(|s| {
            let len = rng.gen_range(1..=5);
            (0..len)
                .map(|p| {
                    next += 1;
                    Token {
                        id: next,
                        chars: vec![0],
                        source: (s, p),
                    }
                })
                .collect()
        })
        .collect();
    TokenDoc::new(sentences)
}

fn check_excision(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = seeded(seed ^ 0xE5C);
    for case in 0..cases {
        let doc = random_doc(&mut rng)?;
        let n = doc.n_tokens();
        let start = rng.gen_range(0..n);
        let end = rng.gen_range(start..n);
        let flat: Vec<&Token> = doc.tokens().collect();
        let expect: Vec<Token> = flat[..start].iter().chain(&flat[end + 1..]).map(|t| (*t).clone()).collect();
        let got = excise_span(&doc, start, end);
        let ok = match got {
            Ok((rest, _)) => {
                let toks: Vec<Token> = rest.tokens().cloned().collect();
                !expect.is_empty()
                    && toks == expect
                    && rest.n_sentences() <= doc.n_sentences()
                    && rest.sentences().iter().all(|s| !s.is_empty())
            }
            Err(crate::CfqaError::ExcisionRefused) => expect.is_empty(),
            Err(_) => false,
        };
        if !ok {
            return Ok(outcome("excision/flat_splice", cases, Some(format!("case {case}: span ({start}, {end}) of {n}"))));
        }
    }
    Ok(outcome("excision/flat_splice", cases, None))
}

fn check_decode(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = seeded(seed ^ 0xDEC);
    for case in 0..cases {
        let n = rng.gen_range(1..=25);
        let max_len = rng.gen_range(1..=8);
        let ps: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let pe: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let mut best = (0, 0);
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..n {
            for j in i..n {
                if j - i < max_len && ps[i] * pe[j] > best_score {
                    best = (i, j);
                    best_score = ps[i] * pe[j];
                }
            }
        }
        let got = decode_span(ps.clone(), pe.clone(), max_len, DecodeMode::Constrained);
        if (got.start, got.end) != best || (got.score - best_score).abs() > 1e-12 {
            return outcome(
                "decode/enumeration",
                cases,
                Some(format!("case {case}: got ({}, {}) expected {best:?}", got.start, got.end)),
            );
        }
    }
    outcome("decode/enumeration", cases, None)
}

fn encoded(g: &mut Graph<'_, f64>, t: Tensor<f64>, mask: Vec<bool>) -> Encoded {
    Encoded {
        rows: g.constant(t),
        mask,
        attention: Vec::new(),
    }
}

fn check_trilinear(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = seeded(seed ^ 0x731);
    for case in 0..cases {
        let (n, m, d) = (rng.gen_range(1..=6), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let q = uniform::<f64>(&[m, d], 1.0, &mut rng);
        let c = uniform::<f64>(&[n, d], 1.0, &mut rng);
        let w = uniform::<f64>(&[3 * d, 1], 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, cv, wv) = (g.constant(q.clone()), g.constant(c.clone()), g.constant(w.clone()));
        let s = trilinear(&mut g, qv, cv, wv)?;
        let s = g.value(s);
        for i in 0..n {
            for j in 0..m {
                let mut e = 0.0;
                for k in 0..d {
                    e += w.data()[k] * q.at(j, k) + w.data()[d + k] * c.at(i, k) + w.data()[2 * d + k] * c.at(i, k) * q.at(j, k);
                }
                if (s.at(i, j) - e).abs() > 1e-9 {
                    return Ok(outcome(
                        "trilinear/loop",
                        cases,
                        Some(format!("case {case}: S[{i},{j}] = {} expected {e}", s.at(i, j))),
                    ));
                }
            }
        }
    }
    Ok(outcome("trilinear/loop", cases, None))
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn check_attention(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = seeded(seed ^ 0xA77);
    for case in 0..cases {
        let (n, m, d) = (rng.gen_range(1..=6), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let s = uniform::<f64>(&[n, m], 2.0, &mut rng);
        let q = uniform::<f64>(&[m, d], 1.0, &mut rng);
        let c = uniform::<f64>(&[n, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let qe = encoded(&mut g, q.clone(), vec![false; m]);
        let ce = encoded(&mut g, c.clone(), vec![false; n]);
        let (a, b) = context_query_attention(&mut g, sv, &qe, &ce)?;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| softmax(s.row(i))).collect();
        let cols: Vec<Vec<f64>> = (0..m)
            .map(|j| softmax(&(0..n).map(|i| s.at(i, j)).collect::<Vec<_>>()))
            .collect();
        for i in 0..n {
            for k in 0..d {
                let ea: f64 = (0..m).map(|j| rows[i][j] * q.at(j, k)).sum();
                let mut eb = 0.0;
                for j in 0..m {
                    for l in 0..n {
                        eb += rows[i][j] * cols[j][l] * c.at(l, k);
                    }
                }
                let (ga, gb) = (g.value(a).at(i, k), g.value(b).at(i, k));
                if (ga - ea).abs() > 1e-9 || (gb - eb).abs() > 1e-9 {
                    return Ok(outcome(
                        "attention/direct",
                        cases,
                        Some(format!("case {case}: A {ga} vs {ea}, B {gb} vs {eb} at [{i},{k}]")),
                    ));
                }
            }
        }
    }
    Ok(outcome("attention/direct", cases, None))
}

// ---- bandit -------------------------------------------------------------

fn check_bandit(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = BanditConfig {
        seed,
        ..BanditConfig::default()
    };
    let r = run_bandit(&cfg)?;
    let best = r.best_arm(&cfg.rewards);
    let converged = r.converged_at.filter(|&u| u <= 2000);
    let conv = measured(
        "bandit/convergence",
        1,
        converged.is_some() && r.final_probs[best] > 0.95,
        format!("p(best) = {:.4}, crossed 0.95 at {:?}", r.final_probs[best], r.converged_at),
    );
    let value = measured(
        "bandit/critic",
        1,
        (r.final_value - 1.0).abs() <= 0.1,
        format!("value {:.4}, expected 1 ± 0.1", r.final_value),
    );
    let seeds = 5;
    let mut mean = [0.0; 3];
    for s in 0..seeds {
        let r = run_bandit(&BanditConfig {
            seed: seed.wrapping_add(100 + s),
            rewards: [1.0; 3],
            ..BanditConfig::default()
        })?;
        for (m, p) in mean.iter_mut().zip(r.final_probs) {
            *m += p / seeds as f64;
        }
    }
    let dev = mean.iter().map(|p| (p - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    let sym = measured(
        "bandit/symmetric",
        seeds as usize,
        dev <= 0.2,
        format!("mean distribution [{:.3}, {:.3}, {:.3}], {dev:.3} from uniform", mean[0], mean[1], mean[2]),
    );
    Ok(vec![conv, value, sym])
}
