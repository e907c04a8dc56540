use cfqa::check::tiny_model;
use cfqa::model::answer::{context_query_attention, model_encode, trilinear};
use cfqa::model::encoder::{embed_tokens, encode_tokens, self_attention, Encoded};
use cfqa::model::params::param_shapes;
use cfqa::model::policy::{
    actor_critic_loss, actor_log_probs, critic_value, run_gru, state_sequence, FixedTargets, StepTerms,
};
use cfqa::model::selector::sentence_scores;
use cfqa::model::{decode_span, init_params, select_top_k};
use cfqa::tensor::gradcheck::{check_params, GradCheckConfig};
use cfqa::tensor::init::{seeded, uniform};
use cfqa::tensor::{Graph, ParamStore, Tensor, Var};
use cfqa::text::{Token, TokenDoc};
use cfqa::{DecodeMode, ModelConfig};
use proptest::prelude::*;
use rand::Rng;

const N_WORDS: usize = 20;
const N_CHARS: usize = 12;

fn tok(id: usize, chars: &[usize], width: usize) -> Token {
    let mut c = chars.to_vec();
    c.resize(width, 0);
    Token {
        id,
        chars: c,
        source: (0, 0),
    }
}

fn toks(ids: &[usize], width: usize) -> Vec<Token> {
    ids.iter().map(|&i| tok(i, &[2 + i % 9, 3], width)).collect()
}

fn doc(sentences: &[&[usize]], width: usize) -> TokenDoc {
    TokenDoc::new(sentences.iter().map(|s| toks(s, width)).collect()).unwrap()
}

fn store(cfg: &ModelConfig) -> ParamStore<f64> {
    init_params(cfg, N_WORDS, N_CHARS, 7)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(r, s)| r.len() == s.len() && r.iter().zip(s).all(|(x, y)| (x - y).abs() <= tol))
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    uniform(shape, 1.0, rng)
}

// ---- embeddings ------------------------------------------------------------

#[test]
fn embedding_is_word_row_then_char_max() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let words = rows(s.value("emb.word").unwrap());
    let chars = rows(s.value("emb.char").unwrap());
    let cases: [&[usize]; 3] = [&[4], &[5, 5, 5], &[2, 3, 4, 5, 6]];
    for c in cases {
        let mut g = Graph::with_params(&s);
        let x = embed_tokens(&mut g, &[tok(9, c, 8)]).unwrap();
        let got = g.value(x).row(0).to_vec();
        let mut want = words[9].clone();
        want.extend((0..cfg.d_char).map(|j| c.iter().map(|&ci| chars[ci][j]).fold(f64::NEG_INFINITY, f64::max)));
        assert!(close(&[got], &[want], 1e-12), "chars {c:?}");
    }
}

// ---- encoder ---------------------------------------------------------------

#[test]
fn single_token_sequence_has_one_row() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut g = Graph::with_params(&s);
    let e = encode_tokens(&mut g, &toks(&[5], cfg.char_width), &cfg, "enc").unwrap();
    assert_eq!(g.shape(e.rows), &[1, cfg.d_model]);
    assert_eq!(g.shape(e.attention[0]), &[1, 1]);
}

#[test]
fn padding_receives_no_attention_and_rows_sum_to_one() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut g = Graph::with_params(&s);
    let e = encode_tokens(&mut g, &toks(&[5, 6, 7, 0, 0], cfg.char_width), &cfg, "enc").unwrap();
    assert_eq!(e.mask, vec![false, false, false, true, true]);
    for &w in &e.attention {
        let w = g.value(w);
        for i in 0..5 {
            assert_eq!(w.at(i, 3), 0.0);
            assert_eq!(w.at(i, 4), 0.0);
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn without_positions_and_width_one_kernels_the_encoder_is_permutation_equivariant() {
    let cfg = ModelConfig {
        use_positional: false,
        conv_kernel: 1,
        ..tiny_model()
    };
    let s = store(&cfg);
    let ids = [3, 8, 5, 11, 6];
    let perm = [2, 0, 4, 1, 3];
    let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
    let mut g = Graph::with_params(&s);
    let a = encode_tokens(&mut g, &toks(&ids, cfg.char_width), &cfg, "enc").unwrap();
    let b = encode_tokens(&mut g, &toks(&permuted, cfg.char_width), &cfg, "enc").unwrap();
    let (a, b) = (rows(g.value(a.rows)), rows(g.value(b.rows)));
    let a_perm: Vec<Vec<f64>> = perm.iter().map(|&p| a[p].clone()).collect();
    assert!(close(&a_perm, &b, 1e-10));
}

#[test]
fn identical_rows_attend_uniformly() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut g = Graph::with_params(&s);
    let row = [0.3, -0.2, 0.9, 0.1];
    let x = g.constant(Tensor::from_vec(&[4, 4], row.repeat(4)).unwrap());
    let (_, weights) = self_attention(&mut g, x, None, 2, "enc.block.attn").unwrap();
    for w in weights {
        assert!(g.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}

#[test]
fn single_head_attention_matches_a_direct_computation() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut rng = seeded(3);
    let x = random(&[5, 4], &mut rng);
    let mut g = Graph::with_params(&s);
    let xv = g.constant(x.clone());
    let (out, _) = self_attention(&mut g, xv, None, 1, "enc.block.attn").unwrap();

    let p = |n: &str| rows(s.value(&format!("enc.block.attn.{n}")).unwrap());
    let xr = rows(&x);
    let q = matmul(&xr, &p("wq"));
    let k = matmul(&xr, &p("wk"));
    let v = matmul(&xr, &p("wv"));
    let mut heads = Vec::new();
    for qi in &q {
        let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 2.0).collect();
        let w = softmax(&scores);
        heads.push((0..4).map(|c| w.iter().zip(&v).map(|(wi, vr)| wi * vr[c]).sum()).collect());
    }
    let want = matmul(&heads, &p("wo"));
    assert!(close(&rows(g.value(out)), &want, 1e-12));
}

#[test]
fn word_and_char_tables_both_receive_gradient() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut g = Graph::with_params(&s);
    let e = encode_tokens(&mut g, &toks(&[4, 5, 6], cfg.char_width), &cfg, "enc").unwrap();
    let r = {
        let mut rng = seeded(1);
        random(&[3, cfg.d_model], &mut rng)
    };
    let rv = g.constant(r);
    let weighted = g.mul(e.rows, rv).unwrap();
    let loss = g.sum(weighted);
    let grads = g.backward(loss).unwrap();
    let bound: Vec<(String, Var)> = g.bound_params().map(|(n, v)| (n.to_string(), v)).collect();
    for name in ["emb.word", "emb.char"] {
        let v = bound.iter().find(|(n, _)| n == name).unwrap().1;
        let gr = grads.wrt(&g, v);
        assert!(gr.data().iter().any(|&x| x != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn question_encoder_sharing_controls_the_parameter_set() {
    let shared = tiny_model();
    let split = ModelConfig {
        share_question_encoder: false,
        ..tiny_model()
    };
    let has_qenc = |c: &ModelConfig| param_shapes(c, N_WORDS, N_CHARS).iter().any(|(n, _)| n.starts_with("qenc."));
    assert!(!has_qenc(&shared));
    assert!(has_qenc(&split));
}

// ---- sentence selector -----------------------------------------------------

fn selector_probs(cfg: &ModelConfig, s: &ParamStore<f64>, ctx: &TokenDoc, q: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut g = Graph::with_params(s);
    let qe = encode_tokens(&mut g, &toks(q, cfg.char_width), cfg, "enc").unwrap();
    let tokens: Vec<Token> = ctx.tokens().cloned().collect();
    let ce = encode_tokens(&mut g, &tokens, cfg, "enc").unwrap();
    let scores = sentence_scores(&mut g, &qe, &ce, ctx).unwrap();
    let probs = g.softmax_rows(scores, None).unwrap();
    (g.value(probs).row(0).to_vec(), rows(g.value(qe.rows)), rows(g.value(ce.rows)))
}

#[test]
fn one_sentence_gets_all_the_mass() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let (p, _, _) = selector_probs(&cfg, &s, &doc(&[&[3, 4, 5]], cfg.char_width), &[6, 7]);
    assert_eq!(p.len(), 1);
    assert!((p[0] - 1.0).abs() < 1e-12);
}

#[test]
fn identical_sentences_split_evenly() {
    let cfg = ModelConfig {
        use_positional: false,
        conv_kernel: 1,
        ..tiny_model()
    };
    let s = store(&cfg);
    // with no positions and a width-one conv the encoder is position-free,
    // but attention still mixes across sentences; symmetric content keeps
    // the two sentences' rows equal
    let (p, _, _) = selector_probs(&cfg, &s, &doc(&[&[3, 4], &[3, 4]], cfg.char_width), &[6]);
    assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12, "{p:?}");
}

fn conv_same(x: &[Vec<f64>], w: &Tensor<f64>, b: &[f64]) -> Vec<Vec<f64>> {
    let (k, din, df) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = k as isize / 2;
    let n = x.len() as isize;
    (0..n)
        .map(|t| {
            (0..df)
                .map(|f| {
                    let mut acc = b[f];
                    for j in 0..k as isize {
                        let s = t + j - pad;
                        if s < 0 || s >= n {
                            continue;
                        }
                        for c in 0..din {
                            acc += x[s as usize][c] * w.data()[(j as usize * din + c) * df + f];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[test]
fn sentence_scores_match_a_per_sentence_loop() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let ctx = doc(&[&[3, 4, 5], &[6, 7], &[8, 9, 10, 11]], cfg.char_width);
    let (p, q, c) = selector_probs(&cfg, &s, &ctx, &[12, 13]);
    let w = s.value("sel.conv.w").unwrap();
    let b = s.value("sel.conv.b").unwrap().data().to_vec();
    let out: Vec<f64> = s.value("sel.out.w").unwrap().data().to_vec();
    let mut scores = Vec::new();
    let mut off = 0;
    for sent in ctx.sentences() {
        let mut x = q.clone();
        x.extend(c[off..off + sent.len()].iter().cloned());
        off += sent.len();
        let h = conv_same(&x, w, &b);
        let pooled: Vec<f64> = (0..out.len()).map(|f| h.iter().map(|r| r[f].max(0.0)).fold(f64::NEG_INFINITY, f64::max)).collect();
        scores.push(pooled.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>());
    }
    let want = softmax(&scores);
    assert!(close(&[p], &[want], 1e-10));
}

#[test]
fn top_k_examples() {
    assert_eq!(select_top_k(&[0.1, 0.7, 0.2], 2), vec![1, 2]);
    assert_eq!(select_top_k(&[0.1, 0.7, 0.2], 3), vec![0, 1, 2]);
    assert_eq!(select_top_k(&[0.1, 0.7, 0.2], 8), vec![0, 1, 2]);
}

proptest! {
    #[test]
    fn top_k_ignores_a_common_shift(scores in prop::collection::vec(-5.0f64..5.0, 1..12), shift in -10.0f64..10.0, k in 1usize..14) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        prop_assert_eq!(select_top_k(&scores, k), select_top_k(&shifted, k));
    }

    #[test]
    fn narrowing_is_nested_and_keeps_the_best(probs in prop::collection::vec(0.0f64..1.0, 1..12), k in 1usize..12) {
        let small = select_top_k(&probs, k);
        let large = select_top_k(&probs, k + 1);
        prop_assert!(small.iter().all(|i| large.contains(i)));
        prop_assert_eq!(small.len(), k.min(probs.len()));
        let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        prop_assert!(small.contains(&best));
        prop_assert!(small.windows(2).all(|w| w[0] < w[1]));
    }
}

// ---- answer generator ------------------------------------------------------

fn encoded(g: &mut Graph<'_, f64>, t: Tensor<f64>) -> Encoded {
    let n = t.rows();
    Encoded {
        rows: g.constant(t),
        mask: vec![false; n],
        attention: Vec::new(),
    }
}

fn trilinear_oracle(q: &[Vec<f64>], d: &[Vec<f64>], w0: &[f64]) -> Vec<Vec<f64>> {
    let dm = q[0].len();
    d.iter()
        .map(|di| {
            q.iter()
                .map(|qj| (0..dm).map(|c| w0[c] * qj[c] + w0[dm + c] * di[c] + w0[2 * dm + c] * qj[c] * di[c]).sum())
                .collect()
        })
        .collect()
}

#[test]
fn zero_trilinear_weights_give_uniform_attention() {
    let mut rng = seeded(4);
    let mut g: Graph<'_, f64> = Graph::new();
    let q = g.constant(random(&[3, 4], &mut rng));
    let d = g.constant(random(&[5, 4], &mut rng));
    let w0 = g.constant(Tensor::zeros(&[12, 1]));
    let s = trilinear(&mut g, q, d, w0).unwrap();
    let p = g.softmax_rows(s, None).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn trilinear_matches_the_loop_definition() {
    let mut g: Graph<'_, f64> = Graph::new();
    // one-by-one: w = [2, 3, 5], q = 7, d = 11
    let q = g.constant(Tensor::from_vec(&[1, 1], vec![7.0]).unwrap());
    let d = g.constant(Tensor::from_vec(&[1, 1], vec![11.0]).unwrap());
    let w0 = g.constant(Tensor::from_vec(&[3, 1], vec![2.0, 3.0, 5.0]).unwrap());
    let s = trilinear(&mut g, q, d, w0).unwrap();
    assert_eq!(g.value(s).item(), 2.0 * 7.0 + 3.0 * 11.0 + 5.0 * 77.0);

    let mut rng = seeded(5);
    let (qt, dt, wt) = (random(&[3, 2], &mut rng), random(&[4, 2], &mut rng), random(&[6, 1], &mut rng));
    let q = g.constant(qt.clone());
    let d = g.constant(dt.clone());
    let w0 = g.constant(wt.clone());
    let s = trilinear(&mut g, q, d, w0).unwrap();
    assert_eq!(g.shape(s), &[4, 3]);
    let want = trilinear_oracle(&rows(&qt), &rows(&dt), wt.data());
    assert!(close(&rows(g.value(s)), &want, 1e-12));
}

#[test]
fn single_question_token_is_copied_to_every_row() {
    let mut rng = seeded(6);
    let mut g: Graph<'_, f64> = Graph::new();
    let qt = random(&[1, 4], &mut rng);
    let q = encoded(&mut g, qt.clone());
    let d = encoded(&mut g, random(&[5, 4], &mut rng));
    let s = g.constant(random(&[5, 1], &mut rng));
    let (a, _) = context_query_attention(&mut g, s, &q, &d).unwrap();
    for i in 0..5 {
        assert!(close(&[g.value(a).row(i).to_vec()], &[qt.row(0).to_vec()], 1e-12));
    }
}

#[test]
fn query_to_context_attention_matches_dense_formula() {
    let mut rng = seeded(8);
    let mut g: Graph<'_, f64> = Graph::new();
    let (qt, dt, st) = (random(&[2, 3], &mut rng), random(&[3, 3], &mut rng), random(&[3, 2], &mut rng));
    let q = encoded(&mut g, qt.clone());
    let d = encoded(&mut g, dt.clone());
    let s = g.constant(st.clone());
    let (a, b) = context_query_attention(&mut g, s, &q, &d).unwrap();

    let sr = rows(&st);
    let row_soft: Vec<Vec<f64>> = sr.iter().map(|r| softmax(r)).collect();
    let cols: Vec<Vec<f64>> = (0..2).map(|j| softmax(&sr.iter().map(|r| r[j]).collect::<Vec<_>>())).collect();
    // col_soft[i][j] = softmax over i of S[i][j]
    let col_soft: Vec<Vec<f64>> = (0..3).map(|i| (0..2).map(|j| cols[j][i]).collect()).collect();
    let col_soft_t: Vec<Vec<f64>> = (0..2).map(|j| (0..3).map(|i| col_soft[i][j]).collect()).collect();
    let want_a = matmul(&row_soft, &rows(&qt));
    let want_b = matmul(&matmul(&row_soft, &col_soft_t), &rows(&dt));
    assert!(close(&rows(g.value(a)), &want_a, 1e-12));
    assert!(close(&rows(g.value(b)), &want_b, 1e-12));
}

#[test]
fn model_encoder_passes_share_one_block() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut rng = seeded(9);
    let mut g = Graph::with_params(&s);
    let d = encoded(&mut g, random(&[5, 4], &mut rng));
    let a = g.constant(random(&[5, 4], &mut rng));
    let b = g.constant(random(&[5, 4], &mut rng));
    let e = model_encode(&mut g, &d, a, b, &cfg).unwrap();
    let names: Vec<String> = g.bound_params().map(|(n, _)| n.to_string()).collect();
    let block: Vec<&String> = names.iter().filter(|n| n.starts_with("ans.block")).collect();
    let expected = param_shapes(&cfg, N_WORDS, N_CHARS)
        .into_iter()
        .filter(|(n, _)| n.starts_with("ans.block."))
        .count();
    assert_eq!(block.len(), expected);
    assert!(block.iter().all(|n| n.starts_with("ans.block.")));
    let e0 = rows(g.value(e[0]));
    let (e1, e2) = (rows(g.value(e[1])), rows(g.value(e[2])));
    assert!(!close(&e0, &e1, 1e-9) && !close(&e1, &e2, 1e-9));

    let za = g.constant(Tensor::zeros(&[5, 4]));
    let zb = g.constant(Tensor::zeros(&[5, 4]));
    let z = model_encode(&mut g, &d, za, zb, &cfg).unwrap();
    assert!(!close(&rows(g.value(z[0])), &e0, 1e-9));
}

#[test]
fn decode_examples() {
    let one = decode_span(vec![1.0], vec![1.0], 20, DecodeMode::Constrained);
    assert_eq!((one.start, one.end), (0, 0));
    assert_eq!(one.score, 1.0);
    let mut ps = vec![0.01; 8];
    let mut pe = vec![0.01; 8];
    ps[2] = 0.9;
    pe[5] = 0.9;
    let p = decode_span(ps, pe, 20, DecodeMode::Constrained);
    assert_eq!((p.start, p.end), (2, 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]
    #[test]
    fn constrained_decoding_finds_the_best_legal_pair(
        ps in prop::collection::vec(0.0f64..1.0, 1..15),
        seed in any::<u64>(),
        max_len in 1usize..8,
    ) {
        let n = ps.len();
        let mut rng = seeded(seed);
        let pe: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let got = decode_span(ps.clone(), pe.clone(), max_len, DecodeMode::Constrained);
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            for j in i..n {
                if j - i < max_len {
                    best = best.max(ps[i] * pe[j]);
                }
            }
        }
        prop_assert!(got.start <= got.end && got.end - got.start < max_len);
        prop_assert_eq!(ps[got.start] * pe[got.end], best);
    }
}

// ---- controller ------------------------------------------------------------

fn controller(g: &mut Graph<'_, f64>, ctx: &[usize], q: &[usize], cfg: &ModelConfig, mask: &[bool; 3]) -> (Var, Var, Var) {
    let c = encode_tokens(g, &toks(ctx, cfg.char_width), cfg, "enc").unwrap();
    let qe = encode_tokens(g, &toks(q, cfg.char_width), cfg, "enc").unwrap();
    let seq = state_sequence(g, c.rows, qe.rows, 512).unwrap();
    let ha = run_gru(g, seq, "actor").unwrap();
    let lp = actor_log_probs(g, ha, mask).unwrap();
    let hc = run_gru(g, seq, "critic").unwrap();
    let v = critic_value(g, hc).unwrap();
    (seq, lp, v)
}

#[test]
fn untrained_controller_is_uniform_with_zero_value() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut g = Graph::with_params(&s);
    let (seq, lp, v) = controller(&mut g, &[3, 4, 5, 6], &[7, 8], &cfg, &[false; 3]);
    assert_eq!(g.shape(seq), &[4 + 1 + 2, cfg.d_model]);
    for l in g.value(lp).data() {
        assert!((l.exp() - 1.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(g.value(v).item(), 0.0);
    let (_, lp, _) = controller(&mut g, &[3, 4, 5, 6], &[7, 8], &cfg, &[false, true, false]);
    let p: Vec<f64> = g.value(lp).data().iter().map(|l| l.exp()).collect();
    assert!((p[0] - 0.5).abs() < 1e-12 && p[1] == 0.0 && (p[2] - 0.5).abs() < 1e-12);
}

#[test]
fn long_contexts_keep_head_and_tail() {
    let mut s = ParamStore::new();
    s.insert("state.sep", Tensor::from_vec(&[1, 1], vec![-1.0]).unwrap());
    let mut g2 = Graph::with_params(&s);
    let ctx = g2.constant(Tensor::from_vec(&[7, 1], (0..7).map(f64::from).collect()).unwrap());
    let q = g2.constant(Tensor::from_vec(&[2, 1], vec![10.0, 11.0]).unwrap());
    let seq = state_sequence(&mut g2, ctx, q, 4).unwrap();
    assert_eq!(g2.value(seq).data(), &[0.0, 1.0, 5.0, 6.0, -1.0, 10.0, 11.0]);
    let seq = state_sequence(&mut g2, ctx, q, 16).unwrap();
    assert_eq!(g2.value(seq).rows(), 7 + 1 + 2);
}

#[test]
fn different_contexts_give_different_states() {
    let cfg = tiny_model();
    let s = store(&cfg);
    let mut g = Graph::with_params(&s);
    let a = encode_tokens(&mut g, &toks(&[3, 4, 5], cfg.char_width), &cfg, "enc").unwrap();
    let b = encode_tokens(&mut g, &toks(&[3, 9, 5], cfg.char_width), &cfg, "enc").unwrap();
    let q = encode_tokens(&mut g, &toks(&[7], cfg.char_width), &cfg, "enc").unwrap();
    let sa = state_sequence(&mut g, a.rows, q.rows, 512).unwrap();
    let sb = state_sequence(&mut g, b.rows, q.rows, 512).unwrap();
    let ha = run_gru(&mut g, sa, "actor").unwrap();
    let hb = run_gru(&mut g, sb, "actor").unwrap();
    assert!(g.value(ha).max_abs_diff(g.value(hb)) > 1e-9);
}

fn scalar(g: &mut Graph<'_, f64>, v: f64) -> Var {
    g.leaf(Tensor::from_vec(&[1, 1], vec![v]).unwrap(), true)
}

#[test]
fn actor_critic_hand_cases() {
    // r = 1, v = 0: δ = 1, actor = −log π, critic = 1
    let mut g: Graph<'_, f64> = Graph::new();
    let lp = scalar(&mut g, (0.25f64).ln());
    let v = scalar(&mut g, 0.0);
    let l = actor_critic_loss(&mut g, &[StepTerms { log_prob: Some(lp), value: v, reward: 1.0 }], 0.9, None).unwrap();
    assert!((g.value(l.actor).item() - (-(0.25f64).ln())).abs() < 1e-12);
    assert!((g.value(l.critic).item() - 1.0).abs() < 1e-12);
    assert_eq!(l.deltas, vec![1.0]);

    // v already equals the return: nothing to learn
    let v = scalar(&mut g, 0.5);
    let lp = scalar(&mut g, (0.5f64).ln());
    let l = actor_critic_loss(&mut g, &[StepTerms { log_prob: Some(lp), value: v, reward: 0.5 }], 0.9, None).unwrap();
    assert_eq!(g.value(l.actor).item(), 0.0);
    assert_eq!(g.value(l.critic).item(), 0.0);

    // two steps: δ0 = 0 + 0.9·v1 − v0, δ1 = r − v1
    let (v0, v1) = (scalar(&mut g, 0.2), scalar(&mut g, 0.4));
    let (l0, l1) = (scalar(&mut g, -1.0), scalar(&mut g, -2.0));
    let steps = [
        StepTerms { log_prob: Some(l0), value: v0, reward: 0.0 },
        StepTerms { log_prob: Some(l1), value: v1, reward: 1.0 },
    ];
    let l = actor_critic_loss(&mut g, &steps, 0.9, None).unwrap();
    let (d0, d1) = (0.9 * 0.4 - 0.2, 1.0 - 0.4);
    assert!((l.deltas[0] - d0).abs() < 1e-12 && (l.deltas[1] - d1).abs() < 1e-12);
    assert!((g.value(l.actor).item() - (1.0 * d0 + 2.0 * d1)).abs() < 1e-12);
    assert!((g.value(l.critic).item() - (d0 * d0 + d1 * d1)).abs() < 1e-12);
}

#[test]
fn advantage_is_not_differentiated_through() {
    let mut g: Graph<'_, f64> = Graph::new();
    let lp = scalar(&mut g, -0.7);
    let v = scalar(&mut g, 0.3);
    let l = actor_critic_loss(&mut g, &[StepTerms { log_prob: Some(lp), value: v, reward: 1.0 }], 0.9, None).unwrap();
    let grads = g.backward(l.actor).unwrap();
    assert_eq!(grads.wrt(&g, v).item(), 0.0);
    assert!((grads.wrt(&g, lp).item() - (-0.7)).abs() < 1e-12);
    // critic target is semi-gradient: d/dv (r − v)² = −2(r − v)
    let grads = g.backward(l.critic).unwrap();
    assert!((grads.wrt(&g, v).item() - (-2.0 * 0.7)).abs() < 1e-12);
    assert_eq!(grads.wrt(&g, lp).item(), 0.0);
}

#[test]
fn actor_loss_gradient_matches_finite_differences_with_fixed_advantages() {
    let cfg = tiny_model();
    let mut s = store(&cfg);
    let mut rng = seeded(12);
    for name in ["actor.head.w", "actor.head.b", "critic.head.w", "critic.head.b"] {
        let shape = s.value(name).unwrap().shape().to_vec();
        *s.value_mut(name).unwrap() = uniform(&shape, 0.5, &mut rng);
    }
    let fixed = FixedTargets {
        deltas: vec![0.3, -0.8],
        targets: vec![0.5, 1.0],
    };
    let f = |g: &mut Graph<'_, f64>| -> cfqa::tensor::Result<Var> {
        let mut steps = Vec::new();
        for (i, ctx) in [[3usize, 4, 5], [6, 7, 8]].iter().enumerate() {
            let (_, lp, v) = controller(g, ctx, &[9], &cfg, &[false; 3]);
            let pick = g.pick(lp, i + 1)?;
            steps.push(StepTerms { log_prob: Some(pick), value: v, reward: 0.0 });
        }
        let l = actor_critic_loss(g, &steps, 0.9, Some(&fixed)).map_err(|e| cfqa::tensor::TensorError::Config(e.to_string()))?;
        g.add(l.actor, l.critic)
    };
    let report = check_params(
        &mut s,
        f,
        &GradCheckConfig {
            max_elems: Some(6),
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
    assert!(report.checked > 50);
}
