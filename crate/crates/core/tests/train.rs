use cfqa::model::init_params;
use cfqa::tensor::checkpoint;
use cfqa::text::{build_vocab, gen_synthetic, prepare_all, QAExample, SynthConfig, Vocab};
use cfqa::train::{load_checkpoint, CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE};
use cfqa::{RunConfig, Session};

fn data(n: usize, seed: u64) -> (Vec<QAExample>, Vocab) {
    let c = gen_synthetic(
        &SynthConfig {
            n_docs: n,
            sentences: (3, 6),
            distractor_rate: 0.3,
            ..SynthConfig::default()
        },
        seed,
    )
    .unwrap();
    let vocab = build_vocab(&c.examples).unwrap();
    let exs = prepare_all(&c.examples, &vocab, 16, 0).unwrap();
    (exs, vocab)
}

fn small_config(updates: usize) -> RunConfig {
    let mut cfg = RunConfig::preset("desk").unwrap();
    cfg.updates = updates;
    cfg.batch_size = 8;
    cfg.seed = 3;
    cfg
}

fn train(cfg: RunConfig, exs: &[QAExample], vocab: &Vocab) -> (Session<f32>, Vec<cfqa::UpdateLog>) {
    let mut s = Session::<f32>::new(cfg, vocab.clone()).unwrap();
    let mut logs = Vec::new();
    s.fit(exs, &[], |l| {
        logs.push(l.clone());
        Ok(())
    })
    .unwrap();
    (s, logs)
}

#[test]
fn zero_updates_saves_the_initialization_bit_exactly() {
    let (exs, vocab) = data(10, 1);
    let cfg = small_config(0);
    let (s, logs) = train(cfg.clone(), &exs, &vocab);
    assert!(logs.is_empty());
    let init = init_params::<f32>(&cfg.model(), vocab.n_words(), vocab.n_chars(), cfg.seed);
    assert!(s.store.bit_eq(&init));

    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path()).unwrap();
    for f in [CHECKPOINT_FILE, VOCAB_FILE, CONFIG_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (back, hash) = load_checkpoint::<f32>(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(back.bit_eq(&init));
    assert_eq!(hash, s.config_hash());
    let bytes = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(checkpoint::to_bytes(&back, &hash), bytes);
    assert_eq!(RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap(), cfg);
}

#[test]
fn training_is_deterministic_and_thread_count_free() {
    let (exs, vocab) = data(24, 2);
    let (a, la) = train(small_config(3), &exs, &vocab);
    let (b, lb) = train(small_config(3), &exs, &vocab);
    assert!(a.store.bit_eq(&b.store));
    assert_eq!(la, lb);
    let mut threaded = small_config(3);
    threaded.threads = 3;
    let (c, lc) = train(threaded, &exs, &vocab);
    assert!(a.store.bit_eq(&c.store));
    assert_eq!(la, lc);
    let mut other = small_config(3);
    other.seed = 4;
    let (d, _) = train(other, &exs, &vocab);
    assert!(!a.store.bit_eq(&d.store));
}

#[test]
fn mismatched_checkpoints_are_refused() {
    let (_, vocab) = data(10, 1);
    let cfg = small_config(0);
    let s = Session::<f32>::new(cfg.clone(), vocab.clone()).unwrap();
    let mut wider = cfg.clone();
    wider.gru_hidden = 32;
    let err = Session::<f32>::from_parts(wider.clone(), vocab.clone(), s.store.clone(), s.config_hash(), false);
    assert!(matches!(err, Err(cfqa::CfqaError::HashMismatch { .. })));
    assert!(Session::<f32>::from_parts(wider, vocab.clone(), s.store.clone(), s.config_hash(), true).is_ok());
    assert!(Session::<f32>::from_parts(cfg, vocab, s.store.clone(), s.config_hash(), false).is_ok());
}

#[test]
fn a_small_training_set_is_memorized() {
    let (exs, vocab) = data(20, 7);
    let mut cfg = small_config(120);
    cfg.batch_size = 10;
    let (s, logs) = train(cfg, &exs, &vocab);

    let mean = |xs: &[cfqa::UpdateLog]| xs.iter().map(|l| l.span_loss).sum::<f64>() / xs.len() as f64;
    let (early, late) = (mean(&logs[..10]), mean(&logs[40..50]));
    assert!(late < early, "span loss {early} -> {late} over the first 50 updates");

    let eval = s.evaluate(&exs).unwrap();
    assert_eq!(eval.metrics.em, 1.0, "{:?}", eval.metrics);
}
