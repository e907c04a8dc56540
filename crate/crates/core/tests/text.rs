use std::io::Cursor;

use cfqa::text::dataset::read_jsonl;
use cfqa::text::vocab::{PAD, SEP, UNK};
use cfqa::text::{
    build_vocab, detokenize, find_subsequence, gen_synthetic, load_dataset, prepare, save_dataset, tokenize, SynthConfig,
};
use cfqa::CfqaError;

#[test]
fn tokenize_examples() {
    let d = tokenize("A b. C d.").unwrap();
    assert_eq!(d, vec![vec!["a", "b"], vec!["c", "d"]]);
    assert_eq!(tokenize("Hello").unwrap(), vec![vec!["hello"]]);
    assert!(tokenize("   \n ").is_err());
}

#[test]
fn detokenize_is_a_fixed_point_on_synthetic_docs() {
    let corpus = gen_synthetic(
        &SynthConfig {
            n_docs: 1000,
            sentences: (1, 12),
            ..SynthConfig::default()
        },
        11,
    )
    .unwrap();
    for ex in &corpus.examples {
        let once = detokenize(&tokenize(&ex.document).unwrap());
        let twice = detokenize(&tokenize(&once).unwrap());
        assert_eq!(once, twice, "{}", ex.id);
    }
}

#[test]
fn dataset_loading_cases() {
    assert!(read_jsonl(Cursor::new("")).unwrap().is_empty());

    let one = r#"{"id":"q1","document":"The cat sat.","question":"who sat","answers":["cat"]}"#;
    let got = read_jsonl(Cursor::new(one)).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].id, "q1");

    let bad = format!("{one}\n{{not json\n");
    match read_jsonl(Cursor::new(bad)) {
        Err(CfqaError::MalformedLine { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a malformed-line error, got {other:?}"),
    }

    let missing = r#"{"id":"q1","document":"x.","answers":["x"]}"#;
    assert!(matches!(
        read_jsonl(Cursor::new(missing)),
        Err(CfqaError::Schema { line: 1, .. })
    ));

    // an answer absent from the document is legal
    let unextractable = r#"{"id":"q2","document":"The cat sat.","question":"who","answers":["dog"]}"#;
    let raws = read_jsonl(Cursor::new(unextractable)).unwrap();
    let vocab = build_vocab(&raws).unwrap();
    let ex = prepare(&raws[0], &vocab, 16, 0).unwrap();
    assert!(!ex.contains_answer(&ex.doc));
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let corpus = gen_synthetic(&SynthConfig::default(), 3).unwrap();
    save_dataset(&path, &corpus.examples).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), corpus.examples);
    assert!(load_dataset(&dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn vocab_round_trip_and_unknowns() {
    let corpus = gen_synthetic(&SynthConfig::default(), 5).unwrap();
    let vocab = build_vocab(&corpus.examples).unwrap();
    for id in SEP + 1..vocab.n_words() {
        let w = vocab.word(id).unwrap();
        assert_eq!(vocab.id(w), id);
    }
    assert_eq!(vocab.id("never-seen-word"), UNK);
    assert_ne!(PAD, UNK);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.json");
    vocab.save(&p).unwrap();
    let back = cfqa::text::Vocab::load(&p).unwrap();
    assert_eq!(back.n_words(), vocab.n_words());
    assert_eq!(back.n_chars(), vocab.n_chars());
}

#[test]
fn synthetic_generation_is_deterministic() {
    let cfg = SynthConfig::default();
    let a = gen_synthetic(&cfg, 9).unwrap();
    let b = gen_synthetic(&cfg, 9).unwrap();
    assert_eq!(a.examples, b.examples);
    let c = gen_synthetic(&cfg, 10).unwrap();
    assert_ne!(a.examples, c.examples);
}

#[test]
fn without_distractors_the_answer_occurs_in_exactly_one_sentence() {
    let cfg = SynthConfig {
        distractor_rate: 0.0,
        ..SynthConfig::default()
    };
    let corpus = gen_synthetic(&cfg, 1).unwrap();
    for (ex, meta) in corpus.examples.iter().zip(&corpus.meta) {
        let doc = tokenize(&ex.document).unwrap();
        let answer = cfqa::text::tokenize_flat(&ex.answers[0]).unwrap();
        let hits: Vec<usize> = doc
            .iter()
            .enumerate()
            .filter(|(_, s)| find_subsequence(s, &answer).is_some())
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hits, vec![meta.gold_sentence], "{}", ex.id);
        assert!(meta.distractors.is_empty());
    }
}

#[test]
fn planted_answers_are_recoverable() {
    let cfg = SynthConfig {
        n_docs: 300,
        sentences: (1, 15),
        distractor_rate: 0.6,
        ..SynthConfig::default()
    };
    for ex in gen_synthetic(&cfg, 2).unwrap().examples {
        let flat: Vec<String> = tokenize(&ex.document).unwrap().concat();
        let answer = cfqa::text::tokenize_flat(&ex.answers[0]).unwrap();
        assert!(find_subsequence(&flat, &answer).is_some(), "{}", ex.id);
    }
}

#[test]
fn distractor_fraction_matches_the_independence_formula() {
    let n = 10;
    let cfg = SynthConfig {
        n_docs: 1000,
        sentences: (n, n),
        distractor_rate: 0.5,
        ..SynthConfig::default()
    };
    let corpus = gen_synthetic(&cfg, 4).unwrap();
    // count from the documents themselves: sentences holding the question key
    let mut with = 0;
    for ex in &corpus.examples {
        let doc = tokenize(&ex.document).unwrap();
        let key = cfqa::text::tokenize_flat(&ex.question).unwrap();
        let holders = doc.iter().filter(|s| find_subsequence(s, &key).is_some()).count();
        if holders > 1 {
            with += 1;
        }
    }
    let measured = with as f64 / 1000.0;
    let expected = 1.0 - 0.5f64.powi(n as i32 - 1);
    assert!((measured - expected).abs() <= 0.03, "measured {measured}, expected {expected}");
}

#[test]
fn infeasible_configs_are_rejected() {
    let cfg = SynthConfig {
        tokens: (3, 3),
        ..SynthConfig::default()
    };
    assert!(matches!(gen_synthetic(&cfg, 0), Err(CfqaError::Config(_))));
    let cfg = SynthConfig {
        vocab_size: 20,
        ..SynthConfig::default()
    };
    assert!(gen_synthetic(&cfg, 0).is_err());
}

#[test]
fn truncation_caps_documents() {
    let corpus = gen_synthetic(&SynthConfig::default(), 6).unwrap();
    let vocab = build_vocab(&corpus.examples).unwrap();
    let ex = prepare(&corpus.examples[0], &vocab, 16, 7).unwrap();
    assert_eq!(ex.doc.n_tokens(), 7);
    let full = prepare(&corpus.examples[0], &vocab, 16, 0).unwrap();
    assert!(full.doc.n_tokens() > 7);
}
