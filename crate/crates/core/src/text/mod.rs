//! Tokenization, vocabularies, dataset files and the synthetic corpus.

pub mod dataset;
pub mod doc;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use dataset::{build_vocab, load_dataset, prepare, prepare_all, save_dataset, RawExample};
pub use doc::{find_subsequence, QAExample, Token, TokenDoc};
pub use synth::{gen_synthetic, Corpus, SynthConfig, SynthMeta};
pub use tokenize::{detokenize, tokenize, tokenize_flat, RawDoc};
pub use vocab::Vocab;
