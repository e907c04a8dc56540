use crate::error::{CfqaError, Result};
use crate::text::tokenize::RawDoc;
use crate::text::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    /// Character ids, fixed width.
    pub chars: Vec<usize>,
    /// (sentence, position) in the original document.
    pub source: (usize, usize),
}

/// A context: non-empty sentences of tokens, each traceable to the original
/// document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenDoc {
    sentences: Vec<Vec<Token>>,
}

impl TokenDoc {
    pub fn new(sentences: Vec<Vec<Token>>) -> Result<Self> {
        if sentences.is_empty() || sentences.iter().any(Vec::is_empty) {
            return Err(CfqaError::Input("a context needs at least one non-empty sentence".into()));
        }
        Ok(Self { sentences })
    }

    pub fn from_raw(raw: &RawDoc, vocab: &Vocab, char_width: usize) -> Result<Self> {
        let sentences = raw
            .iter()
            .enumerate()
            .map(|(si, s)| {
                s.iter()
                    .enumerate()
                    .map(|(ti, w)| Token {
                        id: vocab.id(w),
                        chars: vocab.char_ids(w, char_width),
                        source: (si, ti),
                    })
                    .collect()
            })
            .collect();
        Self::new(sentences)
    }

    pub fn sentences(&self) -> &[Vec<Token>] {
        &self.sentences
    }

    pub fn into_sentences(self) -> Vec<Vec<Token>> {
        self.sentences
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.sentences.iter().flatten()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens().map(|t| t.id).collect()
    }

    /// Sentences at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let picked = indices
            .iter()
            .map(|&i| {
                self.sentences
                    .get(i)
                    .cloned()
                    .ok_or_else(|| CfqaError::Input(format!("sentence {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(picked)
    }

    /// Flat start offset of every sentence.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        self.sentences
            .iter()
            .scan(0, |acc, s| {
                let start = *acc;
                *acc += s.len();
                Some(start)
            })
            .collect()
    }

    /// Drop everything after the first `max` tokens.
    pub fn truncated(&self, max: usize) -> Result<Self> {
        let mut left = max;
        let mut out = Vec::new();
        for s in &self.sentences {
            if left == 0 {
                break;
            }
            let take = s.len().min(left);
            out.push(s[..take].to_vec());
            left -= take;
        }
        Self::new(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QAExample {
    pub id: String,
    pub doc: TokenDoc,
    /// The tokenized source document; provenance indexes into it.
    pub original: RawDoc,
    pub question: Vec<Token>,
    pub question_words: Vec<String>,
    /// Gold answers as token strings, each non-empty.
    pub answers: Vec<Vec<String>>,
}

impl QAExample {
    pub fn word(&self, t: &Token) -> &str {
        &self.original[t.source.0][t.source.1]
    }

    pub fn words(&self, ctx: &TokenDoc) -> Vec<&str> {
        ctx.tokens().map(|t| self.word(t)).collect()
    }

    /// First gold answer (in answer order) occurring in `ctx`, as a flat
    /// inclusive token span at its first occurrence.
    pub fn gold_span(&self, ctx: &TokenDoc) -> Option<(usize, usize)> {
        let words = self.words(ctx);
        self.answers.iter().find_map(|a| {
            find_subsequence(&words, a).map(|s| (s, s + a.len() - 1))
        })
    }

    pub fn contains_answer(&self, ctx: &TokenDoc) -> bool {
        self.gold_span(ctx).is_some()
    }
}

pub fn find_subsequence<A: AsRef<str>, B: AsRef<str>>(hay: &[A], needle: &[B]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&s| {
        hay[s..s + needle.len()]
            .iter()
            .zip(needle)
            .all(|(a, b)| a.as_ref() == b.as_ref())
    })
}
