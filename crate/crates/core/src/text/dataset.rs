use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CfqaError, Result};
use crate::text::doc::{QAExample, Token, TokenDoc};
use crate::text::tokenize::{tokenize, tokenize_flat};
use crate::text::vocab::Vocab;

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub document: String,
    pub question: String,
    pub answers: Vec<String>,
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CfqaError::MalformedLine {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| CfqaError::MalformedLine {
            line: line_no,
            msg: e.to_string(),
        })?;
        let ex: RawExample = serde_json::from_value(value).map_err(|e| CfqaError::Schema {
            line: line_no,
            msg: e.to_string(),
        })?;
        if ex.answers.is_empty() {
            return Err(CfqaError::Schema {
                line: line_no,
                msg: "`answers` must list at least one answer".into(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<RawExample>> {
    let f = std::fs::File::open(path).map_err(|e| CfqaError::io(path, e))?;
    read_jsonl(BufReader::new(f))
}

pub fn write_jsonl(mut w: impl Write, examples: &[RawExample]) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_dataset(path: &Path, examples: &[RawExample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| CfqaError::io(path, e))?;
    write_jsonl(std::io::BufWriter::new(f), examples).map_err(|e| CfqaError::io(path, e))
}

/// Vocabulary over every document, question and answer token.
pub fn build_vocab(examples: &[RawExample]) -> Result<Vocab> {
    let mut v = Vocab::empty();
    for ex in examples {
        for w in tokenize(&ex.document)?.iter().flatten() {
            v.add_word(w);
        }
        for w in tokenize_flat(&ex.question)? {
            v.add_word(&w);
        }
        for a in &ex.answers {
            for w in tokenize_flat(a)? {
                v.add_word(&w);
            }
        }
    }
    Ok(v)
}

/// Tokenize and index one example. `max_doc_tokens == 0` keeps the whole
/// document.
pub fn prepare(raw: &RawExample, vocab: &Vocab, char_width: usize, max_doc_tokens: usize) -> Result<QAExample> {
    let ctx = |e: CfqaError| CfqaError::Input(format!("example {}: {e}", raw.id));
    let original = tokenize(&raw.document).map_err(ctx)?;
    let mut doc = TokenDoc::from_raw(&original, vocab, char_width)?;
    if max_doc_tokens > 0 && doc.n_tokens() > max_doc_tokens {
        doc = doc.truncated(max_doc_tokens)?;
    }
    let question_words = tokenize_flat(&raw.question).map_err(ctx)?;
    let question = question_words
        .iter()
        .enumerate()
        .map(|(i, w)| Token {
            id: vocab.id(w),
            chars: vocab.char_ids(w, char_width),
            source: (0, i),
        })
        .collect();
    let answers = raw
        .answers
        .iter()
        .map(|a| tokenize_flat(a).map_err(ctx))
        .collect::<Result<Vec<_>>>()?;
    Ok(QAExample {
        id: raw.id.clone(),
        doc,
        original,
        question,
        question_words,
        answers,
    })
}

pub fn prepare_all(raws: &[RawExample], vocab: &Vocab, char_width: usize, max_doc_tokens: usize) -> Result<Vec<QAExample>> {
    raws.iter()
        .map(|r| prepare(r, vocab, char_width, max_doc_tokens))
        .collect()
}
