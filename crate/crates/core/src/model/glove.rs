//! Pretrained word vectors in the plain `word v1 v2 ...` text format.

use std::io::{BufRead, BufReader};
use std::path::Path;

use cfqa_tensor::{ParamStore, Scalar};

use crate::error::{CfqaError, Result};
use crate::text::vocab::UNK;
use crate::text::Vocab;

/// Overwrite the rows of `emb.word` for every vocabulary word found in the
/// file. Returns how many rows were set. Words missing from the file keep
/// their random initialisation.
pub fn load_glove<T: Scalar>(path: &Path, vocab: &Vocab, store: &mut ParamStore<T>) -> Result<usize> {
    let file = std::fs::File::open(path).map_err(|e| CfqaError::io(path, e))?;
    let table = store.value_mut("emb.word")?;
    let width = table.cols();
    let mut hits = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CfqaError::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let id = vocab.id(word);
        if id == UNK {
            continue;
        }
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CfqaError::MalformedLine { line: i + 1, msg: e.to_string() })?;
        if values.len() != width {
            return Err(CfqaError::Config(format!(
                "vector for `{word}` has {} values but d_word is {width}",
                values.len()
            )));
        }
        let data = table.data_mut();
        for (slot, v) in data[id * width..(id + 1) * width].iter_mut().zip(values) {
            *slot = T::of(v);
        }
        hits += 1;
    }
    Ok(hits)
}
