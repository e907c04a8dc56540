use crate::error::{CfqaError, Result};

/// Sentences of lowercased word tokens, before vocabulary lookup.
pub type RawDoc = Vec<Vec<String>>;

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split text into sentences and tokens.
///
/// A sentence ends at a run of `.`, `!` or `?` followed by whitespace or the
/// end of the text; the terminators are dropped. Other ASCII punctuation
/// becomes a token of its own. A terminator inside a word (`3.5`) stays.
pub fn tokenize(text: &str) -> Result<RawDoc> {
    let mut doc = Vec::new();
    let mut sentence = Vec::new();
    let mut word = String::new();

    let end_word = |word: &mut String, sentence: &mut Vec<String>, doc: &mut RawDoc| {
        let trimmed = word.trim_end_matches(is_terminator);
        let ends_sentence = trimmed.len() < word.len();
        if !trimmed.is_empty() {
            sentence.push(trimmed.to_string());
        }
        word.clear();
        if ends_sentence && !sentence.is_empty() {
            doc.push(std::mem::take(sentence));
        }
    };

    for c in text.chars() {
        if c.is_whitespace() {
            end_word(&mut word, &mut sentence, &mut doc);
        } else if c.is_ascii_punctuation() && !is_terminator(c) {
            if !word.is_empty() {
                sentence.push(std::mem::take(&mut word));
            }
            sentence.push(c.to_string());
        } else {
            word.extend(c.to_lowercase());
        }
    }
    end_word(&mut word, &mut sentence, &mut doc);
    if !sentence.is_empty() {
        doc.push(sentence);
    }
    if doc.is_empty() {
        return Err(CfqaError::Input("text contains no tokens".into()));
    }
    Ok(doc)
}

/// Tokens joined by spaces, each sentence closed with a period.
pub fn detokenize(doc: &[Vec<String>]) -> String {
    doc.iter()
        .map(|s| format!("{}.", s.join(" ")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A question or answer string as one flat token list.
pub fn tokenize_flat(text: &str) -> Result<Vec<String>> {
    Ok(tokenize(text)?.into_iter().flatten().collect())
}
