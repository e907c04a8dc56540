//! Removing a suspected false-positive span from the context.

use crate::error::{CfqaError, Result};
use crate::text::TokenDoc;

/// What an excision removed, in the coordinates of the context it was
/// applied to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Excision {
    /// First sentence touched by the span.
    pub sentence: usize,
    /// Inclusive flat token span.
    pub start: usize,
    pub end: usize,
    /// Surviving tokens of the touched sentences before and after the span.
    pub before_len: usize,
    pub after_len: usize,
}

/// Delete flat tokens `start..=end`. What survives of the sentences the span
/// touches becomes one sentence (dropped if empty); other sentences are
/// untouched.
pub fn excise_span(ctx: &TokenDoc, start: usize, end: usize) -> Result<(TokenDoc, Excision)> {
    let n = ctx.n_tokens();
    if start > end || end >= n {
        return Err(CfqaError::Input(format!("span ({start}, {end}) outside a context of {n} tokens")));
    }
    if end - start + 1 == n {
        return Err(CfqaError::ExcisionRefused);
    }
    let offsets = ctx.sentence_offsets();
    let sentence_of = |pos: usize| offsets.partition_point(|&o| o <= pos) - 1;
    let (first, last) = (sentence_of(start), sentence_of(end));
    let sents = ctx.sentences();

    let before = &sents[first][..start - offsets[first]];
    let after = &sents[last][end - offsets[last] + 1..];
    let mut out = Vec::with_capacity(sents.len());
    out.extend(sents[..first].iter().cloned());
    if !before.is_empty() || !after.is_empty() {
        out.push(before.iter().chain(after).cloned().collect());
    }
    out.extend(sents[last + 1..].iter().cloned());
    let excision = Excision {
        sentence: first,
        start,
        end,
        before_len: before.len(),
        after_len: after.len(),
    };
    Ok((TokenDoc::new(out)?, excision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, Vocab};

    fn doc(text: &str) -> (TokenDoc, Vocab) {
        let raw = tokenize(text).unwrap();
        let v = Vocab::build(raw.iter().flatten().map(String::as_str));
        (TokenDoc::from_raw(&raw, &v, 4).unwrap(), v)
    }

    fn words(d: &TokenDoc, v: &Vocab) -> Vec<Vec<String>> {
        d.sentences()
            .iter()
            .map(|s| s.iter().map(|t| v.word(t.id).unwrap().to_string()).collect())
            .collect()
    }

    #[test]
    fn whole_sentence_removed() {
        let (d, v) = doc("x y. p q r.");
        let (out, ex) = excise_span(&d, 0, 1).unwrap();
        assert_eq!(words(&out, &v), vec![vec!["p", "q", "r"]]);
        assert_eq!((ex.before_len, ex.after_len), (0, 0));
    }

    #[test]
    fn interior_splice() {
        let (d, v) = doc("a b c d e.");
        let (out, ex) = excise_span(&d, 1, 3).unwrap();
        assert_eq!(words(&out, &v), vec![vec!["a", "e"]]);
        assert_eq!(ex.before_len + ex.after_len + 3, 5);
    }

    #[test]
    fn cross_sentence_remnants_merge() {
        let (d, v) = doc("a b. c d. e f.");
        let (out, _) = excise_span(&d, 1, 4).unwrap();
        assert_eq!(words(&out, &v), vec![vec!["a", "f"]]);
    }

    #[test]
    fn emptying_is_refused() {
        let (d, _) = doc("a b. c.");
        assert!(matches!(excise_span(&d, 0, 2), Err(CfqaError::ExcisionRefused)));
        assert!(excise_span(&d, 2, 3).is_err());
    }
}
