//! Greedy longest-match tokenizers with character offsets, and span
//! alignment between two tokenizations of the same text.
//!
//! Every tokenizer shares a 96-symbol base alphabet (`'\n'` and printable
//! ASCII `' '..='~'`, ids 0..96). A vocab file adds multi-character merge
//! pieces, one per line, which receive ids from 96 upward in file order.
//! Lines are taken verbatim (leading and trailing spaces are significant);
//! only the line terminator is stripped and empty lines are skipped.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRIMARY_VOCAB: &str = include_str!("../vocab/primary.txt");
const AUXILIARY_VOCAB: &str = include_str!("../vocab/auxiliary.txt");

pub const PRIMARY_TOKENIZER_ID: &str = "toy-primary-v1";
pub const AUXILIARY_TOKENIZER_ID: &str = "toy-auxiliary-v1";

fn base_alphabet() -> impl Iterator<Item = char> {
    std::iter::once('\n').chain((b' '..=b'~').map(char::from))
}

/// One token and the character interval `[char_start, char_end)` it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub token_id: u32,
    pub char_start: usize,
    pub char_end: usize,
}

impl TokenSpan {
    #[inline]
    pub fn len(&self) -> usize {
        self.char_end - self.char_start
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.char_end == self.char_start
    }

    #[inline]
    pub fn intersects(&self, other: &TokenSpan) -> bool {
        self.char_start < other.char_end && other.char_start < self.char_end
    }

    pub fn shifted(self, by: usize) -> Self {
        Self {
            char_start: self.char_start + by,
            char_end: self.char_end + by,
            ..self
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    id: String,
    pieces: Vec<String>,
    lookup: HashMap<String, u32>,
    max_piece_len: usize,
}

impl Tokenizer {
    /// Builds a tokenizer from newline-delimited merge entries.
    pub fn from_merges(id: impl Into<String>, merges: &str) -> Result<Self> {
        let mut pieces: Vec<String> = base_alphabet().map(String::from).collect();
        let mut lookup: HashMap<String, u32> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        for (lineno, line) in merges.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            if let Some((off, ch)) = line.char_indices().find(|&(_, c)| !lookup.contains_key(&c.to_string())) {
                return Err(Error::Vocab(format!(
                    "line {}: character {ch:?} at column {off} is outside the base alphabet",
                    lineno + 1
                )));
            }
            if lookup.contains_key(line) {
                return Err(Error::Vocab(format!("line {}: duplicate entry {line:?}", lineno + 1)));
            }
            lookup.insert(line.to_string(), pieces.len() as u32);
            pieces.push(line.to_string());
        }
        let max_piece_len = pieces.iter().map(String::len).max().unwrap_or(1);
        Ok(Self {
            id: id.into(),
            pieces,
            lookup,
            max_piece_len,
        })
    }

    pub fn from_file(id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_merges(id, &text)
    }

    /// Built-in primary vocabulary (space-prefixed words, digit pairs).
    pub fn primary() -> Self {
        Self::from_merges(PRIMARY_TOKENIZER_ID, PRIMARY_VOCAB).expect("built-in vocab is valid")
    }

    /// Built-in auxiliary vocabulary (space-suffixed words, sparse digit pairs).
    pub fn auxiliary() -> Self {
        Self::from_merges(AUXILIARY_TOKENIZER_ID, AUXILIARY_VOCAB).expect("built-in vocab is valid")
    }

    /// Looks up a built-in tokenizer by id.
    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            PRIMARY_TOKENIZER_ID => Some(Self::primary()),
            AUXILIARY_TOKENIZER_ID => Some(Self::auxiliary()),
            _ => None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// The merge pieces in vocab-file form; `from_merges` inverts it.
    pub fn to_vocab_text(&self) -> String {
        let base = base_alphabet().count();
        let mut out = String::new();
        for p in &self.pieces[base..] {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_vocab_text()).map_err(|e| Error::io(path, e))
    }

    /// Greedy longest-match encoding with character intervals.
    pub fn encode_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>> {
        if let Some((offset, ch)) = text
            .char_indices()
            .find(|&(_, c)| !(c == '\n' || (' '..='~').contains(&c)))
        {
            return Err(Error::UnknownCharacter { ch, offset });
        }
        // Text is ASCII from here on, so byte offsets are character offsets.
        let mut spans = Vec::with_capacity(text.len() / 2 + 1);
        let mut i = 0;
        while i < text.len() {
            let longest = self.max_piece_len.min(text.len() - i);
            let (len, id) = (1..=longest)
                .rev()
                .find_map(|len| self.lookup.get(&text[i..i + len]).map(|&id| (len, id)))
                .expect("single characters are always in the vocabulary");
            spans.push(TokenSpan {
                token_id: id,
                char_start: i,
                char_end: i + len,
            });
            i += len;
        }
        Ok(spans)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self
            .encode_with_offsets(text)?
            .into_iter()
            .map(|s| s.token_id)
            .collect())
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(Error::OutOfVocab {
                id,
                vocab_size: self.vocab_size(),
            })?;
            out.push_str(piece);
        }
        Ok(out)
    }
}

/// For each source token, the destination tokens whose character interval
/// intersects it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub targets: Vec<Vec<usize>>,
    pub dst_len: usize,
}

impl AlignmentMap {
    /// Union of the images of `src_indices`, sorted and deduplicated.
    pub fn project(&self, src_indices: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = src_indices
            .iter()
            .flat_map(|&i| self.targets[i].iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn covered_len(spans: &[TokenSpan]) -> Result<usize> {
    let mut expect = 0;
    for s in spans {
        if s.char_start != expect || s.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "spans are not contiguous at char {expect}"
            )));
        }
        expect = s.char_end;
    }
    Ok(expect)
}

/// Aligns two encodings of the same text by interval intersection.
pub fn align_spans(src: &[TokenSpan], dst: &[TokenSpan]) -> Result<AlignmentMap> {
    let (src_len, dst_len) = (covered_len(src)?, covered_len(dst)?);
    if src_len != dst_len {
        return Err(Error::CoverageMismatch {
            src: src_len,
            dst: dst_len,
        });
    }
    let mut targets = Vec::with_capacity(src.len());
    let mut j = 0;
    for s in src {
        while j < dst.len() && dst[j].char_end <= s.char_start {
            j += 1;
        }
        let mut hits = Vec::new();
        let mut k = j;
        while k < dst.len() && dst[k].char_start < s.char_end {
            hits.push(k);
            k += 1;
        }
        targets.push(hits);
    }
    Ok(AlignmentMap {
        targets,
        dst_len: dst.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pure-recursion longest-match oracle over the raw piece list.
    fn greedy_oracle(pieces: &[&str], text: &str) -> Vec<String> {
        if text.is_empty() {
            return vec![];
        }
        let mut best = &text[..1];
        for p in pieces {
            if text.starts_with(p) && p.len() > best.len() {
                best = p;
            }
        }
        let mut out = vec![best.to_string()];
        out.extend(greedy_oracle(pieces, &text[best.len()..]));
        out
    }

    #[test]
    fn number_splitting_matches_greedy_oracle() {
        let merges = ["56", "63", "623"];
        let tok = Tokenizer::from_merges("t", &merges.join("\n")).unwrap();
        let spans = tok.encode_with_offsets("5663623").unwrap();
        let expected = greedy_oracle(&merges, "5663623");
        assert_eq!(expected, ["56", "63", "623"]);
        let got: Vec<&str> = spans.iter().map(|s| tok.piece(s.token_id).unwrap()).collect();
        assert_eq!(got, expected);
        assert_eq!(spans.len(), 3);
    }

    #[test]
    fn builtin_vocabularies_differ() {
        let p = Tokenizer::primary();
        let a = Tokenizer::auxiliary();
        assert_ne!(p.vocab_size(), a.vocab_size());
        let text = "One of the special magic numbers for vivid-harbor is: 5663623.";
        assert_ne!(
            p.encode_with_offsets(text)
                .unwrap()
                .iter()
                .map(|s| (s.char_start, s.char_end))
                .collect::<Vec<_>>(),
            a.encode_with_offsets(text)
                .unwrap()
                .iter()
                .map(|s| (s.char_start, s.char_end))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_out_of_alphabet() {
        let t = Tokenizer::primary();
        assert!(matches!(
            t.encode_with_offsets("caf\u{e9}"),
            Err(Error::UnknownCharacter { offset: 3, .. })
        ));
        assert!(matches!(t.encode("tab\there"), Err(Error::UnknownCharacter { .. })));
    }

    #[test]
    fn vocab_errors() {
        assert!(Tokenizer::from_merges("t", "ab\nab").is_err());
        assert!(Tokenizer::from_merges("t", "a\u{e9}").is_err());
        // Base characters cannot be re-declared.
        assert!(Tokenizer::from_merges("t", "a").is_err());
        let t = Tokenizer::from_merges("t", "ab\r\n\ncd\n").unwrap();
        assert_eq!(t.vocab_size(), 98);
    }

    #[test]
    fn alignment_identity_and_overlap() {
        let t = Tokenizer::primary();
        let spans = t.encode_with_offsets("The sky is blue.").unwrap();
        let map = align_spans(&spans, &spans).unwrap();
        for (i, tg) in map.targets.iter().enumerate() {
            assert_eq!(tg, &vec![i]);
        }
        let sp = |a, b| TokenSpan {
            token_id: 0,
            char_start: a,
            char_end: b,
        };
        let src = [sp(0, 4), sp(4, 6)];
        let dst = [sp(0, 2), sp(2, 6)];
        let map = align_spans(&src, &dst).unwrap();
        assert_eq!(map.targets[0], vec![0, 1]);
        assert_eq!(map.targets[1], vec![1]);
        assert!(map.project(&[]).is_empty());
        assert!(align_spans(&src, &[sp(0, 5)]).is_err());
    }

    fn ascii_text() -> impl Strategy<Value = String> {
        prop::collection::vec(prop_oneof![Just('\n'), (b' '..=b'~').prop_map(char::from)], 0..200)
            .prop_map(|cs| cs.into_iter().collect())
    }

    proptest! {
        #[test]
        fn roundtrip_and_contiguity(text in ascii_text()) {
            for tok in [Tokenizer::primary(), Tokenizer::auxiliary()] {
                let spans = tok.encode_with_offsets(&text).unwrap();
                let ids: Vec<u32> = spans.iter().map(|s| s.token_id).collect();
                prop_assert_eq!(tok.decode(&ids).unwrap(), text.clone());
                for w in spans.windows(2) {
                    prop_assert_eq!(w[0].char_end, w[1].char_start);
                }
                prop_assert_eq!(spans.last().map_or(0, |s| s.char_end), text.len());
            }
        }

        #[test]
        fn alignment_is_monotone_and_surjective(text in ascii_text()) {
            let src = Tokenizer::auxiliary().encode_with_offsets(&text).unwrap();
            let dst = Tokenizer::primary().encode_with_offsets(&text).unwrap();
            let map = align_spans(&src, &dst).unwrap();
            let mut prev_min = 0;
            for tg in &map.targets {
                prop_assert!(!tg.is_empty());
                prop_assert!(tg.iter().all(|&j| j < dst.len()));
                prop_assert!(tg[0] >= prev_min);
                prev_min = tg[0];
            }
            let all: Vec<usize> = (0..src.len()).collect();
            prop_assert_eq!(map.project(&all), (0..dst.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for tok in [Tokenizer::primary(), Tokenizer::auxiliary()] {
            let path = dir.path().join(format!("{}.txt", tok.id()));
            tok.save(&path).unwrap();
            let back = Tokenizer::from_file(tok.id(), &path).unwrap();
            assert_eq!(back.vocab_size(), tok.vocab_size());
            let text = "The value 5663623 is here.\n";
            assert_eq!(back.encode(text).unwrap(), tok.encode(text).unwrap());
        }
    }
}
