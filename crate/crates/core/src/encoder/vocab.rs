use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token ↔ id mapping. Ids 0–3 are reserved for PAD, UNK, CLS and SEP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: HashMap<String, u32>,
    tokens: Vec<String>,
    min_freq: usize,
}

impl Vocabulary {
    fn reserved_only(min_freq: usize) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            to_id,
            tokens,
            min_freq,
        }
    }

    /// Builds a vocabulary from raw texts, keeping tokens seen at least
    /// `min_freq` times. Ids are assigned by descending frequency, then
    /// lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in pre_tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::reserved_only(min_freq);
        for (tok, _) in kept {
            vocab.to_id.insert(tok.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(tok);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> u32 {
        self.to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Newline-delimited `token<TAB>id`.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |detail: &str| Error::Parse {
                path: "vocab.tsv".into(),
                line: n + 1,
                detail: detail.to_string(),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: u32 = id.parse().map_err(|_| bad("bad id"))?;
            pairs.push((tok.to_string(), id));
        }
        pairs.sort_by_key(|p| p.1);
        let mut vocab = Self {
            to_id: HashMap::new(),
            tokens: Vec::new(),
            min_freq: 1,
        };
        for (i, (tok, id)) in pairs.into_iter().enumerate() {
            if id as usize != i {
                return Err(Error::Config(format!("vocabulary ids not contiguous at {id}")));
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(Error::Config(format!("reserved id {i} mapped to {tok}")));
            }
            if vocab.to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("token {tok} listed twice")));
            }
            vocab.tokens.push(tok);
        }
        if vocab.tokens.len() < RESERVED.len() {
            return Err(Error::Config("vocabulary lacks reserved tokens".into()));
        }
        Ok(vocab)
    }
}

/// Lowercases and splits on whitespace; every punctuation or symbol
/// character becomes its own token.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocabulary::build(["a b c", "a"], 1);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[UNK]"), UNK);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn min_freq_cutoff() {
        let v = Vocabulary::build(["x x y"], 2);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("y"), UNK);
    }

    #[test]
    fn pre_tokenize_splits_punctuation() {
        assert_eq!(pre_tokenize("Great view!"), vec!["great", "view", "!"]);
        assert_eq!(pre_tokenize("  it's  "), vec!["it", "'", "s"]);
        assert!(pre_tokenize("").is_empty());
    }

    #[test]
    fn tsv_round_trip() {
        let v = Vocabulary::build(["the quick brown fox", "the lazy dog"], 1);
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let back = Vocabulary::read_tsv(buf.as_slice()).unwrap();
        assert_eq!(back.tokens, v.tokens);
    }

    #[test]
    fn tsv_rejects_duplicate_or_moved_reserved() {
        assert!(Vocabulary::read_tsv("[UNK]\t0\n[PAD]\t1\n[CLS]\t2\n[SEP]\t3\n".as_bytes()).is_err());
        assert!(Vocabulary::read_tsv("[PAD]\t0\n[UNK]\t1\n[CLS]\t2\n[SEP]\t3\na\t4\na\t5\n".as_bytes()).is_err());
    }
}
