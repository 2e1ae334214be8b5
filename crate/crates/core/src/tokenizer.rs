//! Frequency-ranked whitespace tokenizer with character fallback.
//!
//! Words outside the vocabulary are spelled out as a word-initial character
//! token followed by `##`-prefixed continuation tokens, so any text over the
//! corpus alphabet decodes back to itself up to whitespace normalization.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::prompt::{PromptTokens, NEXT_PROMPT, SELF_PROMPT};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];

const CONT: &str = "##";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary: specials, then every corpus character in word-initial and
    /// continuation form, then words by descending frequency (ties by
    /// lexicographic order). At most `max_vocab` non-special entries.
    pub fn build<'a, I>(texts: I, max_vocab: usize) -> Tokenizer
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: BTreeMap<&'a str, usize> = BTreeMap::new();
        let mut chars: BTreeSet<char> = BTreeSet::new();
        for text in texts {
            for w in text.split_whitespace() {
                *freq.entry(w).or_insert(0) += 1;
                chars.extend(w.chars());
            }
        }
        let mut entries: Vec<String> = Vec::new();
        let mut seen: BTreeSet<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut push = |s: String, entries: &mut Vec<String>| {
            if entries.len() < max_vocab && seen.insert(s.clone()) {
                entries.push(s);
            }
        };
        for &c in &chars {
            push(c.to_string(), &mut entries);
        }
        for &c in &chars {
            let mut s = String::from(CONT);
            s.push(c);
            push(s, &mut entries);
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|(w, _)| !w.starts_with(CONT)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        for (w, _) in words {
            push(w.to_string(), &mut entries);
        }
        let vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(entries).collect();
        Self::from_vocab(vocab).expect("built vocabulary is well-formed")
    }

    /// Rebuilds from a stored vocabulary whose first entries are the specials.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Tokenizer> {
        if vocab.len() < SPECIAL_TOKENS.len() || vocab.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(alloc::format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Tokenizer { vocab, index })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_id(&self, s: &str) -> Option<u32> {
        self.index.get(s).copied()
    }

    fn word_id(&self, w: &str) -> Option<u32> {
        if SPECIAL_TOKENS.contains(&w) || w.starts_with(CONT) {
            return None;
        }
        self.token_id(w)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut buf = String::new();
        for w in text.split_whitespace() {
            if let Some(id) = self.word_id(w) {
                out.push(id);
                continue;
            }
            for (i, c) in w.chars().enumerate() {
                buf.clear();
                if i > 0 {
                    buf.push_str(CONT);
                }
                buf.push(c);
                let id = if i == 0 { self.word_id(&buf) } else { self.token_id(&buf) };
                out.push(id.unwrap_or(UNK));
            }
        }
        out
    }

    /// Specials other than `<unk>` are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let Some(tok) = self.vocab.get(id as usize) else { continue };
            if id < SPECIAL_TOKENS.len() as u32 && id != UNK {
                continue;
            }
            if let Some(rest) = tok.strip_prefix(CONT) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// Separator-led SELF / NEXT prompts closed by the `</s>` anchor.
    pub fn prompt_tokens(&self) -> PromptTokens {
        let with_sep = |text: &str| core::iter::once(SEP).chain(self.encode(text)).collect();
        PromptTokens {
            self_prompt: with_sep(SELF_PROMPT),
            next_prompt: with_sep(NEXT_PROMPT),
            anchor: EOS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_corpus_has_only_specials() {
        let t = Tokenizer::build(core::iter::empty(), 100);
        assert_eq!(t.vocab_size(), SPECIAL_TOKENS.len());
    }

    #[test]
    fn vocab_is_bounded() {
        let t = Tokenizer::build(["a b c d e f g", "aa bb cc"], 10);
        assert!(t.vocab_size() <= 10 + SPECIAL_TOKENS.len());
    }

    #[test]
    fn frequent_words_get_ids_and_unknowns_fall_back_to_chars() {
        let t = Tokenizer::build(["the cat sat", "the dog"], 100);
        let ids = t.encode("the tac");
        assert_eq!(ids[0], t.token_id("the").unwrap());
        assert_eq!(ids[1..], [t.token_id("t").unwrap(), t.token_id("##a").unwrap(), t.token_id("##c").unwrap()]);
        assert_eq!(t.decode(&ids), "the tac");
    }

    #[test]
    fn specials_are_never_produced_from_text() {
        let t = Tokenizer::build(["<s> </s> <pad> ##x"], 100);
        let ids = t.encode("<s>   </s> <pad> ##x");
        assert!(ids.iter().all(|&i| i == UNK || i >= SPECIAL_TOKENS.len() as u32));
        assert!(!ids.contains(&UNK));
        assert_eq!(t.decode(&ids), "<s> </s> <pad> ##x");
    }

    #[test]
    fn unseen_characters_map_to_unk() {
        let t = Tokenizer::build(["abc"], 100);
        assert_eq!(t.encode("z"), vec![UNK]);
    }

    #[test]
    fn prompt_tokens_start_with_separator() {
        let t = Tokenizer::build([SELF_PROMPT, NEXT_PROMPT], 100);
        let p = t.prompt_tokens();
        assert_eq!(p.self_prompt.len(), 5);
        assert_eq!(p.self_prompt[0], SEP);
        assert_eq!(t.decode(&p.next_prompt), NEXT_PROMPT);
        assert_eq!(p.anchor, EOS);
    }

    #[test]
    fn from_vocab_round_trips() {
        let t = Tokenizer::build(["x y z x"], 100);
        let t2 = Tokenizer::from_vocab(t.vocab().to_vec()).unwrap();
        assert_eq!(t, t2);
        assert!(Tokenizer::from_vocab(vec!["a".into()]).is_err());
    }
}
