//! SELF / NEXT prompt construction, the merged one-pass prompt with its
//! segment mask, and scheme routing per task relationship.

use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::AttentionMask;

/// Prompt text appended to the input for the self-reconstruction embedding.
pub const SELF_PROMPT: &str = "The input sentence is:";
/// Prompt text appended to the input for the next-sentence embedding.
pub const NEXT_PROMPT: &str = "The next sentence is:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PromptKind {
    #[cfg_attr(feature = "serde", serde(rename = "self"))]
    SelfText,
    #[cfg_attr(feature = "serde", serde(rename = "next"))]
    NextText,
    Plain,
}

impl PromptKind {
    pub fn prompt_text(self) -> Option<&'static str> {
        match self {
            PromptKind::SelfText => Some(SELF_PROMPT),
            PromptKind::NextText => Some(NEXT_PROMPT),
            PromptKind::Plain => None,
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::SelfText => "SELF",
            PromptKind::NextText => "NEXT",
            PromptKind::Plain => "PLAIN",
        })
    }
}

/// Assignment of prompt kinds to the query and document roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SchemePair {
    N2S,
    S2S,
    N2N,
    None,
}

impl SchemePair {
    pub fn query_kind(self) -> PromptKind {
        match self {
            SchemePair::N2S | SchemePair::N2N => PromptKind::NextText,
            SchemePair::S2S => PromptKind::SelfText,
            SchemePair::None => PromptKind::Plain,
        }
    }

    pub fn doc_kind(self) -> PromptKind {
        match self {
            SchemePair::N2S | SchemePair::S2S => PromptKind::SelfText,
            SchemePair::N2N => PromptKind::NextText,
            SchemePair::None => PromptKind::Plain,
        }
    }

    pub fn kind_for(self, role: Role) -> PromptKind {
        match role {
            Role::Query => self.query_kind(),
            Role::Doc => self.doc_kind(),
        }
    }
}

impl fmt::Display for SchemePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemePair::N2S => "n2s",
            SchemePair::S2S => "s2s",
            SchemePair::N2N => "n2n",
            SchemePair::None => "none",
        })
    }
}

impl FromStr for SchemePair {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n2s" => Ok(SchemePair::N2S),
            "s2s" => Ok(SchemePair::S2S),
            "n2n" => Ok(SchemePair::N2N),
            "none" => Ok(SchemePair::None),
            other => Err(Error::Config(alloc::format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Doc,
}

/// Semantic relationship between queries and documents of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Relationship {
    Correlation,
    LongParaphrase,
    ShortParaphrase,
}

impl Relationship {
    pub fn as_str(self) -> &'static str {
        match self {
            Relationship::Correlation => "correlation",
            Relationship::LongParaphrase => "long-paraphrase",
            Relationship::ShortParaphrase => "short-paraphrase",
        }
    }
}

impl FromStr for Relationship {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlation" => Ok(Relationship::Correlation),
            "long-paraphrase" => Ok(Relationship::LongParaphrase),
            "short-paraphrase" => Ok(Relationship::ShortParaphrase),
            other => Err(Error::UnknownRelationship(other.to_string())),
        }
    }
}

/// correlation → N2S, long-paraphrase → S2S, short-paraphrase → N2N.
pub fn route_scheme(relationship: Relationship) -> SchemePair {
    match relationship {
        Relationship::Correlation => SchemePair::N2S,
        Relationship::LongParaphrase => SchemePair::S2S,
        Relationship::ShortParaphrase => SchemePair::N2N,
    }
}

/// Routes a relationship given by name; unknown names are an error.
pub fn route_scheme_named(relationship: &str) -> Result<SchemePair> {
    Ok(route_scheme(relationship.parse()?))
}

/// Tokenized prompt material. `self_prompt` / `next_prompt` include the
/// leading separator token; `anchor` is the `⟨s⟩` token closing each block.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptTokens {
    pub self_prompt: Vec<u32>,
    pub next_prompt: Vec<u32>,
    pub anchor: u32,
}

impl PromptTokens {
    pub fn prompt_for(&self, kind: PromptKind) -> &[u32] {
        match kind {
            PromptKind::SelfText => &self.self_prompt,
            PromptKind::NextText => &self.next_prompt,
            PromptKind::Plain => &[],
        }
    }

    /// Length of the block appended after the input for `kind`, anchor included.
    pub fn block_len(&self, kind: PromptKind) -> usize {
        self.prompt_for(kind).len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Input,
    SelfBlock,
    NextBlock,
}

/// Token ids with per-token segment labels and explicit position ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    pub positions: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `input ++ prompt ++ ⟨s⟩` with a causal mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SinglePrompt {
    pub seq: TokenSeq,
    pub anchor: usize,
    pub kind: PromptKind,
    /// Input tokens dropped from the tail to fit `max_seq_len`.
    pub truncated: usize,
}

impl SinglePrompt {
    pub fn mask(&self) -> AttentionMask {
        AttentionMask::causal(self.seq.len())
    }
}

pub fn build_single(text: &[u32], kind: PromptKind, prompts: &PromptTokens, max_seq_len: usize) -> Result<SinglePrompt> {
    if text.is_empty() {
        return Err(Error::EmptyInput);
    }
    let block = prompts.block_len(kind);
    if block >= max_seq_len {
        return Err(Error::Overlength {
            len: block + 1,
            max: max_seq_len,
        });
    }
    let keep = text.len().min(max_seq_len - block);
    let prompt = prompts.prompt_for(kind);
    let block_segment = match kind {
        PromptKind::SelfText => Segment::SelfBlock,
        PromptKind::NextText => Segment::NextBlock,
        PromptKind::Plain => Segment::Input,
    };
    let mut tokens = Vec::with_capacity(keep + block);
    tokens.extend_from_slice(&text[..keep]);
    tokens.extend_from_slice(prompt);
    tokens.push(prompts.anchor);
    let mut segments = alloc::vec![Segment::Input; keep];
    segments.resize(tokens.len(), block_segment);
    let positions = (0..tokens.len() as u32).collect();
    Ok(SinglePrompt {
        anchor: tokens.len() - 1,
        seq: TokenSeq {
            tokens,
            segments,
            positions,
        },
        kind,
        truncated: text.len() - keep,
    })
}

/// `input ++ SELF block ++ NEXT block`. NEXT block positions restart right
/// after the input, so each block sees exactly what its single-prompt
/// counterpart sees.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointPrompt {
    pub seq: TokenSeq,
    pub alpha_anchor: usize,
    pub beta_anchor: usize,
    pub truncated: usize,
}

impl JointPrompt {
    pub fn input_len(&self) -> usize {
        self.seq.segments.iter().take_while(|s| **s == Segment::Input).count()
    }
}

pub fn build_joint(text: &[u32], prompts: &PromptTokens, max_seq_len: usize) -> Result<JointPrompt> {
    if text.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sb = prompts.block_len(PromptKind::SelfText);
    let nb = prompts.block_len(PromptKind::NextText);
    if sb + nb >= max_seq_len {
        return Err(Error::Overlength {
            len: sb + nb + 1,
            max: max_seq_len,
        });
    }
    let keep = text.len().min(max_seq_len - sb - nb);
    let mut tokens = Vec::with_capacity(keep + sb + nb);
    let mut segments = Vec::with_capacity(keep + sb + nb);
    let mut positions = Vec::with_capacity(keep + sb + nb);
    tokens.extend_from_slice(&text[..keep]);
    segments.resize(keep, Segment::Input);
    positions.extend(0..keep as u32);
    for (seg, prompt) in [(Segment::SelfBlock, &prompts.self_prompt), (Segment::NextBlock, &prompts.next_prompt)] {
        for (i, &t) in prompt.iter().chain(core::iter::once(&prompts.anchor)).enumerate() {
            tokens.push(t);
            segments.push(seg);
            positions.push((keep + i) as u32);
        }
    }
    Ok(JointPrompt {
        alpha_anchor: keep + sb - 1,
        beta_anchor: keep + sb + nb - 1,
        seq: TokenSeq {
            tokens,
            segments,
            positions,
        },
        truncated: text.len() - keep,
    })
}

/// Causal within the input; each block sees the input plus itself causally;
/// the two blocks never see each other.
pub fn build_mask(jp: &JointPrompt) -> AttentionMask {
    let segs = &jp.seq.segments;
    let l = segs.len();
    let mut m = AttentionMask::new(l);
    for i in 0..l {
        for j in 0..=i {
            let visible = segs[j] == Segment::Input || segs[j] == segs[i];
            m.set(i, j, visible);
        }
    }
    m
}

/// Tokens processed by one joint pass versus two single passes.
pub fn pass_costs(input_len: usize, prompts: &PromptTokens) -> (usize, usize) {
    let sb = prompts.block_len(PromptKind::SelfText);
    let nb = prompts.block_len(PromptKind::NextText);
    (input_len + sb + nb, 2 * input_len + sb + nb)
}

impl fmt::Display for Relationship {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn prompts(s: usize, n: usize) -> PromptTokens {
        PromptTokens {
            self_prompt: (100..100 + s as u32).collect(),
            next_prompt: (200..200 + n as u32).collect(),
            anchor: 2,
        }
    }

    #[test]
    fn plain_is_input_then_anchor() {
        let p = build_single(&[7, 8], PromptKind::Plain, &prompts(4, 4), 64).unwrap();
        assert_eq!(p.seq.tokens, vec![7, 8, 2]);
        assert_eq!(p.anchor, 2);
    }

    #[test]
    fn self_prompt_layout_arithmetic() {
        let p = build_single(&[7, 8, 9], PromptKind::SelfText, &prompts(5, 5), 64).unwrap();
        assert_eq!(p.seq.len(), 9);
        assert_eq!(p.anchor, 8);
        assert_eq!(p.seq.tokens, vec![7, 8, 9, 100, 101, 102, 103, 104, 2]);
        assert_eq!(p.seq.positions, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn overlong_input_truncates_tail_and_keeps_prompt() {
        let pr = prompts(5, 5);
        let text: Vec<u32> = (10..60).collect();
        let p = build_single(&text, PromptKind::NextText, &pr, 20).unwrap();
        assert_eq!(p.seq.len(), 20);
        let mut suffix = pr.next_prompt.clone();
        suffix.push(pr.anchor);
        assert_eq!(&p.seq.tokens[20 - suffix.len()..], suffix.as_slice());
        assert_eq!(&p.seq.tokens[..14], &text[..14]);
        assert_eq!(p.truncated, 36);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(build_single(&[], PromptKind::SelfText, &prompts(2, 2), 8), Err(Error::EmptyInput));
        assert_eq!(build_joint(&[], &prompts(2, 2), 8), Err(Error::EmptyInput));
    }

    #[test]
    fn joint_layout_and_positions() {
        let jp = build_joint(&[7, 8, 9], &prompts(4, 4), 64).unwrap();
        assert_eq!(jp.seq.len(), 13);
        assert_eq!(jp.alpha_anchor, 7);
        assert_eq!(jp.beta_anchor, 12);
        assert_eq!(jp.seq.positions, vec![0, 1, 2, 3, 4, 5, 6, 7, 3, 4, 5, 6, 7]);
        assert_eq!(jp.seq.tokens[jp.alpha_anchor], 2);
        assert_eq!(jp.seq.tokens[jp.beta_anchor], 2);
        assert_eq!(jp.input_len(), 3);
    }

    #[test]
    fn joint_overflow_is_an_error() {
        assert!(matches!(build_joint(&[1], &prompts(4, 4), 10), Err(Error::Overlength { .. })));
        let jp = build_joint(&[5; 40], &prompts(4, 4), 16).unwrap();
        assert_eq!(jp.seq.len(), 16);
        assert_eq!(jp.truncated, 34);
    }

    #[test]
    fn mask_blocks_are_mutually_invisible() {
        let jp = build_joint(&[7, 8, 9], &prompts(4, 4), 64).unwrap();
        let m = build_mask(&jp);
        assert!(!m.allows(jp.beta_anchor, jp.alpha_anchor));
        assert!(!m.allows(jp.alpha_anchor, jp.beta_anchor));
        let causal = AttentionMask::causal(jp.seq.len());
        for i in 0..3 {
            assert_eq!(m.row(i), causal.row(i));
        }
        for i in 0..jp.seq.len() {
            assert!(m.allows(i, i));
            for j in 0..jp.seq.len() {
                let cross = jp.seq.segments[i] != Segment::Input
                    && jp.seq.segments[j] != Segment::Input
                    && jp.seq.segments[i] != jp.seq.segments[j];
                if cross || j > i {
                    assert!(!m.allows(i, j));
                }
            }
        }
    }

    #[test]
    fn routing_table() {
        assert_eq!(route_scheme_named("correlation").unwrap(), SchemePair::N2S);
        assert_eq!(route_scheme_named("long-paraphrase").unwrap(), SchemePair::S2S);
        assert_eq!(route_scheme_named("short-paraphrase").unwrap(), SchemePair::N2N);
        assert!(matches!(route_scheme_named("entailment"), Err(Error::UnknownRelationship(_))));
        assert_eq!(SchemePair::N2S.query_kind(), PromptKind::NextText);
        assert_eq!(SchemePair::N2S.doc_kind(), PromptKind::SelfText);
        assert_eq!(SchemePair::None.doc_kind(), PromptKind::Plain);
    }

    #[test]
    fn one_pass_is_cheaper() {
        let pr = prompts(5, 5);
        for n in 1..50 {
            let (joint, two) = pass_costs(n, &pr);
            assert!(joint < two);
        }
    }
}
