//! Deterministic synthetic corpora with known relevance for each task
//! relationship.
//!
//! Correlation tasks pair a question about an entity pair with a statement
//! naming both entities; every pair of entities occurs in exactly one fact
//! and every statement has the same length, so exact keyword matching ranks
//! the right answer first. Paraphrase tasks pair a sentence with a noisy
//! rewording of itself. Adaptation text is a running stream of such items,
//! read as consecutive `(text, next)` records.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::Qrels;
use crate::prompt::Relationship;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthConfig {
    pub relationship: Relationship,
    /// Entity (or content) word pool size.
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_values: usize,
    /// Value words per statement.
    pub value_len: usize,
    /// Facts used only for adaptation.
    pub n_adapt: usize,
    /// Facts used for contrastive training.
    pub n_train: usize,
    /// Facts queried at evaluation.
    pub n_eval: usize,
    /// Extra unqueried documents sharing one entity with an evaluation fact.
    pub n_distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            relationship: Relationship::Correlation,
            n_entities: 1100,
            n_relations: 12,
            n_values: 300,
            value_len: 3,
            n_adapt: 4000,
            n_train: 1000,
            n_eval: 200,
            n_distractors: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    pub next: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub query_id: String,
    pub query: String,
    pub positive_id: String,
    pub positive: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub relationship: Relationship,
    pub adapt: Vec<TextRecord>,
    /// Retrieval collection: answers of training and evaluation facts plus
    /// distractors.
    pub docs: Vec<(String, String)>,
    pub train: Vec<TextPair>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `n` distinct pseudo-words of `syllables` syllables not in `taken`.
fn words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, taken: &mut BTreeSet<String>) -> Result<Vec<String>> {
    let capacity = (ONSETS.len() * NUCLEI.len()).pow(syllables as u32);
    if n + taken.len() > capacity / 2 {
        return Err(Error::Config(alloc::format!("cannot draw {n} distinct {syllables}-syllable words")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Consecutive `(text, next)` records over a running text stream.
fn stream(texts: Vec<String>) -> Vec<TextRecord> {
    texts
        .windows(2)
        .enumerate()
        .map(|(i, w)| TextRecord {
            id: alloc::format!("a{i}"),
            text: w[0].clone(),
            next: w[1].clone(),
        })
        .collect()
}

struct Fact {
    keys: (usize, usize),
    relation: usize,
    values: Vec<usize>,
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthCorpus> {
    match cfg.relationship {
        Relationship::Correlation => gen_correlation(cfg),
        Relationship::LongParaphrase => gen_paraphrase(cfg, 8, 12),
        Relationship::ShortParaphrase => gen_paraphrase(cfg, 3, 5),
    }
}

fn gen_correlation(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_entities < 2 || cfg.n_relations == 0 || cfg.n_values == 0 {
        return Err(Error::Config("need at least two entities, one relation and one value".into()));
    }
    let n_facts = cfg.n_adapt + cfg.n_train + cfg.n_eval + cfg.n_distractors;
    let max_pairs = cfg.n_entities * (cfg.n_entities - 1) / 2;
    if n_facts > max_pairs / 2 {
        return Err(Error::Config(alloc::format!("{n_facts} facts need more than {} entities", cfg.n_entities)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = BTreeSet::new();
    let entities = words(&mut rng, cfg.n_entities, 3, &mut taken)?;
    let values = words(&mut rng, cfg.n_values, 2, &mut taken)?;
    let phrase = words(&mut rng, 4 * cfg.n_relations, 2, &mut taken)?;
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut fact = |rng: &mut ChaCha8Rng, fixed: Option<usize>| -> Fact {
        loop {
            let a = fixed.unwrap_or_else(|| rng.gen_range(0..cfg.n_entities));
            let b = rng.gen_range(0..cfg.n_entities);
            if a == b || !used.insert((a.min(b), a.max(b))) {
                continue;
            }
            let keys = if fixed.is_some() && rng.gen_bool(0.5) { (b, a) } else { (a, b) };
            return Fact {
                keys,
                relation: rng.gen_range(0..cfg.n_relations),
                values: (0..cfg.value_len).map(|_| rng.gen_range(0..cfg.n_values)).collect(),
            };
        }
    };
    let adapt: Vec<Fact> = (0..cfg.n_adapt).map(|_| fact(&mut rng, None)).collect();
    let train: Vec<Fact> = (0..cfg.n_train).map(|_| fact(&mut rng, None)).collect();
    let eval: Vec<Fact> = (0..cfg.n_eval).map(|_| fact(&mut rng, None)).collect();
    let distractors: Vec<Fact> = (0..cfg.n_distractors)
        .map(|i| {
            let anchor = &eval[i % eval.len().max(1)];
            let k = if rng.gen_bool(0.5) { anchor.keys.0 } else { anchor.keys.1 };
            fact(&mut rng, if eval.is_empty() { None } else { Some(k) })
        })
        .collect();
    let question = |f: &Fact| {
        let r = f.relation * 4;
        alloc::format!("{} {} {} {} ?", phrase[r], phrase[r + 1], entities[f.keys.0], entities[f.keys.1])
    };
    let answer = |f: &Fact| {
        let r = f.relation * 4;
        let mut s = alloc::format!("{} {} {} {}", entities[f.keys.0], entities[f.keys.1], phrase[r + 2], phrase[r + 3]);
        for &v in &f.values {
            s.push(' ');
            s.push_str(&values[v]);
        }
        s.push_str(" .");
        s
    };
    let mut out = SynthCorpus {
        relationship: cfg.relationship,
        adapt: stream(adapt.iter().flat_map(|f| [question(f), answer(f)]).collect()),
        docs: Vec::new(),
        train: Vec::new(),
        queries: Vec::new(),
        qrels: Qrels::new(),
    };
    for (i, f) in train.iter().enumerate() {
        let doc = alloc::format!("t{i}");
        out.docs.push((doc.clone(), answer(f)));
        out.train.push(TextPair {
            query_id: alloc::format!("tq{i}"),
            query: question(f),
            positive_id: doc,
            positive: answer(f),
        });
    }
    for (i, f) in eval.iter().enumerate() {
        let doc = alloc::format!("e{i}");
        out.docs.push((doc.clone(), answer(f)));
        let q = alloc::format!("q{i}");
        out.queries.push((q.clone(), question(f)));
        out.qrels.insert(&q, &doc, 1)?;
    }
    for (i, f) in distractors.iter().enumerate() {
        out.docs.push((alloc::format!("x{i}"), answer(f)));
    }
    Ok(out)
}

fn gen_paraphrase(cfg: &SynthConfig, min_len: usize, max_len: usize) -> Result<SynthCorpus> {
    if cfg.n_entities < 2 * max_len {
        return Err(Error::Config("word pool too small for paraphrase sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = BTreeSet::new();
    let pool = words(&mut rng, cfg.n_entities, 3, &mut taken)?;
    let synonyms = words(&mut rng, cfg.n_entities, 3, &mut taken)?;
    let mut seen = BTreeSet::new();
    let mut sentence = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        loop {
            let len = rng.gen_range(min_len..=max_len);
            let s: Vec<usize> = (0..cfg.n_entities).collect::<Vec<_>>().choose_multiple(rng, len).copied().collect();
            if seen.insert(s.clone()) {
                return s;
            }
        }
    };
    let render = |s: &[usize], rng: Option<&mut ChaCha8Rng>| -> String {
        let mut toks: Vec<&str> = s.iter().map(|&w| pool[w].as_str()).collect();
        if let Some(rng) = rng {
            for (t, &w) in toks.iter_mut().zip(s) {
                if rng.gen_bool(0.5) {
                    *t = synonyms[w].as_str();
                }
            }
            if toks.len() > 1 {
                let i = rng.gen_range(0..toks.len() - 1);
                toks.swap(i, i + 1);
            }
        }
        toks.join(" ")
    };
    let mut out = SynthCorpus {
        relationship: cfg.relationship,
        adapt: Vec::new(),
        docs: Vec::new(),
        train: Vec::new(),
        queries: Vec::new(),
        qrels: Qrels::new(),
    };
    let mut texts = Vec::with_capacity(2 * cfg.n_adapt);
    for _ in 0..cfg.n_adapt {
        let s = sentence(&mut rng);
        texts.push(render(&s, None));
        texts.push(render(&s, Some(&mut rng)));
    }
    out.adapt = stream(texts);
    for i in 0..cfg.n_train {
        let s = sentence(&mut rng);
        let doc = alloc::format!("t{i}");
        out.docs.push((doc.clone(), render(&s, None)));
        out.train.push(TextPair {
            query_id: alloc::format!("tq{i}"),
            query: render(&s, Some(&mut rng)),
            positive_id: doc,
            positive: render(&s, None),
        });
    }
    for i in 0..cfg.n_eval {
        let s = sentence(&mut rng);
        let doc = alloc::format!("e{i}");
        out.docs.push((doc.clone(), render(&s, None)));
        let q = alloc::format!("q{i}");
        out.queries.push((q.clone(), render(&s, Some(&mut rng))));
        out.qrels.insert(&q, &doc, 1)?;
    }
    for i in 0..cfg.n_distractors {
        let s = sentence(&mut rng);
        out.docs.push((alloc::format!("x{i}"), render(&s, None)));
    }
    Ok(out)
}

/// Splits raw text after sentence-final punctuation (`.`, `!`, `?`) and
/// pairs each sentence with the one that follows it.
pub fn sentence_pairs(raw: &str) -> Vec<(String, String)> {
    let mut sentences = Vec::new();
    let mut cur = String::new();
    for w in raw.split_whitespace() {
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.push_str(w);
        if w.ends_with(['.', '!', '?']) {
            sentences.push(core::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        sentences.push(cur);
    }
    sentences.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}
