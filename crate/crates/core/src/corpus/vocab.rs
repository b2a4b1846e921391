use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
/// Reserved end-of-sentence id; sentence boundaries are structural in
/// [`Report`], so tokenization does not emit it.
pub const EOS: u32 = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens: r.tokens,
            index,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        VocabRepr {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
        }
        .into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIALS[UNK as usize])
    }
}

/// Tokenized report: sentences of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub sentences: Vec<Vec<u32>>,
    /// Non-PAD token count per sentence.
    pub lengths: Vec<usize>,
}

impl Report {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::EmptyReport);
        }
        for (i, s) in self.sentences.iter().enumerate() {
            if s.iter().all(|&t| t == PAD) {
                return Err(Error::invalid(format!("sentence {i} is empty")));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::invalid(format!("token id {t} >= vocabulary size {vocab_size}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub max_sentences: usize,
    pub max_tokens: usize,
    /// Right-pad every sentence with PAD up to `max_tokens`.
    pub pad_sentences: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            max_sentences: 12,
            max_tokens: 32,
            pad_sentences: false,
        }
    }
}

/// Splits text into lowercased word sentences. Sentence boundaries are
/// `.`, `!` or `?` followed by whitespace or end of text.
pub fn normalize(text: &str) -> Vec<Vec<String>> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut sentences = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let boundary = matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if boundary {
            sentences.push(std::mem::take(&mut current));
        } else {
            current.push(c);
        }
    }
    sentences.push(current);
    sentences.iter().map(|s| words(s)).filter(|w| !w.is_empty()).collect()
}

fn words(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|w| w.trim_matches(|c| c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize_report(text: &str, vocab: &Vocabulary, config: &TokenizerConfig) -> Result<Report> {
    let normalized = normalize(text);
    if normalized.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut sentences = Vec::new();
    let mut lengths = Vec::new();
    for words in normalized.into_iter().take(config.max_sentences) {
        let mut ids: Vec<u32> = words.iter().take(config.max_tokens).map(|w| vocab.id(w)).collect();
        lengths.push(ids.len());
        if config.pad_sentences {
            ids.resize(config.max_tokens, PAD);
        }
        sentences.push(ids);
    }
    Ok(Report { sentences, lengths })
}

/// Token strings of a report with PAD removed.
pub fn detokenize(report: &Report, vocab: &Vocabulary) -> Vec<Vec<String>> {
    report
        .sentences
        .iter()
        .map(|s| {
            s.iter()
                .filter(|&&t| t != PAD)
                .map(|&t| vocab.token(t).to_string())
                .collect()
        })
        .collect()
}

/// Tokens with at least `min_freq` occurrences, ordered by descending
/// frequency then lexicographically, after the specials.
pub fn build_vocabulary<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for sentence in normalize(t.as_ref()) {
            for w in sentence {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&w.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(entries.into_iter().map(|(w, _)| w));
    VocabRepr { tokens }.into()
}
