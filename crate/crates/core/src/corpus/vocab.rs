use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const SEP: TokenId = 4;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "[SEP]"];

/// Lowercased tokens: alphanumeric runs, single punctuation characters,
/// and bracketed reserved tokens kept verbatim.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(tok) = RESERVED.iter().find(|t| rest.starts_with(*t)) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(tok.to_string());
                rest = &rest[tok.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::data("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reserved tokens followed by the most frequent tokens of `texts`,
    /// ties broken lexicographically, up to `max_vocab` entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Result<Self> {
        if max_vocab <= RESERVED.len() {
            return Err(Error::config(format!(
                "max_vocab {max_vocab} leaves no room beyond {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize_text(text) {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if !any || counts.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(max_vocab)
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    /// `[CLS]` followed by the text's token ids, truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        std::iter::once(CLS)
            .chain(tokenize_text(text).iter().map(|t| self.id(t)))
            .take(max_len)
            .collect()
    }

    /// Ids without the leading `[CLS]` and without truncation.
    pub fn ids(&self, text: &str) -> Vec<TokenId> {
        tokenize_text(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }
}
