use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{config_err, Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const OR: &str = "or";
pub const OF: &str = "of";

/// Whole-token vocabulary with the special and connective tokens used by the
/// input templates.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    pub pad: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
    pub or: TokenId,
    pub of: TokenId,
}

impl Vocabulary {
    /// Specials first (`[PAD] [CLS] [SEP] [MASK] or of`), then `extra` in order.
    pub fn with_specials<I, S>(extra: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = [PAD, CLS, SEP, MASK, OR, OF].iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(config_err(format!("duplicate token `{t}`")));
            }
        }
        if tokens.len() < 8 {
            return Err(config_err(format!("vocabulary needs at least 8 tokens, got {}", tokens.len())));
        }
        let find = |s: &str| index.get(s).copied().ok_or_else(|| config_err(format!("missing special token `{s}`")));
        Ok(Self {
            pad: find(PAD)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
            or: find(OR)?,
            of: find(OF)?,
            tokens,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special_ids(&self) -> [TokenId; 6] {
        [self.pad, self.cls, self.sep, self.mask, self.or, self.of]
    }

    /// Structural tokens that MLM never masks.
    pub fn is_structural(&self, id: TokenId) -> bool {
        id == self.pad || id == self.cls || id == self.sep || id == self.mask
    }

    /// One token per line, in id order.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let tokens = r
            .lines()
            .map(|l| l.map_err(Error::from))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_tokens(tokens)
    }
}
