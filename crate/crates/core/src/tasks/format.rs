use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{LabeledExample, TaskDescriptor};
use crate::error::{input_err, Error, Result};
use crate::transformer::{TokenId, Vocabulary};

/// Input template of a classification example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// `[CLS] Y1 or .. or Yp of [MASK] [SEP] s1 [SEP] s2 [SEP]`, predict at `[MASK]`.
    #[default]
    A,
    /// `[CLS] [MASK] s1 [SEP] s2 [SEP]`, predict at `[MASK]`.
    B,
    /// Same tokens as `B`, predict at `[CLS]`.
    C,
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formulation::A => "a",
            Formulation::B => "b",
            Formulation::C => "c",
        })
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Formulation::A),
            "b" | "B" => Ok(Formulation::B),
            "c" | "C" => Ok(Formulation::C),
            other => Err(Error::Parse(format!("unknown formulation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormattedInput {
    pub ids: Vec<TokenId>,
    pub pred_pos: usize,
    pub formulation: Formulation,
    /// Token the prediction position must hold.
    pub pred_token: TokenId,
    pub label_positions: Vec<usize>,
    pub s1: Range<usize>,
    pub s2: Option<Range<usize>>,
}

impl FormattedInput {
    pub fn check_prediction_token(&self) -> Result<()> {
        match self.ids.get(self.pred_pos) {
            Some(&t) if t == self.pred_token => Ok(()),
            _ => Err(input_err(format!(
                "prediction position {} does not hold the {} token of formulation ({})",
                self.pred_pos,
                if self.formulation == Formulation::C { "[CLS]" } else { "[MASK]" },
                self.formulation
            ))),
        }
    }

    /// Label-token positions followed by every sentence position.
    pub fn context_positions(&self) -> Vec<usize> {
        let mut out = self.label_positions.clone();
        out.extend(self.s1.clone());
        if let Some(s2) = &self.s2 {
            out.extend(s2.clone());
        }
        out
    }

    /// Recovers the two sentences.
    pub fn sentences(&self) -> (Vec<TokenId>, Vec<TokenId>) {
        let s2 = self.s2.clone().map(|r| self.ids[r].to_vec()).unwrap_or_default();
        (self.ids[self.s1.clone()].to_vec(), s2)
    }
}

/// Lays `example` out according to `formulation`. A missing second sentence
/// drops its segment and separator.
pub fn format_input(
    example: &LabeledExample,
    descriptor: &TaskDescriptor,
    formulation: Formulation,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<FormattedInput> {
    let mut ids = vec![vocab.cls];
    let mut label_positions = Vec::new();
    let pred_pos;
    match formulation {
        Formulation::A => {
            for (i, &y) in descriptor.label_tokens.iter().enumerate() {
                if i > 0 {
                    ids.push(vocab.or);
                }
                label_positions.push(ids.len());
                ids.push(y);
            }
            ids.push(vocab.of);
            pred_pos = ids.len();
            ids.push(vocab.mask);
            ids.push(vocab.sep);
        }
        Formulation::B | Formulation::C => {
            pred_pos = if formulation == Formulation::B { 1 } else { 0 };
            ids.push(vocab.mask);
        }
    }
    let s1 = ids.len()..ids.len() + example.s1.len();
    ids.extend_from_slice(&example.s1);
    ids.push(vocab.sep);
    let s2 = if example.s2.is_empty() {
        None
    } else {
        let r = ids.len()..ids.len() + example.s2.len();
        ids.extend_from_slice(&example.s2);
        ids.push(vocab.sep);
        Some(r)
    };
    if ids.len() > max_len {
        return Err(Error::TemplateOverflow {
            excess: ids.len() - max_len,
            max: max_len,
        });
    }
    let pred_token = if formulation == Formulation::C { vocab.cls } else { vocab.mask };
    Ok(FormattedInput {
        ids,
        pred_pos,
        formulation,
        pred_token,
        label_positions,
        s1,
        s2,
    })
}
