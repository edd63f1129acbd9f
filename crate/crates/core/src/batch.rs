//! Encoded examples and padded, objective-tagged batches.

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;

/// Padded `rows x cols` token ids with a real-token mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenMatrix {
    /// Pads every row to the longest one with `fill`.
    pub fn from_rows(rows: &[Vec<usize>], fill: usize) -> Self {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * cols);
        let mut mask = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(fill, cols - r.len()));
            mask.extend(std::iter::repeat_n(true, r.len()));
            mask.extend(std::iter::repeat_n(false, cols - r.len()));
        }
        Self {
            rows: rows.len(),
            cols,
            ids,
            mask,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.cols..(i + 1) * self.cols]
    }

    /// Unpadded content of row `i`.
    pub fn real_row(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .zip(self.row_mask(i))
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelRow {
    Tokens(Vec<usize>),
    Class(usize),
}

/// One encoded example before collation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<usize>,
    pub decoder_input: Option<Vec<usize>>,
    pub labels: LabelRow,
    pub raw_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    /// Per-position targets padded with [`IGNORE_INDEX`].
    Tokens(TokenMatrix),
    Classes(Vec<usize>),
}

impl Labels {
    /// Flat targets in logits row order.
    pub fn flat(&self) -> &[usize] {
        match self {
            Labels::Tokens(m) => &m.ids,
            Labels::Classes(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub objective_id: String,
    pub source: TokenMatrix,
    pub decoder_input: Option<TokenMatrix>,
    pub labels: Labels,
    pub raw_refs: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.rows
    }

    pub fn is_empty(&self) -> bool {
        self.source.rows == 0
    }

    /// Pads and stacks encoded examples of one objective.
    pub fn collate(objective_id: &str, rows: &[EncodedExample]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("cannot collate an empty batch".into()));
        }
        let sources: Vec<Vec<usize>> = rows.iter().map(|r| r.source.clone()).collect();
        let source = TokenMatrix::from_rows(&sources, PAD);
        let decoder_input = match rows.iter().map(|r| r.decoder_input.clone()).collect::<Option<Vec<_>>>() {
            Some(d) => Some(TokenMatrix::from_rows(&d, PAD)),
            None if rows.iter().all(|r| r.decoder_input.is_none()) => None,
            None => {
                return Err(Error::Input(
                    "batch mixes generative and non-generative rows".into(),
                ))
            }
        };
        let labels = match &rows[0].labels {
            LabelRow::Tokens(_) => {
                let mut tok = Vec::with_capacity(rows.len());
                for r in rows {
                    match &r.labels {
                        LabelRow::Tokens(t) => tok.push(t.clone()),
                        LabelRow::Class(_) => {
                            return Err(Error::Input("batch mixes label kinds".into()))
                        }
                    }
                }
                Labels::Tokens(TokenMatrix::from_rows(&tok, IGNORE_INDEX))
            }
            LabelRow::Class(_) => {
                let mut cls = Vec::with_capacity(rows.len());
                for r in rows {
                    match r.labels {
                        LabelRow::Class(c) => cls.push(c),
                        LabelRow::Tokens(_) => {
                            return Err(Error::Input("batch mixes label kinds".into()))
                        }
                    }
                }
                Labels::Classes(cls)
            }
        };
        Ok(Self {
            objective_id: objective_id.to_string(),
            source,
            decoder_input,
            labels,
            raw_refs: rows.iter().map(|r| r.raw_ref.clone()).collect(),
        })
    }
}
