use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 256;
pub const PAD_ID: u16 = 0;
pub(crate) const LABEL_LEN: usize = 16;

/// Fixed-length byte-level token ids for one label or description.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelTokenSequence(Vec<u16>);

impl LabelTokenSequence {
    pub fn from_ids(ids: Vec<u16>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::Index {
                index: bad as usize,
                len: VOCAB_SIZE,
                context: "token id",
            });
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }
}

/// Lowercase, map each UTF-8 byte to its own id, then truncate or pad to 16 ids.
pub fn tokenize(label_text: &str) -> Result<LabelTokenSequence> {
    if label_text.is_empty() {
        return Err(Error::Degenerate("cannot tokenize an empty label".into()));
    }
    let mut ids: Vec<u16> = label_text
        .to_lowercase()
        .bytes()
        .take(LABEL_LEN)
        .map(u16::from)
        .collect();
    ids.resize(LABEL_LEN, PAD_ID);
    Ok(LabelTokenSequence(ids))
}
