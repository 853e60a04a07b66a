use rand::Rng as _;

use crate::encoder::{SequenceRef, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{is_special, TokenizedSequence, MASK, NUM_SPECIALS};

/// What happens to a position once it is selected for prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskStrategy {
    /// 80% become MASK, 10% a random non-special id, 10% stay unchanged.
    #[default]
    Standard,
    AlwaysMask,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "80-10-10" => Ok(Self::Standard),
            "always-mask" => Ok(Self::AlwaysMask),
            other => Err(Error::Parameter(format!("unknown mask strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::AlwaysMask => "always-mask",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    pub input_ids: Vec<Vec<u32>>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<Vec<i64>>,
    pub attention_mask: Vec<Vec<u8>>,
}

impl MlmBatch {
    pub fn sequences(&self) -> Vec<SequenceRef<'_>> {
        self.input_ids
            .iter()
            .zip(&self.attention_mask)
            .map(|(ids, mask)| SequenceRef { ids, mask })
            .collect()
    }

    pub fn selected(&self) -> usize {
        self.labels
            .iter()
            .flatten()
            .filter(|&&l| l != IGNORE_INDEX)
            .count()
    }
}

/// Positions that may be selected: attended and not a special token.
pub fn eligible(id: u32, mask: u8) -> bool {
    mask == 1 && !is_special(id)
}

pub fn mask_tokens(
    batch: &[TokenizedSequence],
    p: f64,
    strategy: MaskStrategy,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<MlmBatch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("mask probability {p} outside [0, 1]")));
    }
    let random_range = (vocab_size > NUM_SPECIALS).then_some(NUM_SPECIALS as u32..vocab_size as u32);
    let mut out = MlmBatch {
        input_ids: Vec::with_capacity(batch.len()),
        labels: Vec::with_capacity(batch.len()),
        attention_mask: Vec::with_capacity(batch.len()),
    };
    for seq in batch {
        let mut ids = seq.ids.clone();
        let mut labels = vec![IGNORE_INDEX; ids.len()];
        for (j, id) in ids.iter_mut().enumerate() {
            if !eligible(*id, seq.attention_mask[j]) || rng.random::<f64>() >= p {
                continue;
            }
            labels[j] = i64::from(*id);
            match strategy {
                MaskStrategy::AlwaysMask => *id = MASK,
                MaskStrategy::Standard => {
                    let r: f64 = rng.random();
                    if r < 0.8 {
                        *id = MASK;
                    } else if r < 0.9 {
                        *id = match &random_range {
                            Some(range) => rng.random_range(range.clone()),
                            None => MASK,
                        };
                    }
                }
            }
        }
        out.input_ids.push(ids);
        out.labels.push(labels);
        out.attention_mask.push(seq.attention_mask.clone());
    }
    Ok(out)
}
