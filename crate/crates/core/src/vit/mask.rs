use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mask_ratio: f64,
    pub tokens: usize,
    /// Sorted, unique, all `< tokens`.
    pub masked_indices: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn visible_indices(&self) -> Vec<usize> {
        let mut masked = vec![false; self.tokens];
        for &i in &self.masked_indices {
            masked[i] = true;
        }
        (0..self.tokens).filter(|&i| !masked[i]).collect()
    }

    pub fn is_masked(&self) -> Vec<bool> {
        let mut m = vec![false; self.tokens];
        for &i in &self.masked_indices {
            m[i] = true;
        }
        m
    }

    pub fn none(tokens: usize) -> Self {
        Self {
            mask_ratio: 0.0,
            tokens,
            masked_indices: Vec::new(),
            seed: 0,
        }
    }
}

/// Masks `floor(ratio · tokens)` tokens uniformly without replacement.
pub fn sample_mask(tokens: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::config(
            "mask_ratio",
            format!("{mask_ratio} not in [0, 1)"),
        ));
    }
    let count = (mask_ratio * tokens as f64).floor() as usize;
    let mut rng = rng::substream(seed, "mask", &[]);
    let mut masked_indices = index::sample(&mut rng, tokens, count).into_vec();
    masked_indices.sort_unstable();
    Ok(MaskPlan {
        mask_ratio,
        tokens,
        masked_indices,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_floor_rule() {
        let p = sample_mask(196, 0.6, 3).unwrap();
        assert_eq!(p.masked_indices.len(), 117);
        assert_eq!(p.visible_indices().len(), 79);
        assert!(sample_mask(196, 0.0, 3).unwrap().masked_indices.is_empty());
        assert!(sample_mask(196, 1.0, 3).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            sample_mask(64, 0.6, 11).unwrap(),
            sample_mask(64, 0.6, 11).unwrap()
        );
        assert_ne!(
            sample_mask(64, 0.6, 11).unwrap(),
            sample_mask(64, 0.6, 12).unwrap()
        );
    }
}
