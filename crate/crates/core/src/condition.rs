//! Image-side condition tokens and per-instance token masks.

use crate::error::{Error, Result};
use crate::vae::LATENT_CHANNELS;

/// `M = Gh * Gw` condition tokens laid out row-major over the image grid.
///
/// Each payload is a latent-channel code; background tokens carry
/// [`crate::vae::EMPTY_CODE`]. Image rows run along the latent H axis and
/// image columns along W; positions are normalized token centers in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    grid: (usize, usize),
    payloads: Vec<[f64; LATENT_CHANNELS]>,
    pos2d: Vec<[f64; 2]>,
}

impl ConditionSet {
    /// Tokens on a regular grid with centers at `((i + 0.5) / Gh, (j + 0.5) / Gw)`.
    pub fn on_grid(grid: (usize, usize), payloads: Vec<[f64; LATENT_CHANNELS]>) -> Result<Self> {
        let (gh, gw) = grid;
        let pos2d = (0..gh)
            .flat_map(|i| (0..gw).map(move |j| [(i as f64 + 0.5) / gh as f64, (j as f64 + 0.5) / gw as f64]))
            .collect();
        Self::new(grid, payloads, pos2d)
    }

    pub fn new(grid: (usize, usize), payloads: Vec<[f64; LATENT_CHANNELS]>, pos2d: Vec<[f64; 2]>) -> Result<Self> {
        let m = grid.0 * grid.1;
        if payloads.len() != m || pos2d.len() != m {
            return Err(Error::Shape(format!(
                "token grid {grid:?} needs {m} tokens, got {} payloads and {} positions",
                payloads.len(),
                pos2d.len()
            )));
        }
        if payloads.iter().flatten().chain(pos2d.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::Shape("condition tokens must be finite".into()));
        }
        Ok(Self { grid, payloads, pos2d })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn payloads(&self) -> &[[f64; LATENT_CHANNELS]] {
        &self.payloads
    }

    pub fn pos2d(&self) -> &[[f64; 2]] {
        &self.pos2d
    }
}

/// `K` binary masks over the `M` condition tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMaskSet {
    token_count: usize,
    masks: Vec<Vec<bool>>,
}

impl InstanceMaskSet {
    pub fn new(masks: Vec<Vec<bool>>) -> Result<Self> {
        let token_count = masks.first().map_or(0, Vec::len);
        for (k, mask) in masks.iter().enumerate() {
            if mask.len() != token_count {
                return Err(Error::MaskDim(format!(
                    "mask {k} has {} entries, expected {token_count}",
                    mask.len()
                )));
            }
            if !mask.iter().any(|&b| b) {
                return Err(Error::MaskDim(format!("mask {k} selects no tokens")));
            }
        }
        Ok(Self { token_count, masks })
    }

    /// Build from lists of selected token indices.
    pub fn from_indices(token_count: usize, indices: &[Vec<usize>]) -> Result<Self> {
        let mut masks = Vec::with_capacity(indices.len());
        for (k, idx) in indices.iter().enumerate() {
            let mut mask = vec![false; token_count];
            for &i in idx {
                if i >= token_count {
                    return Err(Error::MaskDim(format!("mask {k} index {i} >= {token_count}")));
                }
                mask[i] = true;
            }
            masks.push(mask);
        }
        Self::new(masks)
    }

    pub fn instance_count(&self) -> usize {
        self.masks.len()
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn mask(&self, k: usize) -> &[bool] {
        &self.masks[k]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn indices(&self, k: usize) -> Vec<usize> {
        self.masks[k].iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Reorder instances: new instance `i` is old instance `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            token_count: self.token_count,
            masks: order.iter().map(|&k| self.masks[k].clone()).collect(),
        }
    }

    pub fn is_disjoint(&self) -> bool {
        (0..self.token_count).all(|m| self.masks.iter().filter(|mask| mask[m]).count() <= 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_rejected() {
        let err = InstanceMaskSet::new(vec![vec![true, false], vec![false, false]]).unwrap_err();
        assert!(err.to_string().starts_with("mask-dim"));
    }

    #[test]
    fn ragged_masks_rejected() {
        assert!(matches!(
            InstanceMaskSet::new(vec![vec![true], vec![true, false]]),
            Err(Error::MaskDim(_))
        ));
    }

    #[test]
    fn grid_positions() {
        let c = ConditionSet::on_grid((2, 4), vec![[0.0; 4]; 8]).unwrap();
        assert_eq!(c.pos2d()[0], [0.25, 0.125]);
        assert_eq!(c.pos2d()[7], [0.75, 0.875]);
        assert!(ConditionSet::on_grid((2, 2), vec![[0.0; 4]; 3]).is_err());
    }
}
