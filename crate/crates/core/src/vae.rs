//! Resolution-preserving toy autoencoder between binary occupancy grids and
//! four-channel latent fields.

use crate::field::{Dims, LatentField};

/// Number of latent channels produced by [`toy_encode`].
pub const LATENT_CHANNELS: usize = 4;

/// Latent code of empty space.
pub const EMPTY_CODE: [f64; LATENT_CHANNELS] = [-1.0, 0.0, 0.0, 0.0];

/// Binary voxel grid in the same `(D, H, W)` row-major order as latent tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Occupancy {
    dims: Dims,
    cells: Vec<bool>,
}

impl Occupancy {
    pub fn empty(dims: Dims) -> Self {
        Self { dims, cells: vec![false; dims[0] * dims[1] * dims[2]] }
    }

    pub fn full(dims: Dims) -> Self {
        Self { dims, cells: vec![true; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_cells(dims: Dims, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), dims[0] * dims[1] * dims[2], "occupancy cell count");
        Self { dims, cells }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let w = i % self.dims[2];
        let h = (i / self.dims[2]) % self.dims[1];
        let d = i / (self.dims[1] * self.dims[2]);
        [d, h, w]
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.cells[self.index(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, value: bool) {
        let i = self.index(d, h, w);
        self.cells[i] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Indices of occupied voxels in scan order.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i)
    }

    /// Voxelwise OR; panics on mismatched dims.
    pub fn union(&self, other: &Occupancy) -> Occupancy {
        assert_eq!(self.dims, other.dims);
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a || *b).collect();
        Occupancy { dims: self.dims, cells }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }

    /// Interpret values as occupied when `> 0.5`.
    pub fn from_f64(dims: Dims, values: &[f64]) -> Self {
        Self::from_cells(dims, values.iter().map(|&x| x > 0.5).collect())
    }
}

/// Channel 0 is `2 occ - 1`; channels 1..4 are zero.
pub fn toy_encode(occ: &Occupancy) -> LatentField {
    let mut z = LatentField::zeros(LATENT_CHANNELS, occ.dims());
    for (slot, &c) in z.channel_mut(0).iter_mut().zip(occ.cells()) {
        *slot = if c { 1.0 } else { -1.0 };
    }
    z
}

/// A voxel is occupied when channel 0 is strictly positive.
pub fn toy_decode(z: &LatentField) -> Occupancy {
    let cells = z.channel(0).iter().map(|&x| x > 0.0).collect();
    Occupancy::from_cells(z.dims(), cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_empty_and_full() {
        let z = toy_encode(&Occupancy::empty([3, 3, 3]));
        assert!(z.channel(0).iter().all(|&x| x == -1.0));
        let z = toy_encode(&Occupancy::full([3, 3, 3]));
        assert!(z.channel(0).iter().all(|&x| x == 1.0));
        assert!((1..4).all(|c| z.channel(c).iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn encode_single_voxel() {
        let mut occ = Occupancy::empty([4, 4, 4]);
        occ.set(1, 2, 3, true);
        let z = toy_encode(&occ);
        for i in 0..64 {
            let expected = if i == occ.index(1, 2, 3) { 1.0 } else { -1.0 };
            assert_eq!(z.channel(0)[i], expected);
        }
    }

    #[test]
    fn decode_threshold_is_strict() {
        let z = LatentField::zeros(4, [2, 2, 2]);
        assert_eq!(toy_decode(&z).count(), 0);
        let mut z = LatentField::filled(1, [3, 3, 3], -0.3);
        z.set(0, 1, 1, 1, 0.3);
        let occ = toy_decode(&z);
        assert_eq!(occ.count(), 1);
        assert!(occ.get(1, 1, 1));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(cells in proptest::collection::vec(any::<bool>(), 60)) {
            let occ = Occupancy::from_cells([3, 4, 5], cells);
            prop_assert_eq!(toy_decode(&toy_encode(&occ)), occ);
        }
    }
}
