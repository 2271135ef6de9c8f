//! 6-connected components of occupancy grids.

use std::collections::VecDeque;

use crate::vae::Occupancy;

/// One connected set of voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Scan-order voxel indices, ascending.
    pub voxels: Vec<usize>,
    /// Mean voxel center in grid units (`index + 0.5` per axis).
    pub centroid: [f64; 3],
}

impl Instance {
    pub fn from_voxels(occ_dims: [usize; 3], mut voxels: Vec<usize>) -> Self {
        voxels.sort_unstable();
        let centroid = voxel_centroid(occ_dims, &voxels);
        Self { voxels, centroid }
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }
}

pub fn voxel_center(dims: [usize; 3], i: usize) -> [f64; 3] {
    let w = i % dims[2];
    let h = (i / dims[2]) % dims[1];
    let d = i / (dims[1] * dims[2]);
    [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5]
}

fn voxel_centroid(dims: [usize; 3], voxels: &[usize]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for &i in voxels {
        let c = voxel_center(dims, i);
        for a in 0..3 {
            acc[a] += c[a];
        }
    }
    let n = voxels.len().max(1) as f64;
    acc.map(|x| x / n)
}

/// Ordered instance list: voxel count descending, then smallest voxel index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.instances.iter().map(|i| i.centroid).collect()
    }

    /// Ground-truth instances, one per grid, in the given order.
    pub fn from_occupancies(grids: &[Occupancy]) -> Self {
        let instances = grids
            .iter()
            .map(|g| Instance::from_voxels(g.dims(), g.occupied().collect()))
            .collect();
        Self { instances }
    }
}

/// Face-connected components with at least `min_size` voxels.
pub fn extract_instances(occ: &Occupancy, min_size: usize) -> InstanceSet {
    let dims = occ.dims();
    let [nd, nh, nw] = dims;
    let mut seen = vec![false; occ.len()];
    let mut instances = Vec::new();
    let mut queue = VecDeque::new();
    for seed in occ.occupied() {
        if seen[seed] {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            let [d, h, w] = occ.coords(i);
            let mut visit = |j: usize| {
                if occ.cells()[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if d > 0 {
                visit(i - nh * nw);
            }
            if d + 1 < nd {
                visit(i + nh * nw);
            }
            if h > 0 {
                visit(i - nw);
            }
            if h + 1 < nh {
                visit(i + nw);
            }
            if w > 0 {
                visit(i - 1);
            }
            if w + 1 < nw {
                visit(i + 1);
            }
        }
        if voxels.len() >= min_size {
            instances.push(Instance::from_voxels(dims, voxels));
        }
    }
    // Seeds were visited in scan order, so a stable sort by size keeps the
    // smallest-seed tie-break.
    instances.sort_by(|a, b| b.voxel_count().cmp(&a.voxel_count()));
    InstanceSet { instances }
}
