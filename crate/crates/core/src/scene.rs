//! Seeded synthetic multi-instance scenes with exact ground truth.
//!
//! Instances are boxes, ellipsoids or L-shaped prisms. The first instance is
//! placed at random; every later one is slid toward a randomly chosen, already
//! placed anchor until its separation from that anchor equals `gap`, while
//! keeping at least `gap` from all others. Separation between two voxel sets
//! is the Chebyshev distance between their closest voxels minus one, i.e. the
//! number of empty voxels between them. With `gap = 0` the placement is also
//! required to produce a shared face so the fused grid is one 6-connected
//! component.
//!
//! Condition tokens come from an orthographic projection along the depth
//! axis (`d = 0` is nearest to the viewer). Image rows follow H, columns W.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condition::{ConditionSet, InstanceMaskSet};
use crate::error::{Error, Result};
use crate::field::{read_blob, write_blob, Dims};
use crate::metrics::voxel_center;
use crate::rng::Rng;
use crate::vae::{Occupancy, EMPTY_CODE, LATENT_CHANNELS};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Box,
    Sphere,
    #[serde(rename = "l-shape")]
    LShape,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Box, ShapeKind::Sphere, ShapeKind::LShape];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub dims: Dims,
    pub instance_count: usize,
    /// One kind per instance; empty means drawn at random.
    pub shapes: Vec<ShapeKind>,
    pub size_min: usize,
    pub size_max: usize,
    pub gap: usize,
    pub token_grid: (usize, usize),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            instance_count: 2,
            shapes: Vec::new(),
            size_min: 4,
            size_max: 6,
            gap: 0,
            token_grid: (16, 16),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(2..=4).contains(&self.instance_count) {
            return bad(format!("instance_count must be in [2, 4], got {}", self.instance_count));
        }
        if self.gap > 2 {
            return bad(format!("gap must be 0, 1 or 2, got {}", self.gap));
        }
        if self.size_min < 2 || self.size_min > self.size_max {
            return bad(format!("bad size range {}..={}", self.size_min, self.size_max));
        }
        if self.dims.iter().any(|&n| n < self.size_max) {
            return bad(format!("grid {:?} is smaller than size_max {}", self.dims, self.size_max));
        }
        if !self.shapes.is_empty() && self.shapes.len() != self.instance_count {
            return bad(format!("{} shapes given for {} instances", self.shapes.len(), self.instance_count));
        }
        let (gh, gw) = self.token_grid;
        if gh == 0 || gw == 0 || gh > self.dims[1] || gw > self.dims[2] {
            return bad(format!("token grid {:?} does not fit the image plane of {:?}", self.token_grid, self.dims));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub instances: Vec<Occupancy>,
    pub fused: Occupancy,
    /// Mean voxel centers in grid units.
    pub centroids: Vec<[f64; 3]>,
    pub cond: ConditionSet,
    pub masks: InstanceMaskSet,
}

impl SceneRecord {
    pub fn dims(&self) -> Dims {
        self.fused.dims()
    }
}

fn rasterize(kind: ShapeKind, size: [usize; 3], flip: [bool; 2]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for d in 0..size[0] {
        for h in 0..size[1] {
            for w in 0..size[2] {
                let inside = match kind {
                    ShapeKind::Box => true,
                    ShapeKind::Sphere => {
                        let r = |i: usize, n: usize| (i as f64 + 0.5 - n as f64 / 2.0) / (n as f64 / 2.0);
                        r(d, size[0]).powi(2) + r(h, size[1]).powi(2) + r(w, size[2]).powi(2) <= 1.0
                    }
                    ShapeKind::LShape => {
                        // Remove one quadrant of the H-W cross-section.
                        let hh = if flip[0] { size[1] - 1 - h } else { h };
                        let ww = if flip[1] { size[2] - 1 - w } else { w };
                        !(hh >= size[1] / 2 && ww >= size[2] / 2)
                    }
                };
                if inside {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

struct Shape {
    size: [usize; 3],
    cells: Vec<[usize; 3]>,
}

fn draw_shape(kind: ShapeKind, spec: &SceneSpec, rng: &mut Rng) -> Shape {
    let size = [0; 3].map(|_| rng.int_inclusive(spec.size_min, spec.size_max));
    let flip = [rng.uniform() < 0.5, rng.uniform() < 0.5];
    Shape { size, cells: rasterize(kind, size, flip) }
}

fn place(shape: &Shape, origin: [usize; 3], dims: Dims) -> Occupancy {
    let mut occ = Occupancy::empty(dims);
    for c in &shape.cells {
        occ.set(origin[0] + c[0], origin[1] + c[1], origin[2] + c[2], true);
    }
    occ
}

/// Chebyshev distance from every voxel to the nearest occupied voxel of `occ`
/// (26-neighborhood breadth-first search).
fn chebyshev_distance(occ: &Occupancy) -> Vec<usize> {
    let dims = occ.dims();
    let mut dist = vec![usize::MAX; occ.len()];
    let mut queue = VecDeque::new();
    for i in occ.occupied() {
        dist[i] = 0;
        queue.push_back(i);
    }
    while let Some(i) = queue.pop_front() {
        let [d, h, w] = occ.coords(i);
        for dd in -1i64..=1 {
            for dh in -1i64..=1 {
                for dw in -1i64..=1 {
                    let (nd, nh, nw) = (d as i64 + dd, h as i64 + dh, w as i64 + dw);
                    if nd < 0 || nh < 0 || nw < 0 || nd >= dims[0] as i64 || nh >= dims[1] as i64 || nw >= dims[2] as i64 {
                        continue;
                    }
                    let j = occ.index(nd as usize, nh as usize, nw as usize);
                    if dist[j] == usize::MAX {
                        dist[j] = dist[i] + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    dist
}

/// Empty voxels between two instances (`-1` when they overlap).
pub fn separation(a: &Occupancy, b: &Occupancy) -> i64 {
    let dist = chebyshev_distance(a);
    separation_with(&dist, b)
}

fn separation_with(dist_a: &[usize], b: &Occupancy) -> i64 {
    b.occupied().map(|i| dist_a[i] as i64 - 1).min().unwrap_or(i64::MAX)
}

fn shares_face(a: &Occupancy, b: &Occupancy) -> bool {
    let dims = a.dims();
    b.occupied().any(|i| {
        let [d, h, w] = b.coords(i);
        let mut n = Vec::with_capacity(6);
        if d > 0 {
            n.push(a.index(d - 1, h, w));
        }
        if d + 1 < dims[0] {
            n.push(a.index(d + 1, h, w));
        }
        if h > 0 {
            n.push(a.index(d, h - 1, w));
        }
        if h + 1 < dims[1] {
            n.push(a.index(d, h + 1, w));
        }
        if w > 0 {
            n.push(a.index(d, h, w - 1));
        }
        if w + 1 < dims[2] {
            n.push(a.index(d, h, w + 1));
        }
        n.into_iter().any(|j| a.cells()[j])
    })
}

fn bbox(occ: &Occupancy) -> ([usize; 3], [usize; 3]) {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    for i in occ.occupied() {
        let c = occ.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a] + 1);
        }
    }
    (lo, hi)
}

/// Slide `shape` toward `anchor` along a random image-plane axis until the
/// separation reaches `gap`; `None` if the attempt is infeasible.
fn place_against(
    shape: &Shape,
    anchor: &Occupancy,
    anchor_dist: &[usize],
    placed: &[(Occupancy, Vec<usize>)],
    gap: usize,
    dims: Dims,
    rng: &mut Rng,
) -> Option<Occupancy> {
    let (lo, hi) = bbox(anchor);
    let axis = 1 + rng.int_inclusive(0, 1);
    let positive = rng.uniform() < 0.5;
    let mut origin = [0usize; 3];
    for a in 0..3 {
        if a == axis {
            continue;
        }
        // Overlap the anchor's extent on the other axes.
        let min_o = (lo[a] + 1).saturating_sub(shape.size[a]);
        let max_o = (hi[a] - 1).min(dims[a] - shape.size[a]);
        if min_o > max_o {
            return None;
        }
        origin[a] = rng.int_inclusive(min_o, max_o);
    }
    let n = dims[axis];
    let s = shape.size[axis];
    // Start at the far edge and move toward the anchor one voxel at a time.
    let positions: Vec<usize> = if positive { (hi[axis].saturating_sub(s)..=n - s).rev().collect() } else { (0..=lo[axis].min(n - s)).collect() };
    for p in positions {
        origin[axis] = p;
        let occ = place(shape, origin, dims);
        let sep = separation_with(anchor_dist, &occ);
        if sep <= gap as i64 {
            if sep != gap as i64 {
                return None;
            }
            if gap == 0 && !shares_face(anchor, &occ) {
                return None;
            }
            let clear = placed.iter().all(|(_, dist)| separation_with(dist, &occ) >= gap as i64);
            return clear.then_some(occ);
        }
    }
    None
}

/// Nearest occupied voxel along the depth axis within each token footprint.
struct Projection {
    /// Per token: `(instance, depth code)` of the visible surface, if any.
    visible: Vec<Option<(usize, f64)>>,
}

fn project(instances: &[Occupancy], grid: (usize, usize)) -> Projection {
    let dims = instances[0].dims();
    let (gh, gw) = grid;
    let mut visible = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let rows = i * dims[1] / gh..(i + 1) * dims[1] / gh;
            let cols = j * dims[2] / gw..(j + 1) * dims[2] / gw;
            // (depth, h, w, instance) of the nearest occupied voxel.
            let mut best: Option<(usize, usize, usize, usize)> = None;
            for h in rows.clone() {
                for w in cols.clone() {
                    for (k, inst) in instances.iter().enumerate() {
                        if let Some(d) = (0..dims[0]).find(|&d| inst.get(d, h, w)) {
                            let cand = (d, h, w, k);
                            if best.is_none_or(|b| cand < b) {
                                best = Some(cand);
                            }
                        }
                    }
                }
            }
            visible.push(best.map(|(d, h, w, k)| {
                // Depth code: center of the owning instance's run through this column.
                let inst = &instances[k];
                let end = (d..dims[0]).find(|&dd| !inst.get(dd, h, w)).unwrap_or(dims[0]);
                let mid = 0.5 * (d + end) as f64 / dims[0] as f64;
                (k, mid)
            }));
        }
    }
    Projection { visible }
}

/// Payload of a visible object token: occupancy, depth code, instance code.
pub fn object_payload(depth: f64, instance: usize, instance_count: usize) -> [f64; LATENT_CHANNELS] {
    let code = if instance_count > 1 { 1.0 - 2.0 * instance as f64 / (instance_count - 1) as f64 } else { 0.0 };
    let angle = std::f64::consts::PI * depth;
    [1.0, angle.cos(), angle.sin(), code]
}

fn centroid(occ: &Occupancy) -> [f64; 3] {
    let dims = occ.dims();
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for i in occ.occupied() {
        let c = voxel_center(dims, i);
        for a in 0..3 {
            acc[a] += c[a];
        }
        n += 1.0;
    }
    acc.map(|x| x / n)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneRecord> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = Rng::new(spec.seed);
    'attempt: for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let kinds: Vec<ShapeKind> = if spec.shapes.is_empty() {
            (0..spec.instance_count).map(|_| ShapeKind::ALL[rng.int_inclusive(0, 2)]).collect()
        } else {
            spec.shapes.clone()
        };
        let mut placed: Vec<(Occupancy, Vec<usize>)> = Vec::new();
        for (k, &kind) in kinds.iter().enumerate() {
            let shape = draw_shape(kind, spec, &mut rng);
            let occ = if k == 0 {
                let origin = [0, 1, 2].map(|a| rng.int_inclusive(0, dims[a] - shape.size[a]));
                place(&shape, origin, dims)
            } else {
                let anchor = rng.int_inclusive(0, k - 1);
                let (a_occ, a_dist) = &placed[anchor];
                let others: Vec<(Occupancy, Vec<usize>)> =
                    placed.iter().enumerate().filter(|(i, _)| *i != anchor).map(|(_, p)| p.clone()).collect();
                match place_against(&shape, a_occ, a_dist, &others, spec.gap, dims, &mut rng) {
                    Some(occ) => occ,
                    None => continue 'attempt,
                }
            };
            let dist = chebyshev_distance(&occ);
            placed.push((occ, dist));
        }
        let instances: Vec<Occupancy> = placed.into_iter().map(|(o, _)| o).collect();
        let projection = project(&instances, spec.token_grid);
        let mut owners = vec![Vec::new(); spec.instance_count];
        let mut payloads = Vec::with_capacity(projection.visible.len());
        for (m, vis) in projection.visible.iter().enumerate() {
            match vis {
                Some((k, depth)) => {
                    owners[*k].push(m);
                    payloads.push(object_payload(*depth, *k, spec.instance_count));
                }
                None => payloads.push(EMPTY_CODE),
            }
        }
        if owners.iter().any(Vec::is_empty) {
            // An instance is fully occluded.
            continue;
        }
        let fused = instances.iter().skip(1).fold(instances[0].clone(), |acc, o| acc.union(o));
        let centroids = instances.iter().map(centroid).collect();
        let cond = ConditionSet::on_grid(spec.token_grid, payloads)?;
        let masks = InstanceMaskSet::from_indices(cond.len(), &owners)?;
        return Ok(SceneRecord { spec: spec.clone(), instances, fused, centroids, cond, masks });
    }
    Err(Error::PackingFailed(MAX_PLACEMENT_ATTEMPTS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneFile {
    spec: SceneSpec,
    centroids: Vec<[f64; 3]>,
    masks: Vec<Vec<usize>>,
    payloads: Vec<[f64; LATENT_CHANNELS]>,
}

fn occupancy_shape(dims: Dims) -> Vec<usize> {
    vec![1, dims[0], dims[1], dims[2]]
}

pub fn save_occupancy(stem: &Path, occ: &Occupancy) -> Result<()> {
    write_blob(stem, &occupancy_shape(occ.dims()), &occ.to_f64())
}

pub fn load_occupancy(stem: &Path) -> Result<Occupancy> {
    let (shape, data) = read_blob(stem)?;
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Format(format!("{}: occupancy blob must have shape [1,D,H,W], got {shape:?}", stem.display())));
    }
    Ok(Occupancy::from_f64([shape[1], shape[2], shape[3]], &data))
}

impl SceneRecord {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = SceneFile {
            spec: self.spec.clone(),
            centroids: self.centroids.clone(),
            masks: (0..self.masks.instance_count()).map(|k| self.masks.indices(k)).collect(),
            payloads: self.cond.payloads().to_vec(),
        };
        std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&file)? + "\n")?;
        save_occupancy(&dir.join("fused"), &self.fused)?;
        for (k, inst) in self.instances.iter().enumerate() {
            save_occupancy(&dir.join(format!("inst_{k}")), inst)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("scene.json"))?;
        let file: SceneFile = serde_json::from_str(&text)?;
        let instances = (0..file.masks.len())
            .map(|k| load_occupancy(&dir.join(format!("inst_{k}"))))
            .collect::<Result<Vec<_>>>()?;
        if instances.is_empty() {
            return Err(Error::NoGtInstances);
        }
        let fused = load_occupancy(&dir.join("fused"))?;
        let union = instances.iter().skip(1).fold(instances[0].clone(), |acc, o| acc.union(o));
        if union != fused {
            return Err(Error::Format(format!("{}: fused grid is not the union of instance grids", dir.display())));
        }
        let cond = ConditionSet::on_grid(file.spec.token_grid, file.payloads)?;
        let masks = InstanceMaskSet::from_indices(cond.len(), &file.masks)?;
        Ok(Self { spec: file.spec, instances, fused, centroids: file.centroids, cond, masks })
    }
}
