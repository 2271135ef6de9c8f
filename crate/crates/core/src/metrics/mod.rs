//! Scene- and object-level spatial-fidelity metrics.
//!
//! All distances are Euclidean in normalized scene coordinates: the ground
//! truth's occupied bounding box is centered at the origin and its longest
//! edge scaled to 1.

mod assignment;
mod components;
mod kdtree;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vae::Occupancy;

pub use assignment::min_cost_assignment;
pub use components::{extract_instances, voxel_center, Instance, InstanceSet};
pub use kdtree::KdTree;

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Format("point coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn directed_mean(from: &[Point], to: &KdTree) -> f64 {
    let total: f64 = from.iter().map(|p| to.nearest_distance(p).expect("non-empty tree")).sum();
    total / from.len() as f64
}

fn chamfer_points(x: &[Point], y: &[Point]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(directed_mean(x, &KdTree::build(y)) + directed_mean(y, &KdTree::build(x)))
}

/// Sum of the two mean nearest-neighbor distances.
pub fn chamfer(x: &PointSet, y: &PointSet) -> Result<f64> {
    chamfer_points(&x.points, &y.points)
}

/// Harmonic mean of precision and recall at distance threshold `tau`
/// (strictly closer than `tau` counts as a hit).
pub fn fscore(x: &PointSet, y: &PointSet, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("fscore threshold must be positive, got {tau}")));
    }
    let hits = |from: &[Point], to: &[Point]| {
        let tree = KdTree::build(to);
        from.iter().filter(|p| tree.nearest_distance(p).expect("non-empty tree") < tau).count() as f64
            / from.len() as f64
    };
    let precision = hits(&x.points, &y.points);
    let recall = hits(&y.points, &x.points);
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Centroid Chamfer distance between two centroid sets.
pub fn lcd(pred: &[Point], gt: &[Point]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInstances);
    }
    chamfer_points(pred, gt)
}

/// `min(n_pred, n_gt) / max(n_pred, n_gt)`.
pub fn ssr(n_pred: usize, n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::NoGtInstances);
    }
    Ok(n_pred.min(n_gt) as f64 / n_pred.max(n_gt) as f64)
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Minimum total centroid distance matching, as `(pred, gt)` index pairs.
pub fn match_instances(pred: &[Point], gt: &[Point]) -> Result<Vec<(usize, usize)>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInstances);
    }
    let costs: Vec<f64> = pred.iter().flat_map(|p| gt.iter().map(move |g| dist(p, g))).collect();
    Ok(min_cost_assignment(&costs, pred.len(), gt.len()))
}

/// Uniform subsample of at most `cap` items, in input order (algorithm R).
pub fn reservoir_sample<T: Clone>(items: &[T], cap: usize, rng: &mut Rng) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut chosen: Vec<usize> = (0..cap).collect();
    for i in cap..items.len() {
        let j = rng.int_inclusive(0, i);
        if j < cap {
            chosen[j] = i;
        }
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

/// Affine map from grid units to normalized scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFrame {
    pub center: Point,
    pub scale: f64,
}

impl SceneFrame {
    /// Frame of the occupied bounding box (voxel faces, not centers).
    pub fn from_occupancy(occ: &Occupancy) -> Option<Self> {
        let dims = occ.dims();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in occ.occupied() {
            let c = voxel_center(dims, i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a] - 0.5);
                hi[a] = hi[a].max(c[a] + 0.5);
            }
        }
        if lo[0] > hi[0] {
            return None;
        }
        let longest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        Some(Self { center: [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a])), scale: 1.0 / longest })
    }

    pub fn apply(&self, p: &Point) -> Point {
        [0, 1, 2].map(|a| (p[a] - self.center[a]) * self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub points_cap: usize,
    pub fscore_tau: f64,
    pub min_component_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { points_cap: 2048, fscore_tau: 0.1, min_component_size: 4, seed: 0 }
    }
}

/// One row of the results table; `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricRow {
    pub lcd: Option<f64>,
    pub cd_s: Option<f64>,
    pub fs_s: Option<f64>,
    pub ssr: Option<f64>,
    pub cd_o: Option<f64>,
    pub fs_o: Option<f64>,
    pub time_s: Option<f64>,
}

impl MetricRow {
    pub fn values(&self) -> [Option<f64>; 7] {
        [self.lcd, self.cd_s, self.fs_s, self.ssr, self.cd_o, self.fs_o, self.time_s]
    }

    fn from_values(v: [Option<f64>; 7]) -> Self {
        Self { lcd: v[0], cd_s: v[1], fs_s: v[2], ssr: v[3], cd_o: v[4], fs_o: v[5], time_s: v[6] }
    }

    /// Column-wise arithmetic mean over the defined entries.
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let mut out = [None; 7];
        for (c, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.values()[c]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self::from_values(out)
    }

    /// Comma-joined metric cells without a leading id.
    pub fn csv_cells(&self) -> String {
        self.values().iter().map(|v| format_cell(*v)).collect::<Vec<_>>().join(",")
    }

    pub fn parse_cells(cells: &[&str]) -> Result<Self> {
        if cells.len() != 7 {
            return Err(Error::Format(format!("expected 7 metric cells, got {}", cells.len())));
        }
        let mut v = [None; 7];
        for (slot, cell) in v.iter_mut().zip(cells) {
            *slot = parse_cell(cell)?;
        }
        Ok(Self::from_values(v))
    }
}

pub const UNDEFINED: &str = "undefined";
pub const METRIC_COLUMNS: &str = "LCD,CD_S,FS_S,SSR,CD_O,FS_O,time_s";

pub fn results_header() -> String {
    format!("scene_id,{METRIC_COLUMNS}")
}

pub fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => UNDEFINED.to_string(),
    }
}

pub fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s == UNDEFINED {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format(format!("bad metric cell {s:?}")))
}

/// Per-scene rows followed by a `mean` row.
pub fn results_csv(rows: &[(String, MetricRow)]) -> String {
    let mut s = results_header();
    s.push('\n');
    for (id, row) in rows {
        let _ = writeln!(s, "{id},{}", row.csv_cells());
    }
    let mean = MetricRow::mean(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    let _ = writeln!(s, "mean,{}", mean.csv_cells());
    s
}

/// Parse a results table back into `(id, row)` pairs, including the mean row.
pub fn parse_results_csv(text: &str) -> Result<Vec<(String, MetricRow)>> {
    let mut lines = text.lines();
    if lines.next() != Some(results_header().as_str()) {
        return Err(Error::Format("results header mismatch".into()));
    }
    lines
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            let (id, rest) = cells.split_first().ok_or_else(|| Error::Format("empty results row".into()))?;
            Ok((id.to_string(), MetricRow::parse_cells(rest)?))
        })
        .collect()
}

fn voxel_points(occ_dims: [usize; 3], voxels: &[usize], frame: &SceneFrame) -> Vec<Point> {
    voxels.iter().map(|&i| frame.apply(&voxel_center(occ_dims, i))).collect()
}

/// Scene and object metrics of a predicted occupancy against ground-truth
/// instance grids. `time_s` is left unset.
pub fn evaluate_scene(pred: &Occupancy, gt_instances: &[Occupancy], cfg: &EvalConfig) -> Result<MetricRow> {
    let first = gt_instances.first().ok_or(Error::NoGtInstances)?;
    let dims = first.dims();
    if pred.dims() != dims || gt_instances.iter().any(|g| g.dims() != dims) {
        return Err(Error::Shape("prediction and ground truth grids differ".into()));
    }
    let gt_fused = gt_instances.iter().skip(1).fold(first.clone(), |acc, g| acc.union(g));
    let frame = SceneFrame::from_occupancy(&gt_fused).ok_or(Error::EmptyPointSet)?;
    let cap = cfg.points_cap.max(1);
    let sample = |voxels: &[usize], stream: u64| {
        let pts = voxel_points(dims, voxels, &frame);
        reservoir_sample(&pts, cap, &mut Rng::derived(cfg.seed, stream))
    };

    let gt_set = InstanceSet::from_occupancies(gt_instances);
    let pred_set = extract_instances(pred, cfg.min_component_size);
    let mut row = MetricRow { ssr: Some(ssr(pred_set.len(), gt_set.len())?), ..MetricRow::default() };

    let pred_voxels: Vec<usize> = pred.occupied().collect();
    let gt_voxels: Vec<usize> = gt_fused.occupied().collect();
    if !pred_voxels.is_empty() {
        let x = PointSet::new(sample(&pred_voxels, 1))?;
        let y = PointSet::new(sample(&gt_voxels, 2))?;
        row.cd_s = Some(chamfer(&x, &y)?);
        row.fs_s = Some(fscore(&x, &y, cfg.fscore_tau)?);
    }
    if pred_set.is_empty() {
        return Ok(row);
    }
    let pred_c: Vec<Point> = pred_set.centroids().iter().map(|c| frame.apply(c)).collect();
    let gt_c: Vec<Point> = gt_set.centroids().iter().map(|c| frame.apply(c)).collect();
    row.lcd = Some(lcd(&pred_c, &gt_c)?);
    let pairs = match_instances(&pred_c, &gt_c)?;
    let (mut cd, mut fs) = (0.0, 0.0);
    for (n, &(p, g)) in pairs.iter().enumerate() {
        let stream = 1000 + 2 * n as u64;
        let x = PointSet::new(sample(&pred_set.instances[p].voxels, stream))?;
        let y = PointSet::new(sample(&gt_set.instances[g].voxels, stream + 1))?;
        cd += chamfer(&x, &y)?;
        fs += fscore(&x, &y, cfg.fscore_tau)?;
    }
    row.cd_o = Some(cd / pairs.len() as f64);
    row.fs_o = Some(fs / pairs.len() as f64);
    Ok(row)
}

/// ASCII PLY with `x y z` double properties, 17 significant digits.
pub fn ply_string(points: &PointSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in points.points() {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    s
}

pub fn write_ply(path: &Path, points: &PointSet) -> Result<()> {
    std::fs::write(path, ply_string(points))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_chamfer(x: &[Point], y: &[Point]) -> f64 {
        let directed = |a: &[Point], b: &[Point]| {
            a.iter().map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
        };
        directed(x, y) + directed(y, x)
    }

    fn random_set(rng: &mut Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect()
    }

    fn ps(v: Vec<Point>) -> PointSet {
        PointSet::new(v).unwrap()
    }

    #[test]
    fn chamfer_basic_cases() {
        let mut rng = Rng::new(1);
        let x = ps(random_set(&mut rng, 40));
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        let d = 0.37;
        assert_eq!(chamfer(&ps(vec![[0.0; 3]]), &ps(vec![[d, 0.0, 0.0]])).unwrap(), 2.0 * d);
        assert!(matches!(PointSet::new(vec![]), Err(Error::EmptyPointSet)));
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let x = random_set(&mut rng, 100);
            let y = random_set(&mut rng, 100);
            let fast = chamfer(&ps(x.clone()), &ps(y.clone())).unwrap();
            assert!((fast - brute_chamfer(&x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn fscore_cases() {
        let mut rng = Rng::new(3);
        let x = ps(random_set(&mut rng, 30));
        assert_eq!(fscore(&x, &x, 0.01).unwrap(), 1.0);
        let far = ps(vec![[5.0, 5.0, 5.0]]);
        assert_eq!(fscore(&x, &far, 0.5).unwrap(), 0.0);
        let x = ps(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let y = ps(vec![[0.05, 0.0, 0.0]]);
        assert!((fscore(&x, &y, 0.1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lcd_cases() {
        let c = vec![[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]];
        assert_eq!(lcd(&c, &c).unwrap(), 0.0);
        assert_eq!(lcd(&[[0.0; 3]], &[[0.0, 0.0, 0.25]]).unwrap(), 0.5);
        let v = lcd(&[[0.0; 3], [1.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        let oracle = (0.0 + 1.0) / 2.0 + 0.0 / 1.0;
        assert_eq!(v, oracle);
        assert_eq!(v, 0.5);
        assert!(matches!(lcd(&[], &c), Err(Error::EmptyInstances)));
    }

    #[test]
    fn ssr_cases() {
        assert_eq!(ssr(3, 3).unwrap(), 1.0);
        assert_eq!(ssr(3, 4).unwrap(), 0.75);
        assert_eq!(ssr(4, 3).unwrap(), 0.75);
        assert_eq!(ssr(0, 2).unwrap(), 0.0);
        assert!(ssr(1, 0).unwrap_err().to_string().starts_with("no-gt-instances"));
    }

    fn rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
        // Normalized random quaternion.
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    #[test]
    fn symmetric_and_rigid_invariant() {
        let mut rng = Rng::new(4);
        let x = random_set(&mut rng, 60);
        let y = random_set(&mut rng, 45);
        let cd = chamfer(&ps(x.clone()), &ps(y.clone())).unwrap();
        let fs = fscore(&ps(x.clone()), &ps(y.clone()), 0.15).unwrap();
        assert!((cd - chamfer(&ps(y.clone()), &ps(x.clone())).unwrap()).abs() < 1e-12);
        assert_eq!(fs, fscore(&ps(y.clone()), &ps(x.clone()), 0.15).unwrap());
        let l = lcd(&x[..5], &y[..3]).unwrap();
        assert!((l - lcd(&y[..3], &x[..5]).unwrap()).abs() < 1e-12);
        for _ in 0..10 {
            let r = rotation(&mut rng);
            let t = [rng.normal(), rng.normal(), rng.normal()];
            let mv = |p: &Point| [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i]);
            let xm: Vec<Point> = x.iter().map(mv).collect();
            let ym: Vec<Point> = y.iter().map(mv).collect();
            assert!((chamfer(&ps(xm.clone()), &ps(ym.clone())).unwrap() - cd).abs() < 1e-9);
            assert!((lcd(&xm[..5], &ym[..3]).unwrap() - l).abs() < 1e-9);
            assert_eq!(fscore(&ps(xm), &ps(ym), 0.15).unwrap(), fs);
        }
    }

    #[test]
    fn matching_cases() {
        let c = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        assert_eq!(match_instances(&c, &c).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        let pairs = match_instances(&c, &c[..2]).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(match_instances(&[], &c).is_err());
    }

    #[test]
    fn reservoir_is_subset_and_deterministic() {
        let items: Vec<usize> = (0..5000).collect();
        let a = reservoir_sample(&items, 100, &mut Rng::new(9));
        let b = reservoir_sample(&items, 100, &mut Rng::new(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(reservoir_sample(&items[..10], 100, &mut Rng::new(9)), items[..10].to_vec());
    }

    fn boxes() -> Vec<Occupancy> {
        let mut a = Occupancy::empty([10, 10, 10]);
        let mut b = Occupancy::empty([10, 10, 10]);
        for d in 2..6 {
            for h in 2..5 {
                for w in 1..4 {
                    a.set(d, h, w, true);
                }
                for w in 5..8 {
                    b.set(d, h, w, true);
                }
            }
        }
        vec![a, b]
    }

    #[test]
    fn perfect_prediction() {
        let gt = boxes();
        let pred = gt[0].union(&gt[1]);
        let row = evaluate_scene(&pred, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(row.lcd, Some(0.0));
        assert_eq!(row.cd_s, Some(0.0));
        assert_eq!(row.fs_s, Some(1.0));
        assert_eq!(row.ssr, Some(1.0));
        assert_eq!(row.cd_o, Some(0.0));
        assert_eq!(row.fs_o, Some(1.0));
    }

    #[test]
    fn deleted_instance_halves_ssr() {
        let gt = boxes();
        let row = evaluate_scene(&gt[0], &gt, &EvalConfig::default()).unwrap();
        assert_eq!(row.ssr, Some(0.5));
        assert_eq!(row.cd_o, Some(0.0));
    }

    #[test]
    fn empty_prediction_is_undefined_not_an_error() {
        let gt = boxes();
        let row = evaluate_scene(&Occupancy::empty([10, 10, 10]), &gt, &EvalConfig::default()).unwrap();
        assert_eq!(row.ssr, Some(0.0));
        assert_eq!((row.lcd, row.cd_s, row.fs_s, row.cd_o, row.fs_o), (None, None, None, None, None));
        assert!(row.csv_cells().starts_with("undefined,undefined,undefined,0,"));
    }

    #[test]
    fn mean_skips_undefined() {
        let a = MetricRow { lcd: Some(1.0), ssr: Some(0.5), ..Default::default() };
        let b = MetricRow { lcd: None, ssr: Some(1.0), ..Default::default() };
        let m = MetricRow::mean(&[a, b]);
        assert_eq!(m.lcd, Some(1.0));
        assert_eq!(m.ssr, Some(0.75));
        assert_eq!(m.cd_s, None);
    }

    #[test]
    fn results_csv_round_trip() {
        let rows = vec![
            ("s0".to_string(), MetricRow { lcd: Some(0.125), ssr: Some(1.0), time_s: Some(0.0), ..Default::default() }),
            ("s1".to_string(), MetricRow { lcd: Some(0.1 + 0.2), ssr: Some(0.5), time_s: Some(0.0), ..Default::default() }),
        ];
        let csv = results_csv(&rows);
        assert!(csv.starts_with("scene_id,LCD,CD_S,FS_S,SSR,CD_O,FS_O,time_s\n"));
        let parsed = parse_results_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[..2], rows[..]);
        assert_eq!(parsed[2].0, "mean");
        assert_eq!(parsed[2].1.ssr, Some(0.75));
    }

    #[test]
    fn ply_layout() {
        let p = ps(vec![[0.1, -2.0, 1.0 / 3.0]]);
        let s = ply_string(&p);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[2], "element vertex 1");
        assert_eq!(lines[6], "end_header");
        let coords: Vec<f64> = lines[7].split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(coords, vec![0.1, -2.0, 1.0 / 3.0]);
        assert!(lines[7].starts_with("1.0000000000000001e-1 "));
    }
}
