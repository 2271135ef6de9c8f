//! Static 3D k-d tree for nearest-neighbor distance queries.

#[derive(Debug, Clone)]
pub struct KdTree {
    /// Points permuted into implicit-tree order: the median of each range is
    /// the node, the halves left and right of it are its subtrees.
    points: Vec<[f64; 3]>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut pts = points.to_vec();
        build_range(&mut pts, 0);
        Self { points: pts }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Euclidean distance to the nearest stored point, or `None` if empty.
    pub fn nearest_distance(&self, q: &[f64; 3]) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, &mut best);
        Some(best.sqrt())
    }
}

fn build_range(pts: &mut [[f64; 3]], depth: usize) {
    if pts.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (left, right) = pts.split_at_mut(mid);
    build_range(left, depth + 1);
    build_range(&mut right[1..], depth + 1);
}

fn search(pts: &[[f64; 3]], depth: usize, q: &[f64; 3], best: &mut f64) {
    if pts.is_empty() {
        return;
    }
    let mid = pts.len() / 2;
    let node = &pts[mid];
    let d = dist2(node, q);
    if d < *best {
        *best = d;
    }
    let axis = depth % 3;
    let diff = q[axis] - node[axis];
    let (near, far) = if diff < 0.0 { (&pts[..mid], &pts[mid + 1..]) } else { (&pts[mid + 1..], &pts[..mid]) };
    search(near, depth + 1, q, best);
    if diff * diff <= *best {
        search(far, depth + 1, q, best);
    }
}
