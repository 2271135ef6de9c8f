//! Minimum-cost rectangular assignment (Hungarian method with potentials).

/// Optimal assignment for an `n x m` cost matrix given row-major.
///
/// Returns `(row, col)` pairs sorted by row, `min(n, m)` of them. Among
/// equal-cost optima the one found by processing rows (or columns, when
/// `n > m`) in index order is returned.
pub fn min_cost_assignment(costs: &[f64], n: usize, m: usize) -> Vec<(usize, usize)> {
    assert_eq!(costs.len(), n * m, "cost matrix size");
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n <= m {
        solve(n, m, |i, j| costs[i * m + j])
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(m, n, |i, j| costs[j * m + i]).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Rows `0..n` onto distinct columns `0..m`, `n <= m`.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn total(costs: &[f64], m: usize, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| costs[i * m + j]).sum()
    }

    /// Exhaustive search over injective maps from the smaller side.
    fn exhaustive(costs: &[f64], n: usize, m: usize) -> f64 {
        fn rec(costs: &[f64], n: usize, m: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, swap: bool) {
            let rows = if swap { m } else { n };
            let cols = if swap { n } else { m };
            if row == rows {
                *best = best.min(acc);
                return;
            }
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    let x = if swap { costs[c * m + row] } else { costs[row * m + c] };
                    rec(costs, n, m, row + 1, used, acc + x, best, swap);
                    used[c] = false;
                }
            }
        }
        let swap = n > m;
        let mut used = vec![false; if swap { n } else { m }];
        let mut best = f64::INFINITY;
        rec(costs, n, m, 0, &mut used, 0.0, &mut best, swap);
        best
    }

    #[test]
    fn identity_on_zero_diagonal() {
        let costs = [0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0];
        assert_eq!(min_cost_assignment(&costs, 3, 3), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn crossed_nearest_neighbors() {
        // Row 0's cheapest column is 0, but taking it forces row 1 onto a very
        // expensive column.
        let costs = [1.0, 2.0, 1.5, 100.0];
        let pairs = min_cost_assignment(&costs, 2, 2);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(total(&costs, 2, &pairs), 3.5);
    }

    #[test]
    fn rectangular_cardinality() {
        let costs = [0.5, 0.2, 0.9, 0.1, 0.3, 0.8];
        let pairs = min_cost_assignment(&costs, 3, 2);
        assert_eq!(pairs.len(), 2);
        let t = min_cost_assignment(&[0.5, 0.9, 0.3, 0.2, 0.1, 0.8], 2, 3);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = Rng::new(77);
        for case in 0..50 {
            let n = 1 + rng.int_inclusive(0, 5);
            let m = 1 + rng.int_inclusive(0, 5);
            let costs: Vec<f64> = (0..n * m).map(|_| rng.uniform_range(0.0, 10.0)).collect();
            let pairs = min_cost_assignment(&costs, n, m);
            assert_eq!(pairs.len(), n.min(m));
            let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), n.min(m));
            assert_eq!(cols.len(), n.min(m));
            let got = total(&costs, m, &pairs);
            let best = exhaustive(&costs, n, m);
            assert!((got - best).abs() < 1e-9, "case {case}: {got} vs {best}");
        }
    }
}
