//! Minimum-cost maximum bipartite matching with deterministic tie-breaking.

use crate::error::{Error, Result};

/// Rectangular cost matrix: rows are predictions, columns ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config("cost matrix size mismatch".to_string()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("cost matrix entries must be finite".to_string()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn transpose(&self) -> CostMatrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.at(r, c);
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Shortest-augmenting-path assignment on a square matrix (rows <= cols built
/// by padding). Returns per-row column assignment.
fn solve_padded(cost: &CostMatrix) -> Vec<usize> {
    // Pad with zero-cost dummy rows so the matrix is square with rows == cols.
    debug_assert!(cost.rows <= cost.cols);
    let n = cost.cols;
    let get = |r: usize, c: usize| -> f64 {
        if r < cost.rows {
            cost.at(r, c)
        } else {
            0.0
        }
    };
    let inf = f64::INFINITY;
    // job[w] = row assigned to column w; column n is the virtual start.
    let mut job = vec![usize::MAX; n + 1];
    let mut ys = vec![0.0; n];
    let mut yt = vec![0.0; n + 1];
    for r in 0..n {
        let mut w_cur = n;
        job[w_cur] = r;
        let mut min_to = vec![inf; n + 1];
        let mut prv = vec![usize::MAX; n + 1];
        let mut in_z = vec![false; n + 1];
        while job[w_cur] != usize::MAX {
            in_z[w_cur] = true;
            let j = job[w_cur];
            let mut delta = inf;
            let mut w_next = 0;
            for w in 0..n {
                if in_z[w] {
                    continue;
                }
                let diff = get(j, w) - ys[j] - yt[w];
                if diff < min_to[w] {
                    min_to[w] = diff;
                    prv[w] = w_cur;
                }
                if min_to[w] < delta {
                    delta = min_to[w];
                    w_next = w;
                }
            }
            for w in 0..=n {
                if in_z[w] {
                    ys[job[w]] += delta;
                    yt[w] -= delta;
                } else {
                    min_to[w] -= delta;
                }
            }
            w_cur = w_next;
        }
        // Augment along the path.
        while w_cur != n {
            let w_prev = prv[w_cur];
            job[w_cur] = job[w_prev];
            w_cur = w_prev;
        }
    }
    let mut assign = vec![usize::MAX; n];
    for (w, j) in job.iter().enumerate().take(n) {
        if *j != usize::MAX {
            assign[*j] = w;
        }
    }
    assign
}

fn matching_cost(c: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|(r, col)| c.at(*r, *col)).sum()
}

fn optimal_cost(c: &CostMatrix) -> f64 {
    if c.rows == 0 || c.cols == 0 {
        return 0.0;
    }
    if c.rows > c.cols {
        return optimal_cost(&c.transpose());
    }
    let assign = solve_padded(c);
    (0..c.rows).map(|r| c.at(r, assign[r])).sum()
}

/// Optimal cost when some rows/columns are already fixed or excluded.
fn optimal_cost_reduced(
    c: &CostMatrix,
    fixed: &[(usize, usize)],
    free_rows: &[usize],
    free_cols: &[usize],
    pairs_needed: usize,
) -> f64 {
    let fixed_cost = matching_cost(c, fixed);
    let remaining = pairs_needed - fixed.len();
    if remaining == 0 {
        return fixed_cost;
    }
    let mut data = Vec::with_capacity(free_rows.len() * free_cols.len());
    for r in free_rows {
        for col in free_cols {
            data.push(c.at(*r, *col));
        }
    }
    let sub = CostMatrix {
        rows: free_rows.len(),
        cols: free_cols.len(),
        data,
    };
    fixed_cost + optimal_cost(&sub)
}

/// Min-cost maximum matching: returns min(rows, cols) pairs sorted by row.
/// Among cost-optimal matchings, the lexicographically smallest (by (row,
/// col) pairs scanned in order) is returned.
pub fn hungarian_match(c: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    let pairs_needed = c.rows.min(c.cols);
    if pairs_needed == 0 {
        return Ok(Vec::new());
    }
    let best = optimal_cost(c);
    let tol = 1e-9 * (1.0 + best.abs());
    // Lexicographic refinement: fix pairs greedily in (row, col) order,
    // keeping the total optimal.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(pairs_needed);
    let mut row_used = vec![false; c.rows];
    let mut col_used = vec![false; c.cols];
    for r in 0..c.rows {
        if fixed.len() == pairs_needed {
            break;
        }
        // Can this row stay unmatched? Only if enough other rows remain.
        let rows_left_after_skip = c.rows - r - 1;
        let must_match = fixed.len() + rows_left_after_skip < pairs_needed;
        let mut chosen = None;
        for col in 0..c.cols {
            if col_used[col] {
                continue;
            }
            let mut trial = fixed.clone();
            trial.push((r, col));
            let free_rows: Vec<usize> = (r + 1..c.rows).filter(|rr| !row_used[*rr]).collect();
            let free_cols: Vec<usize> = (0..c.cols).filter(|cc| !col_used[*cc] && *cc != col).collect();
            let cost = optimal_cost_reduced(c, &trial, &free_rows, &free_cols, pairs_needed);
            if cost <= best + tol {
                chosen = Some(col);
                break;
            }
        }
        match chosen {
            Some(col) => {
                fixed.push((r, col));
                row_used[r] = true;
                col_used[col] = true;
            }
            None => {
                if must_match {
                    // Shouldn't happen: some column must keep optimality.
                    return Err(Error::integrity("hungarian refinement failed".to_string()));
                }
            }
        }
    }
    Ok(fixed)
}

/// Exhaustive minimum over all maximum matchings; the test oracle.
pub fn brute_force_min_cost(c: &CostMatrix) -> f64 {
    let k = c.rows.min(c.cols);
    if k == 0 {
        return 0.0;
    }
    fn rec(c: &CostMatrix, r: usize, picked: usize, k: usize, col_used: &mut [bool], acc: f64, best: &mut f64) {
        if picked == k {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if r == c.rows || c.rows - r < k - picked {
            return;
        }
        // Option: skip this row (only legal when enough rows remain).
        if c.rows - r - 1 >= k - picked {
            rec(c, r + 1, picked, k, col_used, acc, best);
        }
        for col in 0..c.cols {
            if col_used[col] {
                continue;
            }
            col_used[col] = true;
            rec(c, r + 1, picked + 1, k, col_used, acc + c.at(r, col), best);
            col_used[col] = false;
        }
    }
    let mut best = f64::INFINITY;
    let mut col_used = vec![false; c.cols];
    rec(c, 0, 0, k, &mut col_used, 0.0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn m(rows: usize, cols: usize, data: Vec<f64>) -> CostMatrix {
        CostMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn diagonal_preferred() {
        let pairs = hungarian_match(&m(2, 2, vec![0.0, 9.0, 9.0, 0.0])).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn single_row_picks_cheapest_column() {
        let pairs = hungarian_match(&m(1, 3, vec![5.0, 1.0, 7.0])).unwrap();
        assert_eq!(pairs, vec![(0, 1)]);
    }

    #[test]
    fn classic_3x3() {
        let pairs = hungarian_match(&m(3, 3, vec![8.0, 5.0, 9.0, 4.0, 2.0, 4.0, 7.0, 3.0, 8.0])).unwrap();
        let cost: f64 = pairs.iter().map(|(r, c)| [8.0, 5.0, 9.0, 4.0, 2.0, 4.0, 7.0, 3.0, 8.0][r * 3 + c]).sum();
        assert_eq!(cost, 15.0);
    }

    #[test]
    fn ties_break_to_lowest_row_col() {
        // All zeros: every matching is optimal; the lexicographic rule must
        // pick the identity pairing.
        let pairs = hungarian_match(&m(3, 3, vec![0.0; 9])).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn more_rows_than_columns_leaves_rows_unmatched() {
        // 3 rows, 1 column: only the cheapest row is matched.
        let pairs = hungarian_match(&m(3, 1, vec![5.0, 1.0, 3.0])).unwrap();
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn negative_costs_handled() {
        let c = m(2, 3, vec![-5.0, 0.0, 1.0, -4.0, -6.0, 2.0]);
        let pairs = hungarian_match(&c).unwrap();
        let total: f64 = pairs.iter().map(|(r, col)| c.at(*r, *col)).sum();
        assert_eq!(total, brute_force_min_cost(&c));
        assert_eq!(total, -11.0);
    }

    #[test]
    fn non_finite_cost_is_domain_error() {
        assert!(CostMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = RngState::new(1234);
        for trial in 0..300 {
            let rows = 1 + (rng.below(6)) as usize;
            let cols = 1 + (rng.below(6)) as usize;
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(-5.0, 10.0)).collect();
            let c = CostMatrix::new(rows, cols, data).unwrap();
            let pairs = hungarian_match(&c).unwrap();
            assert_eq!(pairs.len(), rows.min(cols), "trial {trial}");
            let total: f64 = pairs.iter().map(|(r, col)| c.at(*r, *col)).sum();
            let oracle = brute_force_min_cost(&c);
            assert!(
                (total - oracle).abs() < 1e-9 * (1.0 + oracle.abs()),
                "trial {trial}: got {total}, oracle {oracle}"
            );
        }
    }

    #[test]
    fn permuting_rows_permutes_pairing_but_keeps_cost() {
        let mut rng = RngState::new(77);
        let rows = 4;
        let cols = 4;
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(0.0, 10.0)).collect();
        let c = CostMatrix::new(rows, cols, data.clone()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut pdata = vec![0.0; rows * cols];
        for (new_r, old_r) in perm.iter().enumerate() {
            pdata[new_r * cols..(new_r + 1) * cols].copy_from_slice(&data[old_r * cols..(old_r + 1) * cols]);
        }
        let cp = CostMatrix::new(rows, cols, pdata).unwrap();
        let t1: f64 = hungarian_match(&c).unwrap().iter().map(|(r, col)| c.at(*r, *col)).sum();
        let t2: f64 = hungarian_match(&cp).unwrap().iter().map(|(r, col)| cp.at(*r, *col)).sum();
        assert!((t1 - t2).abs() < 1e-9);
    }
}
