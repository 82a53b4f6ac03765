//! Dense linear assignment by shortest augmenting paths.
//!
//! Rows are inserted one at a time; each insertion runs a Dijkstra search
//! over reduced costs `c(i, j) - u[i] - v[j]` and the dual potentials are
//! updated so that reduced costs stay nonnegative on every edge and vanish
//! on matched edges. The result is an exact minimum-cost permutation.

/// Optimal permutation for a square cost matrix.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// `row_to_col[i]` is the column matched to row `i`.
    pub row_to_col: Vec<usize>,
    /// Sum of the matched costs.
    pub total_cost: f64,
}

/// Solves the square assignment problem for a row-major `n x n` cost matrix.
///
/// Costs must be finite.
pub fn solve(n: usize, cost: &[f64]) -> Assignment {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            total_cost: 0.0,
        };
    }

    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut row_for_col = vec![NONE; n];
    let mut col_for_row = vec![NONE; n];

    let mut path = vec![NONE; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut row_seen = vec![false; n];
    let mut col_seen = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    let mut seen_rows: Vec<usize> = Vec::with_capacity(n);
    let mut seen_cols: Vec<usize> = Vec::with_capacity(n);

    // Column then row reduction gives feasible duals; rows whose cheapest
    // reduced column is still free are matched without a search.
    for (j, vj) in v.iter_mut().enumerate() {
        *vj = (0..n).map(|i| cost[i * n + j]).fold(f64::INFINITY, f64::min);
    }
    for i in 0..n {
        let row = &cost[i * n..(i + 1) * n];
        let (mut best, mut best_val) = (0, f64::INFINITY);
        for (j, (&c, &vj)) in row.iter().zip(&v).enumerate() {
            let r = c - vj;
            if r < best_val {
                best_val = r;
                best = j;
            }
        }
        u[i] = best_val;
        if row_for_col[best] == NONE {
            row_for_col[best] = i;
            col_for_row[i] = best;
        }
    }

    for start in 0..n {
        if col_for_row[start] != NONE {
            continue;
        }
        remaining.clear();
        remaining.extend((0..n).rev());
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for &i in &seen_rows {
            row_seen[i] = false;
        }
        for &j in &seen_cols {
            col_seen[j] = false;
        }
        seen_rows.clear();
        seen_cols.clear();

        let mut min_val = 0.0f64;
        let mut i = start;
        let sink = loop {
            row_seen[i] = true;
            seen_rows.push(i);
            let row = &cost[i * n..(i + 1) * n];
            let ui = u[i];
            let mut lowest = f64::INFINITY;
            let mut best = NONE;
            for (slot, &j) in remaining.iter().enumerate() {
                let r = min_val + row[j] - ui - v[j];
                if r < dist[j] {
                    path[j] = i;
                    dist[j] = r;
                }
                let dj = dist[j];
                if dj < lowest || (dj == lowest && row_for_col[j] == NONE) {
                    lowest = dj;
                    best = slot;
                }
            }
            assert!(best != NONE && lowest.is_finite(), "non-finite assignment cost");
            min_val = lowest;
            let j = remaining.swap_remove(best);
            col_seen[j] = true;
            seen_cols.push(j);
            if row_for_col[j] == NONE {
                break j;
            }
            i = row_for_col[j];
        };

        u[start] += min_val;
        for &r in &seen_rows {
            if r != start {
                u[r] += min_val - dist[col_for_row[r]];
            }
        }
        for &c in &seen_cols {
            v[c] -= min_val - dist[c];
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row_for_col[j] = r;
            let previous = std::mem::replace(&mut col_for_row[r], j);
            if r == start {
                break;
            }
            j = previous;
        }
    }

    let total_cost = col_for_row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Assignment {
        row_to_col: col_for_row,
        total_cost,
    }
}
