//! Rectangular linear assignment by shortest augmenting paths.
//!
//! Rows are added one at a time; each addition runs a Dijkstra-style search
//! over reduced costs `c[i][j] - u[i] - v[j]` and augments along the
//! cheapest alternating path, keeping the dual potentials feasible. This is
//! the augmentation phase of Jonker–Volgenant; for `n` rows and `m ≥ n`
//! columns it runs in `O(n² m)` time with `O(m)` scratch.

/// Minimum-cost assignment of every row to a distinct column.
///
/// `costs` is row-major `rows × cols` with `rows ≤ cols`; all entries must be
/// finite. Returns the column chosen for each row.
pub(crate) fn min_cost_assignment(costs: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "more rows than columns");
    assert_eq!(costs.len(), rows * cols);
    if rows == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| costs[i * cols + j];

    // Index 0 of `col_owner`/`path` is a virtual column; rows and real columns
    // are 1-based inside the search.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut col_owner = vec![0usize; cols + 1];
    let mut path = vec![0usize; cols + 1];
    let mut min_reduced = vec![0.0f64; cols + 1];
    let mut visited = vec![false; cols + 1];

    for row in 1..=rows {
        col_owner[0] = row;
        let mut col = 0usize;
        min_reduced.fill(f64::INFINITY);
        visited.fill(false);
        loop {
            visited[col] = true;
            let i = col_owner[col];
            let mut delta = f64::INFINITY;
            let mut next = 0usize;
            for j in 1..=cols {
                if visited[j] {
                    continue;
                }
                let reduced = cost(i - 1, j - 1) - u[i] - v[j];
                if reduced < min_reduced[j] {
                    min_reduced[j] = reduced;
                    path[j] = col;
                }
                if min_reduced[j] < delta {
                    delta = min_reduced[j];
                    next = j;
                }
            }
            for j in 0..=cols {
                if visited[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_reduced[j] -= delta;
                }
            }
            col = next;
            if col_owner[col] == 0 {
                break;
            }
        }
        // Flip the alternating path back to the virtual column.
        loop {
            let prev = path[col];
            col_owner[col] = col_owner[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; rows];
    for j in 1..=cols {
        if col_owner[j] != 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}
