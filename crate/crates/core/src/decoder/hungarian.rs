//! Minimum-cost bipartite assignment (Kuhn–Munkres with potentials).

use super::DecoderError;

/// Assigns each of `n_cols` targets a distinct row of a `[n_rows, n_cols]`
/// row-major cost matrix, minimising the total. Returns `col → row`.
pub fn hungarian_match(cost: &[f64], n_rows: usize, n_cols: usize) -> Result<Vec<usize>, DecoderError> {
    if cost.len() != n_rows * n_cols {
        return Err(DecoderError::Matching(format!("{} costs for a {n_rows}x{n_cols} matrix", cost.len())));
    }
    if n_cols > n_rows {
        return Err(DecoderError::Matching(format!(
            "{n_cols} ground-truth segments exceed {n_rows} queries; increase the query count"
        )));
    }
    if let Some(v) = cost.iter().find(|v| !v.is_finite()) {
        return Err(DecoderError::Matching(format!("non-finite cost {v}")));
    }
    if n_cols == 0 {
        return Ok(Vec::new());
    }
    // rows of the solver are targets (n ≤ m), columns are queries
    let (n, m) = (n_cols, n_rows);
    let a = |i: usize, j: usize| cost[(j - 1) * n_cols + (i - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

pub fn assignment_cost(cost: &[f64], n_cols: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(c, &r)| cost[r * n_cols + c]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair() {
        assert_eq!(hungarian_match(&[3.0], 1, 1).unwrap(), vec![0]);
    }

    #[test]
    fn dominant_diagonal_is_identity() {
        let c = [0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0];
        assert_eq!(hungarian_match(&c, 3, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn prefers_the_cheap_spare_row() {
        // 3 queries, 2 targets; row 2 is best for target 0
        let c = [4.0, 1.0, 2.0, 8.0, 0.5, 9.0];
        let a = hungarian_match(&c, 3, 2).unwrap();
        assert_eq!(a, vec![2, 0]);
        assert_eq!(assignment_cost(&c, 2, &a), 1.5);
    }

    #[test]
    fn too_many_targets_is_an_error() {
        assert!(matches!(hungarian_match(&[1.0, 2.0], 1, 2), Err(DecoderError::Matching(_))));
    }
}
