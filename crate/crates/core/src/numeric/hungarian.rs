//! Minimum-cost bipartite assignment (Kuhn-Munkres with potentials, O(n^2 m)).

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Minimum-total-cost assignment for an `(n, m)` cost matrix.
///
/// Returns `min(n, m)` `(row, col)` pairs sorted by row. The result is a
/// deterministic function of the matrix.
pub fn hungarian(cost: &Tensor) -> Result<Vec<(usize, usize)>> {
    let (n, m) = cost.dims2();
    if cost.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in assignment cost matrix".into()));
    }
    if cost.data().iter().any(|v| v.is_infinite()) {
        return Err(Error::Input("infinite entry in assignment cost matrix".into()));
    }
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = if n <= m {
        solve(n, m, |i, j| cost.get(i, j))
    } else {
        solve(m, n, |i, j| cost.get(j, i))
            .into_iter()
            .map(|(r, c)| (c, r))
            .collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
}

// Rows are 1-based inside, column 0 is the virtual start column.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_preferred() {
        let c = Tensor::matrix(3, 3, vec![0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0]).unwrap();
        assert_eq!(hungarian(&c).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn two_by_two() {
        let c = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &a), 2.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = Tensor::matrix(2, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(assignment_cost(&c, &a), 3.0);
        let a = hungarian(&c.transpose()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(assignment_cost(&c.transpose(), &a), 3.0);
    }

    #[test]
    fn nan_rejected_and_empty_ok() {
        let c = Tensor::matrix(1, 2, vec![f64::NAN, 1.0]).unwrap();
        assert!(hungarian(&c).is_err());
        assert!(hungarian(&Tensor::zeros(&[0, 3])).unwrap().is_empty());
    }
}
