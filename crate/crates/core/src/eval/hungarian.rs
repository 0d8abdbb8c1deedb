//! Minimum-cost assignment.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column chosen for each row; `None` when a row of a tall matrix is
    /// left on a padding column.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

/// Optimal assignment of rows to distinct columns minimizing total cost.
/// Rectangular inputs are padded to square with zeros. Among optimal
/// assignments the lexicographically smallest column sequence is returned.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    if !cost.is_finite() {
        return Err(Error::InvalidConfig("assignment costs must be finite".into()));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let size = n.max(m);
    if size == 0 {
        return Ok(Assignment {
            row_to_col: Vec::new(),
            cost: 0.0,
        });
    }
    let mut square = Matrix::zeros(size, size);
    for i in 0..n {
        square.row_mut(i)[..m].copy_from_slice(cost.row(i));
    }
    let cols = lexicographic_optimum(&square);
    let total = (0..n).filter(|&i| cols[i] < m).map(|i| cost.get(i, cols[i])).sum();
    Ok(Assignment {
        row_to_col: (0..n).map(|i| (cols[i] < m).then_some(cols[i])).collect(),
        cost: total,
    })
}

/// Fix rows in order to the smallest column that still admits an optimal
/// completion.
fn lexicographic_optimum(square: &Matrix) -> Vec<usize> {
    let size = square.rows();
    let scale = square.as_slice().iter().fold(1.0f64, |a, &x| a.max(x.abs()));
    let tol = 1e-9 * scale * size as f64;
    let (optimum, _) = solve_square(square, &(0..size).collect::<Vec<_>>(), &(0..size).collect::<Vec<_>>());

    let mut fixed_cost = 0.0;
    let mut free_cols: Vec<usize> = (0..size).collect();
    let mut result = Vec::with_capacity(size);
    for row in 0..size {
        let rest_rows: Vec<usize> = (row + 1..size).collect();
        let mut chosen = None;
        for (k, &col) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let (rest, _) = solve_square(square, &rest_rows, &rest_cols);
            if fixed_cost + square.get(row, col) + rest <= optimum + tol {
                chosen = Some(k);
                break;
            }
        }
        // the optimal completion always exists; fall back to the best
        // remaining column only if rounding rejected every candidate
        let k = chosen.unwrap_or_else(|| {
            let (_, cols) = solve_square(square, &(row..size).collect::<Vec<_>>(), &free_cols);
            free_cols.iter().position(|&c| c == cols[0]).unwrap_or(0)
        });
        let col = free_cols.remove(k);
        fixed_cost += square.get(row, col);
        result.push(col);
    }
    result
}

/// Shortest augmenting path with potentials on the submatrix selected by
/// `rows` x `cols` (equal lengths). Returns the optimal cost and, for each
/// selected row, the chosen original column.
fn solve_square(a: &Matrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let cost = |i: usize, j: usize| a.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut assigned = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        assigned[p[j] - 1] = cols[j - 1];
        total += cost(p[j], j);
    }
    (total, assigned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};

    /// Every permutation of `0..n` in lexicographic order.
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if prefix.len() == used.len() {
                out.push(prefix.clone());
                return;
            }
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    prefix.push(c);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[c] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }

    /// First minimum in lexicographic order.
    fn brute_force(a: &Matrix) -> (f64, Vec<usize>) {
        let mut best = (f64::INFINITY, Vec::new());
        for perm in permutations(a.rows()) {
            let c: f64 = perm.iter().enumerate().map(|(i, &j)| a.get(i, j)).sum();
            if c < best.0 - 1e-9 {
                best = (c, perm);
            }
        }
        best
    }

    #[test]
    fn two_by_two() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let r = hungarian(&a).unwrap();
        assert_eq!(r.row_to_col, vec![Some(1), Some(0)]);
        assert_eq!(r.cost, 3.0);
        assert_eq!(brute_force(&a), (3.0, vec![1, 0]));
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let mut a = Matrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    a.set(i, j, 1.0 + (i * 5 + j) as f64);
                }
            }
        }
        let r = hungarian(&a).unwrap();
        assert_eq!(r.row_to_col, (0..5).map(Some).collect::<Vec<_>>());
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = Rng::new(11, Stream::Theory);
        for n in 2..=6 {
            for trial in 0..30 {
                let mut a = Matrix::zeros(n, n);
                for x in a.as_mut_slice() {
                    // integer costs exercise ties
                    *x = if trial % 2 == 0 { rng.below(4) as f64 } else { rng.normal() };
                }
                let r = hungarian(&a).unwrap();
                let (cost, perm) = brute_force(&a);
                assert!((r.cost - cost).abs() < 1e-9);
                assert_eq!(r.row_to_col, perm.into_iter().map(Some).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn all_ties_pick_identity() {
        let a = Matrix::from_rows(&vec![vec![2.0; 4]; 4]).unwrap();
        let r = hungarian(&a).unwrap();
        assert_eq!(r.row_to_col, (0..4).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn rectangular_inputs() {
        let wide = Matrix::from_rows(&[vec![5.0, 1.0, 3.0], vec![1.0, 4.0, 0.5]]).unwrap();
        let r = hungarian(&wide).unwrap();
        assert_eq!(r.row_to_col, vec![Some(1), Some(2)]);
        assert_eq!(r.cost, 1.5);

        let tall = Matrix::from_rows(&[vec![-1.0], vec![-5.0], vec![-2.0]]).unwrap();
        let r = hungarian(&tall).unwrap();
        assert_eq!(r.row_to_col, vec![None, Some(0), None]);
        assert_eq!(r.cost, -5.0);

        assert_eq!(hungarian(&Matrix::zeros(0, 0)).unwrap().cost, 0.0);
        let mut bad = Matrix::zeros(1, 1);
        bad.set(0, 0, f64::NAN);
        assert!(hungarian(&bad).is_err());
    }
}
