//! Minimum-cost matching of objects by position.

use crate::error::{Error, Result};

/// Largest count solved by exhaustive search.
pub const EXHAUSTIVE_MAX: usize = 8;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Pairwise Euclidean distances, `cost[i][j] = |a_i - b_j|`.
pub fn cost_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().map(|x| b.iter().map(|y| dist(x, y)).collect()).collect()
}

pub fn assignment_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Advance `p` to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search over all permutations in lexicographic order, keeping
/// the first minimum, so ties resolve to the lexicographically smallest.
pub fn exhaustive(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut p: Vec<usize> = (0..n).collect();
    let mut best = p.clone();
    let mut best_cost = assignment_cost(cost, &p);
    while next_permutation(&mut p) {
        let c = assignment_cost(cost, &p);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&p);
        }
    }
    best
}

/// Hungarian algorithm with potentials for `n <= m` rows and columns;
/// returns the column of every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return vec![];
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs at least as many columns as rows");
    // 1-based arrays; column 0 is a virtual start.
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
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Permutation `P` minimizing `sum_i |a_i - b_{P_i}|`.
pub fn optimal_assignment(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::CountMismatch(a.len(), b.len()));
    }
    let cost = cost_matrix(a, b);
    Ok(if a.len() <= EXHAUSTIVE_MAX {
        exhaustive(&cost)
    } else {
        hungarian(&cost)
    })
}

/// Injective matching of the smaller list into the larger one. Returns
/// `(i, j)` pairs with `i` indexing `a` and `j` indexing `b`.
pub fn match_subsets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<(usize, usize)> {
    if a.len() <= b.len() {
        hungarian(&cost_matrix(a, b)).into_iter().enumerate().collect()
    } else {
        hungarian(&cost_matrix(b, a))
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    }
}
