//! Minimum-cost bipartite assignment: the Hungarian algorithm for the
//! per-sample matching step, an exhaustive solver that can also fold in a
//! per-permutation cost, and lexicographic permutation ranking used to index
//! the permutation head.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AssignmentError {
    NotSquare { n: usize, len: usize },
    NonFinite { row: usize, col: usize },
    NotAPermutation(Vec<usize>),
    RankOutOfRange { n: usize, rank: u64 },
    TooLarge { n: usize, max: usize },
    ExtraCostLength { expected: u64, got: usize },
}

impl fmt::Display for AssignmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssignmentError::NotSquare { n, len } => {
                write!(f, "cost matrix of side {n} needs {} entries, got {len}", n * n)
            }
            AssignmentError::NonFinite { row, col } => {
                write!(f, "non-finite cost at ({row}, {col})")
            }
            AssignmentError::NotAPermutation(m) => write!(f, "{m:?} is not a permutation"),
            AssignmentError::RankOutOfRange { n, rank } => {
                write!(f, "rank {rank} out of range for n={n}")
            }
            AssignmentError::TooLarge { n, max } => {
                write!(f, "n={n} exceeds the exhaustive-solver limit {max}")
            }
            AssignmentError::ExtraCostLength { expected, got } => {
                write!(f, "per-permutation cost table needs {expected} entries, got {got}")
            }
        }
    }
}

impl std::error::Error for AssignmentError {}

/// Square matrix of finite matching costs; rows index targets, columns index
/// output slots.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, costs: Vec<f64>) -> Result<Self, AssignmentError> {
        if costs.len() != n * n {
            return Err(AssignmentError::NotSquare { n, len: costs.len() });
        }
        for (i, &c) in costs.iter().enumerate() {
            if !c.is_finite() {
                return Err(AssignmentError::NonFinite { row: i / n, col: i % n });
            }
        }
        Ok(CostMatrix { n, costs })
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.n + col]
    }
}

/// A bijection: `mapping()[row]` is the column assigned to `row`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    mapping: Vec<usize>,
}

impl Assignment {
    pub fn new(mapping: Vec<usize>) -> Result<Self, AssignmentError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(AssignmentError::NotAPermutation(mapping));
            }
            seen[m] = true;
        }
        Ok(Assignment { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Assignment { mapping: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    /// Row assigned to `col` (the inverse direction).
    pub fn row_of(&self, col: usize) -> usize {
        self.mapping.iter().position(|&c| c == col).expect("valid column")
    }

    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.mapping
            .iter()
            .enumerate()
            .map(|(row, &col)| costs.at(row, col))
            .sum()
    }
}

pub fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

/// Minimum-total-cost assignment via shortest augmenting paths with dual
/// potentials, O(n^3). Returns the assignment and its total cost.
pub fn hungarian(costs: &CostMatrix) -> (Assignment, f64) {
    let n = costs.n;
    if n == 0 {
        return (Assignment { mapping: Vec::new() }, 0.0);
    }
    const NONE: usize = usize::MAX;
    // column n is a virtual start column
    let mut row_potential = vec![0.0f64; n];
    let mut col_potential = vec![0.0f64; n + 1];
    let mut col_row = vec![NONE; n + 1]; // row matched to each column
    let mut prev_col = vec![0usize; n + 1];

    for row in 0..n {
        col_row[n] = row;
        let mut j0 = n;
        let mut min_to_col = vec![f64::INFINITY; n + 1];
        let mut visited = vec![false; n + 1];
        loop {
            visited[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 0..n {
                if visited[j] {
                    continue;
                }
                let reduced = costs.at(i0, j) - row_potential[i0] - col_potential[j];
                if reduced < min_to_col[j] {
                    min_to_col[j] = reduced;
                    prev_col[j] = j0;
                }
                if min_to_col[j] < delta {
                    delta = min_to_col[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if visited[j] {
                    if col_row[j] != NONE {
                        row_potential[col_row[j]] += delta;
                    }
                    col_potential[j] -= delta;
                } else {
                    min_to_col[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == NONE {
                break;
            }
        }
        // augment along the found path
        while j0 != n {
            let j1 = prev_col[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
        }
    }

    let mut mapping = vec![0usize; n];
    for col in 0..n {
        mapping[col_row[col]] = col;
    }
    let assignment = Assignment { mapping };
    let total = assignment.total_cost(costs);
    (assignment, total)
}

/// Largest side accepted by the exhaustive solver (n! permutations).
pub const BRUTE_FORCE_MAX: usize = 8;

/// Exact minimizer by enumerating all n! permutations. `extra_perm_cost`,
/// when given, adds a cost per permutation indexed by lexicographic rank,
/// which lets the caller include a term that depends on the whole ordering
/// rather than on individual pairs.
pub fn brute_force_assignment(
    costs: &CostMatrix,
    extra_perm_cost: Option<&[f64]>,
) -> Result<(Assignment, f64), AssignmentError> {
    let n = costs.n;
    if n > BRUTE_FORCE_MAX {
        return Err(AssignmentError::TooLarge { n, max: BRUTE_FORCE_MAX });
    }
    let total = factorial(n);
    if let Some(extra) = extra_perm_cost {
        if extra.len() as u64 != total {
            return Err(AssignmentError::ExtraCostLength { expected: total, got: extra.len() });
        }
    }
    let mut best_rank = 0u64;
    let mut best_cost = f64::INFINITY;
    for rank in 0..total {
        let perm = perm_unrank(n, rank)?;
        let mut c = perm.total_cost(costs);
        if let Some(extra) = extra_perm_cost {
            c += extra[rank as usize];
        }
        if c < best_cost {
            best_cost = c;
            best_rank = rank;
        }
    }
    Ok((perm_unrank(n, best_rank)?, best_cost))
}

/// Lexicographic rank of a permutation (Lehmer code, factorial base).
pub fn perm_rank(mapping: &[usize]) -> Result<u64, AssignmentError> {
    let perm = Assignment::new(mapping.to_vec())?;
    let n = perm.len();
    let mut rank = 0u64;
    for i in 0..n {
        let smaller_later = perm.mapping[i + 1..]
            .iter()
            .filter(|&&m| m < perm.mapping[i])
            .count() as u64;
        rank += smaller_later * factorial(n - 1 - i);
    }
    Ok(rank)
}

/// Inverse of [`perm_rank`].
pub fn perm_unrank(n: usize, rank: u64) -> Result<Assignment, AssignmentError> {
    if rank >= factorial(n) {
        return Err(AssignmentError::RankOutOfRange { n, rank });
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut r = rank;
    let mut mapping = Vec::with_capacity(n);
    for i in 0..n {
        let f = factorial(n - 1 - i);
        let idx = (r / f) as usize;
        r %= f;
        mapping.push(remaining.remove(idx));
    }
    Ok(Assignment { mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn matrix(n: usize, vals: &[f64]) -> CostMatrix {
        CostMatrix::new(n, vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_diagonal_two_by_two() {
        let (a, cost) = hungarian(&matrix(2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(a.mapping(), &[0, 1]);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn singleton() {
        let (a, cost) = hungarian(&matrix(1, &[1.0]));
        assert_eq!(a.mapping(), &[0]);
        assert_eq!(cost, 1.0);
    }

    #[test]
    fn known_three_by_three() {
        let (_, cost) = hungarian(&matrix(3, &[8.0, 5.0, 9.0, 4.0, 2.0, 4.0, 7.0, 3.0, 8.0]));
        assert_eq!(cost, 15.0); // 8 + 4 + 3
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = Rng::new(21);
        for n in 1..=6 {
            for _ in 0..200 {
                let costs = matrix(n, &(0..n * n).map(|_| rng.f64()).collect::<Vec<_>>());
                let (_, h) = hungarian(&costs);
                let (_, b) = brute_force_assignment(&costs, None).unwrap();
                assert!((h - b).abs() < 1e-12, "n={n}: hungarian {h} vs brute {b}");
            }
        }
    }

    #[test]
    fn row_constant_shift_preserves_argmin_structure() {
        let mut rng = Rng::new(22);
        for _ in 0..50 {
            let n = 4;
            let vals: Vec<f64> = (0..n * n).map(|_| rng.f64()).collect();
            let costs = matrix(n, &vals);
            let (a0, c0) = hungarian(&costs);
            let shift = rng.range_f64(-3.0, 3.0);
            let row = rng.below(n);
            let mut shifted = vals.clone();
            for col in 0..n {
                shifted[row * n + col] += shift;
            }
            let shifted = matrix(n, &shifted);
            let (a1, c1) = hungarian(&shifted);
            assert!((c1 - (c0 + shift)).abs() < 1e-9);
            // both assignments must be optimal in both matrices
            assert!((a0.total_cost(&shifted) - c1).abs() < 1e-9);
            assert!((a1.total_cost(&costs) - c0).abs() < 1e-9);
        }
    }

    #[test]
    fn brute_force_extra_cost_dominates() {
        let costs = matrix(3, &[0.0; 9]);
        let mut extra = vec![1.0; 6];
        extra[4] = 0.0;
        let (a, cost) = brute_force_assignment(&costs, Some(&extra)).unwrap();
        assert_eq!(perm_rank(a.mapping()).unwrap(), 4);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn brute_force_guards_size() {
        let costs = matrix(9, &vec![0.0; 81]);
        assert!(matches!(
            brute_force_assignment(&costs, None),
            Err(AssignmentError::TooLarge { .. })
        ));
    }

    #[test]
    fn non_square_and_non_finite_rejected() {
        assert!(CostMatrix::new(2, vec![0.0; 3]).is_err());
        assert!(CostMatrix::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_ranks_zero() {
        for n in 1..=6 {
            let id: Vec<usize> = (0..n).collect();
            assert_eq!(perm_rank(&id).unwrap(), 0);
        }
    }

    #[test]
    fn reversed_is_last_rank() {
        assert_eq!(perm_rank(&[2, 1, 0]).unwrap(), 5);
    }

    #[test]
    fn rank_unrank_round_trip() {
        for n in 0..=6 {
            for rank in 0..factorial(n) {
                let perm = perm_unrank(n, rank).unwrap();
                assert_eq!(perm_rank(perm.mapping()).unwrap(), rank);
            }
        }
    }

    #[test]
    fn unrank_out_of_range() {
        assert!(perm_unrank(3, 6).is_err());
    }

    #[test]
    fn invalid_permutation_rejected() {
        assert!(perm_rank(&[0, 0, 1]).is_err());
        assert!(Assignment::new(vec![1, 2]).is_err());
    }
}
