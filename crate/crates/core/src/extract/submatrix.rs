//! Student-shaped selections from a teacher sensitivity matrix.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_sum, max_sum_window, DenseMatrix};

const ALTERNATING_ROUNDS: usize = 10;

/// How a `n_s × m_s` sub-block is chosen from a larger matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubmatrixStrategy {
    /// Best contiguous window.
    Contiguous,
    /// Top rows by full row sums and top columns by full column sums.
    SubsetIndependent,
    /// Alternating row/column reselection seeded with the independent choice.
    SubsetAlternating,
    /// Uniformly random sorted row and column subsets.
    Random { seed: u64 },
    /// Top individual cells, packed row-major into the student shape.
    Neuron,
    /// Top rows, each contributing its top cells.
    #[serde(rename = "rowcol")]
    RowCol,
}

impl SubmatrixStrategy {
    /// Whether selections are row × column index grids (as opposed to cell lists).
    pub fn is_grid(self) -> bool {
        !matches!(self, SubmatrixStrategy::Neuron | SubmatrixStrategy::RowCol)
    }
}

impl fmt::Display for SubmatrixStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubmatrixStrategy::Contiguous => f.write_str("contiguous"),
            SubmatrixStrategy::SubsetIndependent => f.write_str("subset_independent"),
            SubmatrixStrategy::SubsetAlternating => f.write_str("subset_alternating"),
            SubmatrixStrategy::Random { seed } => write!(f, "random:{seed}"),
            SubmatrixStrategy::Neuron => f.write_str("neuron"),
            SubmatrixStrategy::RowCol => f.write_str("rowcol"),
        }
    }
}

impl FromStr for SubmatrixStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiguous" => Ok(Self::Contiguous),
            "subset_independent" => Ok(Self::SubsetIndependent),
            "subset_alternating" => Ok(Self::SubsetAlternating),
            "neuron" => Ok(Self::Neuron),
            "rowcol" => Ok(Self::RowCol),
            _ => match s.strip_prefix("random:").map(str::parse) {
                Some(Ok(seed)) => Ok(Self::Random { seed }),
                _ => Err(Error::Config(format!("unknown submatrix strategy `{s}`"))),
            },
        }
    }
}

/// Chosen source positions for one student matrix.
///
/// Grid strategies fill `row_indices`/`col_indices` and leave `cells` empty; the student
/// entry `(i, j)` comes from source `(row_indices[i], col_indices[j])`. Cell strategies
/// (`neuron`, `rowcol`) leave the index lists empty and list one source cell per student
/// position in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmatrixSelection {
    pub rows: usize,
    pub cols: usize,
    pub row_indices: Vec<usize>,
    pub col_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<(usize, usize)>,
    pub score: f64,
    pub strategy: SubmatrixStrategy,
}

impl SubmatrixSelection {
    fn grid(s: &DenseMatrix, rows: Vec<usize>, cols: Vec<usize>, strategy: SubmatrixStrategy) -> Self {
        let score = grid_score(s, &rows, &cols);
        Self {
            rows: rows.len(),
            cols: cols.len(),
            row_indices: rows,
            col_indices: cols,
            cells: Vec::new(),
            score,
            strategy,
        }
    }

    /// Copies the selected source values into a student-shaped matrix.
    pub fn gather(&self, source: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_bounds(source.rows(), source.cols())?;
        if self.cells.is_empty() {
            Ok(source.gather(&self.row_indices, &self.col_indices))
        } else {
            let mut out = DenseMatrix::zeros(self.rows, self.cols);
            for (k, &(i, j)) in self.cells.iter().enumerate() {
                out.set(k / self.cols, k % self.cols, source.get(i, j));
            }
            Ok(out)
        }
    }

    /// Validates the selection against a source of the given shape.
    pub fn check_bounds(&self, src_rows: usize, src_cols: usize) -> Result<()> {
        let strictly_increasing = |v: &[usize], bound: usize| {
            v.windows(2).all(|w| w[0] < w[1]) && v.last().is_none_or(|&x| x < bound)
        };
        if self.cells.is_empty() {
            if self.row_indices.len() != self.rows || self.col_indices.len() != self.cols {
                return Err(Error::Shape("selection index counts disagree with its shape".into()));
            }
            if !strictly_increasing(&self.row_indices, src_rows) || !strictly_increasing(&self.col_indices, src_cols) {
                return Err(Error::Shape("selection indices must be strictly increasing and in bounds".into()));
            }
        } else {
            if self.cells.len() != self.rows * self.cols {
                return Err(Error::Shape("cell list length disagrees with selection shape".into()));
            }
            if self.cells.iter().any(|&(i, j)| i >= src_rows || j >= src_cols) {
                return Err(Error::Shape("selected cell out of bounds".into()));
            }
        }
        Ok(())
    }
}

fn grid_score(s: &DenseMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &i in rows {
        let r = s.row(i);
        for &j in cols {
            acc += r[j];
        }
    }
    acc
}

/// Indices of the `k` largest values (ties: lower index), returned ascending.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn restricted_row_sums(s: &DenseMatrix, cols: &[usize]) -> Vec<f64> {
    (0..s.rows())
        .map(|i| cols.iter().map(|&j| s.get(i, j)).sum())
        .collect()
}

fn restricted_col_sums(s: &DenseMatrix, rows: &[usize]) -> Vec<f64> {
    let mut sums = vec![0.0; s.cols()];
    for &i in rows {
        for (acc, v) in sums.iter_mut().zip(s.row(i)) {
            *acc += v;
        }
    }
    sums
}

fn check_request(s: &DenseMatrix, n_s: usize, m_s: usize) -> Result<()> {
    if n_s == 0 || m_s == 0 || n_s > s.rows() || m_s > s.cols() {
        return Err(Error::Shape(format!(
            "cannot select {n_s}x{m_s} from a {}x{} matrix",
            s.rows(),
            s.cols()
        )));
    }
    if s.as_slice().iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput("sensitivity entries must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Picks a `n_s × m_s` selection from the sensitivity matrix `s` under `strategy`.
pub fn select_submatrix(s: &DenseMatrix, n_s: usize, m_s: usize, strategy: SubmatrixStrategy) -> Result<SubmatrixSelection> {
    check_request(s, n_s, m_s)?;
    let sel = match strategy {
        SubmatrixStrategy::Contiguous => {
            let w = max_sum_window(s, n_s, m_s)?;
            let rows = (w.top_row..w.top_row + n_s).collect();
            let cols = (w.left_col..w.left_col + m_s).collect();
            SubmatrixSelection::grid(s, rows, cols, strategy)
        }
        SubmatrixStrategy::SubsetIndependent => {
            let (rows, cols) = independent(s, n_s, m_s);
            SubmatrixSelection::grid(s, rows, cols, strategy)
        }
        SubmatrixStrategy::SubsetAlternating => {
            let (mut rows, mut cols) = independent(s, n_s, m_s);
            for _ in 0..ALTERNATING_ROUNDS {
                let new_rows = top_k(&restricted_row_sums(s, &cols), n_s);
                let new_cols = top_k(&restricted_col_sums(s, &new_rows), m_s);
                let done = new_rows == rows && new_cols == cols;
                rows = new_rows;
                cols = new_cols;
                if done {
                    break;
                }
            }
            SubmatrixSelection::grid(s, rows, cols, strategy)
        }
        SubmatrixStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = sample(&mut rng, s.rows(), n_s).into_vec();
            let mut cols = sample(&mut rng, s.cols(), m_s).into_vec();
            rows.sort_unstable();
            cols.sort_unstable();
            SubmatrixSelection::grid(s, rows, cols, strategy)
        }
        SubmatrixStrategy::Neuron => {
            let m = s.cols();
            let flat = top_ranked(s.as_slice(), n_s * m_s);
            let cells: Vec<(usize, usize)> = flat.into_iter().map(|k| (k / m, k % m)).collect();
            cell_selection(s, n_s, m_s, cells, strategy)
        }
        SubmatrixStrategy::RowCol => {
            let rows = top_k(&restricted_row_sums(s, &(0..s.cols()).collect::<Vec<_>>()), n_s);
            let mut cells = Vec::with_capacity(n_s * m_s);
            for &i in &rows {
                cells.extend(top_k(s.row(i), m_s).into_iter().map(|j| (i, j)));
            }
            cell_selection(s, n_s, m_s, cells, strategy)
        }
    };
    Ok(sel)
}

/// Indices of the `k` largest values in rank order (ties: lower index first).
fn top_ranked(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn cell_selection(
    s: &DenseMatrix,
    n_s: usize,
    m_s: usize,
    cells: Vec<(usize, usize)>,
    strategy: SubmatrixStrategy,
) -> SubmatrixSelection {
    let score = cells.iter().map(|&(i, j)| s.get(i, j)).sum();
    SubmatrixSelection {
        rows: n_s,
        cols: m_s,
        row_indices: Vec::new(),
        col_indices: Vec::new(),
        cells,
        score,
        strategy,
    }
}

fn independent(s: &DenseMatrix, n_s: usize, m_s: usize) -> (Vec<usize>, Vec<usize>) {
    let all_cols: Vec<usize> = (0..s.cols()).collect();
    let all_rows: Vec<usize> = (0..s.rows()).collect();
    let rows = top_k(&restricted_row_sums(s, &all_cols), n_s);
    let cols = top_k(&restricted_col_sums(s, &all_rows), m_s);
    (rows, cols)
}

/// Search family for [`brute_force_submatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchFamily {
    Contiguous,
    Subset,
}

/// Largest source accepted by the exhaustive subset search.
pub const BRUTE_FORCE_SUBSET_LIMIT: usize = 12;

/// Exhaustive optimum over the family. Ties resolve to the lexicographically smallest
/// `(rows, cols)` index lists, matching the main strategies.
pub fn brute_force_submatrix(s: &DenseMatrix, n_s: usize, m_s: usize, family: SearchFamily) -> Result<SubmatrixSelection> {
    check_request(s, n_s, m_s)?;
    match family {
        SearchFamily::Contiguous => {
            let mut best = (0, 0);
            let mut best_score = f64::NEG_INFINITY;
            for top in 0..=(s.rows() - n_s) {
                for left in 0..=(s.cols() - m_s) {
                    let v = block_sum(s, top, left, n_s, m_s);
                    if v > best_score {
                        best_score = v;
                        best = (top, left);
                    }
                }
            }
            let rows = (best.0..best.0 + n_s).collect();
            let cols = (best.1..best.1 + m_s).collect();
            Ok(SubmatrixSelection::grid(s, rows, cols, SubmatrixStrategy::Contiguous))
        }
        SearchFamily::Subset => {
            if s.rows() > BRUTE_FORCE_SUBSET_LIMIT || s.cols() > BRUTE_FORCE_SUBSET_LIMIT {
                return Err(Error::Size(format!(
                    "exhaustive subset search is limited to {0}x{0}, got {1}x{2}",
                    BRUTE_FORCE_SUBSET_LIMIT,
                    s.rows(),
                    s.cols()
                )));
            }
            let row_sets = combinations(s.rows(), n_s);
            let col_sets = combinations(s.cols(), m_s);
            let mut best: Option<(f64, usize, usize)> = None;
            for (ri, rows) in row_sets.iter().enumerate() {
                for (ci, cols) in col_sets.iter().enumerate() {
                    let v = grid_score(s, rows, cols);
                    if best.is_none_or(|(b, _, _)| v > b) {
                        best = Some((v, ri, ci));
                    }
                }
            }
            let (_, ri, ci) = best.expect("at least one combination");
            Ok(SubmatrixSelection::grid(
                s,
                row_sets[ri].clone(),
                col_sets[ci].clone(),
                SubmatrixStrategy::SubsetIndependent,
            ))
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < n - k + i {
                break;
            }
        }
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> DenseMatrix {
        DenseMatrix::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, 5.0, 0.0], &[3.0, 0.0, 1.0]]).unwrap()
    }

    #[test]
    fn worked_example_all_grid_strategies() {
        let s = example();
        for strat in [
            SubmatrixStrategy::Contiguous,
            SubmatrixStrategy::SubsetIndependent,
            SubmatrixStrategy::SubsetAlternating,
        ] {
            let sel = select_submatrix(&s, 2, 2, strat).unwrap();
            assert_eq!(sel.row_indices, vec![1, 2], "{strat}");
            assert_eq!(sel.col_indices, vec![0, 1], "{strat}");
            assert_eq!(sel.score, 8.0, "{strat}");
        }
        let bf = brute_force_submatrix(&s, 2, 2, SearchFamily::Subset).unwrap();
        assert_eq!((bf.row_indices, bf.col_indices, bf.score), (vec![1, 2], vec![0, 1], 8.0));
        let bc = brute_force_submatrix(&s, 2, 2, SearchFamily::Contiguous).unwrap();
        assert_eq!((bc.row_indices, bc.col_indices, bc.score), (vec![1, 2], vec![0, 1], 8.0));
    }

    #[test]
    fn full_size_request_takes_everything() {
        let s = example();
        for strat in [
            SubmatrixStrategy::Contiguous,
            SubmatrixStrategy::SubsetIndependent,
            SubmatrixStrategy::SubsetAlternating,
            SubmatrixStrategy::Random { seed: 4 },
        ] {
            let sel = select_submatrix(&s, 3, 3, strat).unwrap();
            assert_eq!(sel.row_indices, vec![0, 1, 2]);
            assert_eq!(sel.col_indices, vec![0, 1, 2]);
            assert_eq!(sel.score, 12.0);
            assert_eq!(sel.gather(&s).unwrap(), s);
        }
        for strat in [SubmatrixStrategy::Neuron, SubmatrixStrategy::RowCol] {
            assert_eq!(select_submatrix(&s, 3, 3, strat).unwrap().score, 12.0);
        }
        let bf = brute_force_submatrix(&DenseMatrix::identity(2), 2, 2, SearchFamily::Subset).unwrap();
        assert_eq!((bf.row_indices, bf.col_indices), (vec![0, 1], vec![0, 1]));
    }

    #[test]
    fn neuron_packs_top_cells_in_rank_order() {
        let s = example();
        let sel = select_submatrix(&s, 2, 2, SubmatrixStrategy::Neuron).unwrap();
        assert_eq!(sel.cells, vec![(1, 1), (2, 0), (0, 2), (0, 0)]);
        assert_eq!(sel.score, 11.0);
        let g = sel.gather(&s).unwrap();
        assert_eq!(g.as_slice(), &[5.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn rowcol_takes_rows_then_their_best_cells() {
        let s = example();
        let sel = select_submatrix(&s, 2, 2, SubmatrixStrategy::RowCol).unwrap();
        // row sums [3, 5, 4] → rows 1, 2; row 1 best cells {1, 0}, row 2 best cells {0, 2}
        assert_eq!(sel.cells, vec![(1, 0), (1, 1), (2, 0), (2, 2)]);
        assert_eq!(sel.score, 9.0);
    }

    #[test]
    fn random_is_seeded_and_sorted() {
        let s = DenseMatrix::from_fn(10, 9, |i, j| (i * j) as f64);
        let a = select_submatrix(&s, 4, 3, SubmatrixStrategy::Random { seed: 9 }).unwrap();
        let b = select_submatrix(&s, 4, 3, SubmatrixStrategy::Random { seed: 9 }).unwrap();
        assert_eq!(a, b);
        a.check_bounds(10, 9).unwrap();
    }

    #[test]
    fn errors() {
        let s = example();
        assert!(matches!(select_submatrix(&s, 4, 1, SubmatrixStrategy::Contiguous), Err(Error::Shape(_))));
        let big = DenseMatrix::zeros(13, 3);
        assert!(matches!(brute_force_submatrix(&big, 2, 2, SearchFamily::Subset), Err(Error::Size(_))));
        assert!(brute_force_submatrix(&big, 2, 2, SearchFamily::Contiguous).is_ok());
    }

    #[test]
    fn strategy_strings_round_trip() {
        for s in ["contiguous", "subset_independent", "subset_alternating", "random:17", "neuron", "rowcol"] {
            assert_eq!(s.parse::<SubmatrixStrategy>().unwrap().to_string(), s);
        }
        assert!("random:x".parse::<SubmatrixStrategy>().is_err());
    }

    #[test]
    fn combinations_enumerate_lexicographically() {
        assert_eq!(combinations(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
    }
}
