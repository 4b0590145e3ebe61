use super::DenseMatrix;
use crate::error::{Error, Result};

/// `(rows+1) × (cols+1)` table whose entry `(i, j)` is the sum of the block `[0,i) × [0,j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PrefixTable {
    /// Source matrix dimensions.
    pub fn source_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.cols + 1) + j]
    }

    /// Sum of the `h × w` block whose top-left corner is `(top, left)`.
    #[inline]
    pub fn rect_sum(&self, top: usize, left: usize, h: usize, w: usize) -> f64 {
        let (b, r) = (top + h, left + w);
        self.at(b, r) - self.at(top, r) - self.at(b, left) + self.at(top, left)
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_raw(self.rows + 1, self.cols + 1, self.data.clone())
    }
}

pub fn prefix_sum_2d(m: &DenseMatrix) -> Result<PrefixTable> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("prefix sums need finite entries".into()));
    }
    let (n, c) = m.shape();
    let stride = c + 1;
    let mut data = vec![0.0; (n + 1) * stride];
    for i in 0..n {
        let mut row_acc = 0.0;
        for j in 0..c {
            row_acc += m.get(i, j);
            data[(i + 1) * stride + j + 1] = data[i * stride + j + 1] + row_acc;
        }
    }
    Ok(PrefixTable { rows: n, cols: c, data })
}

/// A contiguous `height × width` block of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSelection {
    pub top_row: usize,
    pub left_col: usize,
    pub height: usize,
    pub width: usize,
    /// Sum of the covered entries, accumulated directly.
    pub score: f64,
}

/// Exact argmax over every contiguous `h × w` window of a nonnegative matrix.
/// Ties resolve to the smallest `(top_row, left_col)`.
pub fn max_sum_window(s: &DenseMatrix, h: usize, w: usize) -> Result<WindowSelection> {
    let (n, m) = s.shape();
    if h == 0 || w == 0 || h > n || w > m {
        return Err(Error::Shape(format!("window {h}x{w} does not fit a {n}x{m} matrix")));
    }
    if s.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("window search needs nonnegative entries".into()));
    }
    let table = prefix_sum_2d(s)?;
    let mut best_fast = f64::NEG_INFINITY;
    for top in 0..=(n - h) {
        for left in 0..=(m - w) {
            best_fast = best_fast.max(table.rect_sum(top, left, h, w));
        }
    }
    // Inclusion–exclusion rounds differently from a direct sum, so every window within
    // rounding distance of the best is re-scored directly before picking the winner.
    let slack = 1e-12 * table.at(n, m);
    let mut best = (0, 0);
    let mut score = f64::NEG_INFINITY;
    for top in 0..=(n - h) {
        for left in 0..=(m - w) {
            if table.rect_sum(top, left, h, w) >= best_fast - slack {
                let direct = block_sum(s, top, left, h, w);
                if direct > score {
                    score = direct;
                    best = (top, left);
                }
            }
        }
    }
    Ok(WindowSelection {
        top_row: best.0,
        left_col: best.1,
        height: h,
        width: w,
        score,
    })
}

pub(crate) fn block_sum(s: &DenseMatrix, top: usize, left: usize, h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    for i in top..top + h {
        for &v in &s.row(i)[left..left + w] {
            acc += v;
        }
    }
    acc
}
