use nalgebra::DMatrix;

use crate::error::{Result, SvieError};

/// Matrix-valued function on the discrete triangle `{(i, j) : j < i <= N}`,
/// optionally including the diagonal slots `(i, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriField {
    n: usize,
    rows: usize,
    cols: usize,
    with_diagonal: bool,
    data: Vec<DMatrix<f64>>,
}

impl TriField {
    pub fn zeros(n: usize, rows: usize, cols: usize, with_diagonal: bool) -> Self {
        let len = if with_diagonal {
            (n + 1) * (n + 2) / 2
        } else {
            n * (n + 1) / 2
        };
        Self {
            n,
            rows,
            cols,
            with_diagonal,
            data: vec![DMatrix::zeros(rows, cols); len],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn has_diagonal(&self) -> bool {
        self.with_diagonal
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        if self.with_diagonal {
            debug_assert!(j <= i && i <= self.n, "triangle index ({i},{j}) out of domain");
            i * (i + 1) / 2 + j
        } else {
            debug_assert!(j < i && i <= self.n, "triangle index ({i},{j}) out of domain");
            i * (i - 1) / 2 + j
        }
    }

    pub fn in_domain(&self, i: usize, j: usize) -> bool {
        i <= self.n && if self.with_diagonal { j <= i } else { j < i }
    }

    pub fn get(&self, i: usize, j: usize) -> &DMatrix<f64> {
        assert!(
            self.in_domain(i, j),
            "triangle index ({i},{j}) out of domain (N={}, diagonal={})",
            self.n,
            self.with_diagonal
        );
        &self.data[self.offset(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: DMatrix<f64>) {
        assert!(self.in_domain(i, j), "triangle index ({i},{j}) out of domain");
        assert_eq!(
            (value.nrows(), value.ncols()),
            (self.rows, self.cols),
            "entry shape mismatch at ({i},{j})"
        );
        let o = self.offset(i, j);
        self.data[o] = value;
    }

    /// Strict-triangle iteration, diagonal slots excluded.
    pub fn iter_strict(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        (1..=self.n).flat_map(move |i| (0..i).map(move |j| (i, j, self.get(i, j))))
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        let data: Vec<_> = self.data.iter().map(&f).collect();
        let (rows, cols) = data
            .first()
            .map(|m| (m.nrows(), m.ncols()))
            .unwrap_or((self.rows, self.cols));
        Self {
            n: self.n,
            rows,
            cols,
            with_diagonal: self.with_diagonal,
            data,
        }
    }

    pub fn checked_get(&self, i: usize, j: usize) -> Result<&DMatrix<f64>> {
        if self.in_domain(i, j) {
            Ok(&self.data[self.offset(i, j)])
        } else {
            Err(SvieError::OutOfDomain(format!(
                "triangle index ({i},{j}) with N={}",
                self.n
            )))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

/// Matrix-valued function on the discrete square pyramid
/// `{(i, j, k) : 1 <= i, j <= N, 0 <= k <= min(i, j)}`.
///
/// The slot `k = min(i, j)` carries the diagonal boundary value; the corner
/// `(i, i, i)` is kept for indexing uniformity and is zero unless set.
#[derive(Debug, Clone, PartialEq)]
pub struct PyrTensor {
    n: usize,
    dim: usize,
    symmetric: bool,
    offsets: Vec<usize>,
    data: Vec<DMatrix<f64>>,
}

impl PyrTensor {
    pub fn zeros(n: usize, dim: usize, symmetric: bool) -> Self {
        let mut offsets = vec![0usize; n * n + 1];
        let mut total = 0usize;
        for i in 1..=n {
            for j in 1..=n {
                offsets[(i - 1) * n + (j - 1)] = total;
                total += i.min(j) + 1;
            }
        }
        offsets[n * n] = total;
        Self {
            n,
            dim,
            symmetric,
            offsets,
            data: vec![DMatrix::zeros(dim, dim); total],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_symmetric_flagged(&self) -> bool {
        self.symmetric
    }

    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        assert!(
            (1..=self.n).contains(&i) && (1..=self.n).contains(&j) && k <= i.min(j),
            "pyramid index ({i},{j},{k}) out of domain (N={})",
            self.n
        );
        self.offsets[(i - 1) * self.n + (j - 1)] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> &DMatrix<f64> {
        &self.data[self.offset(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: DMatrix<f64>) {
        assert_eq!(
            (value.nrows(), value.ncols()),
            (self.dim, self.dim),
            "entry shape mismatch at ({i},{j},{k})"
        );
        let o = self.offset(i, j, k);
        self.data[o] = value;
    }

    /// Largest violation of `P[(i,j,k)] == P[(j,i,k)]^T` over stored entries.
    pub fn symmetry_residual(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 1..=self.n {
            for j in 1..=self.n {
                for k in 0..=i.min(j) {
                    let diff = self.get(i, j, k) - self.get(j, i, k).transpose();
                    worst = worst.max(diff.amax());
                }
            }
        }
        worst
    }

    /// Overwrites every pair of mirrored slots with their symmetric average.
    pub fn symmetrize(&mut self) {
        for i in 1..=self.n {
            for j in 1..=i {
                for k in 0..=j.min(i) {
                    let avg = (self.get(i, j, k) + self.get(j, i, k).transpose()) * 0.5;
                    self.set(j, i, k, avg.transpose());
                    self.set(i, j, k, avg);
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}
