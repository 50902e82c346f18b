//! Symmetric sparse matrices in upper-triangle compressed column form.
//!
//! Every assembled bilinear form in this crate is symmetric, so only entries
//! with `row <= col` are stored. Construction goes through a coordinate
//! buffer that is sorted and duplicate-summed once, which keeps assembly
//! order-independent and the stored structure deterministic.

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

/// Coordinate-format accumulator for a symmetric matrix. Entries may be
/// pushed in any order and with repeats; `(r, c)` and `(c, r)` address the
/// same logical entry.
pub struct SymCoo {
    pub n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymCoo {
    pub fn new(n: usize) -> Self {
        SymCoo {
            n,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.n && c < self.n);
        if v == 0.0 {
            return;
        }
        if r <= c {
            self.entries.push((r, c, v));
        } else {
            self.entries.push((c, r, v));
        }
    }

    pub fn to_csc(&self) -> SymCsc {
        let mut sorted: Vec<(usize, usize, f64)> = self.entries.clone();
        sorted.sort_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0usize; self.n + 1];
        let mut row_idx: Vec<usize> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut cur_col = 0usize;
        for &(r, c, v) in &sorted {
            while cur_col < c {
                cur_col += 1;
                col_ptr[cur_col] = row_idx.len();
            }
            // Sorted order puts duplicates adjacent; merge into the open entry.
            if row_idx.len() > col_ptr[c] && *row_idx.last().unwrap() == r {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
            }
        }
        while cur_col < self.n {
            cur_col += 1;
            col_ptr[cur_col] = row_idx.len();
        }
        SymCsc {
            n: self.n,
            col_ptr,
            row_idx,
            values,
        }
    }
}

/// Symmetric matrix, upper triangle in compressed sparse column layout.
#[derive(Clone, Debug)]
pub struct SymCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SymCsc {
    pub fn zeros(n: usize) -> Self {
        SymCsc {
            n,
            col_ptr: vec![0; n + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        SymCsc {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// y = A x, expanding the stored upper triangle symmetrically.
    pub fn symv(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.fill(0.0);
        for c in 0..self.n {
            for idx in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[idx];
                let v = self.values[idx];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.symv(x, &mut y);
        y
    }

    /// x^T A x.
    pub fn quad(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        let mut total = 0.0;
        for c in 0..self.n {
            for idx in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[idx];
                let v = self.values[idx];
                total += if r == c {
                    v * x[r] * x[c]
                } else {
                    2.0 * v * x[r] * x[c]
                };
            }
        }
        total
    }

    /// x^T A y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.matvec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    /// Largest absolute entry of the stored triangle (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Linear combination `sum_i coeff_i * A_i`. All matrices must share `n`.
    pub fn lin_comb(terms: &[(f64, &SymCsc)]) -> SymCsc {
        assert!(!terms.is_empty());
        let n = terms[0].1.n;
        let mut coo = SymCoo::new(n);
        for &(coeff, mat) in terms {
            assert_eq!(mat.n, n);
            for c in 0..n {
                for idx in mat.col_ptr[c]..mat.col_ptr[c + 1] {
                    coo.push(mat.row_idx[idx], c, coeff * mat.values[idx]);
                }
            }
        }
        coo.to_csc()
    }

    /// Full (both triangles) dense copy.
    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.n, self.n);
        for c in 0..self.n {
            for idx in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[idx];
                let v = self.values[idx];
                m[(r, c)] = v;
                if r != c {
                    m[(c, r)] = v;
                }
            }
        }
        m
    }

    /// Upper-triangle sparse copy in faer's column format, suitable for
    /// factorizations that read `Side::Upper`.
    pub fn to_faer_upper(&self) -> SparseColMat<usize, f64> {
        let mut triplets = Vec::with_capacity(self.nnz());
        for c in 0..self.n {
            for idx in self.col_ptr[c]..self.col_ptr[c + 1] {
                triplets.push(Triplet::new(self.row_idx[idx], c, self.values[idx]));
            }
        }
        SparseColMat::try_new_from_triplets(self.n, self.n, &triplets)
            .expect("valid triplets by construction")
    }
}
