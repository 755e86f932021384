//! Compressed sparse row matrices with a coordinate text format.
//!
//! The text format is one header line `rows cols nnz` followed by one
//! `row col value` line per stored entry, in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from per-row `(column, value)` lists. Columns within a
    /// row are sorted; duplicates are rejected.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::input(format!("duplicate entry ({i}, {})", w[0].0)));
                }
            }
            for (j, v) in row {
                if j >= cols {
                    return Err(Error::dim(format!("column {j} out of range for {cols} columns")));
                }
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            rows: indptr.len() - 1,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.indptr[i]..self.indptr[i + 1];
        match self.indices[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            for p in self.indptr[i]..self.indptr[i + 1] {
                out.values[p] = f(i, self.indices[p], self.values[p]);
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                rows[j].push((i, v));
            }
        }
        SparseMatrix::from_rows(self.rows, rows).expect("transpose of a valid matrix")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Keeps entries with `keep(row, col, value)` true.
    pub fn filter(&self, keep: impl Fn(usize, usize, f64) -> bool) -> Self {
        let rows = (0..self.rows)
            .map(|i| self.row(i).filter(|&(j, v)| keep(i, j, v)).collect())
            .collect();
        SparseMatrix::from_rows(self.cols, rows).expect("subset of a valid matrix")
    }

    pub fn to_coordinate_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.rows, self.cols, self.nnz());
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                writeln!(s, "{i} {j} {v}").expect("writing to a String");
            }
        }
        s
    }

    pub fn from_coordinate_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::parse(origin, "missing header"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(origin, format!("bad header '{header}'"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::parse(origin, "header must be 'rows cols nnz'"));
        }
        let mut rows = vec![Vec::new(); dims[0]];
        let mut count = 0;
        for (ln, line) in lines.enumerate() {
            let t: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::parse(origin, format!("line {}: expected 'row col value'", ln + 2));
            if t.len() != 3 {
                return Err(bad());
            }
            let i: usize = t[0].parse().map_err(|_| bad())?;
            let j: usize = t[1].parse().map_err(|_| bad())?;
            let v: f64 = t[2].parse().map_err(|_| bad())?;
            if i >= dims[0] {
                return Err(Error::parse(origin, format!("row {i} out of range")));
            }
            rows[i].push((j, v));
            count += 1;
        }
        if count != dims[2] {
            return Err(Error::parse(origin, format!("header says {} entries, found {count}", dims[2])));
        }
        SparseMatrix::from_rows(dims[1], rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_coordinate_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_coordinate_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseMatrix {
        SparseMatrix::from_rows(3, vec![vec![(2, 0.5), (1, -0.25)], vec![], vec![(0, 1.0 / 3.0)]]).unwrap()
    }

    #[test]
    fn access_and_dense() {
        let m = sample();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 1), -0.25);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.row(0).collect::<Vec<_>>(), vec![(1, -0.25), (2, 0.5)]);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let m = sample();
        let back = SparseMatrix::from_coordinate_text(&m.to_coordinate_text(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_duplicates_and_bad_text() {
        assert!(SparseMatrix::from_rows(2, vec![vec![(0, 1.0), (0, 2.0)]]).is_err());
        assert!(SparseMatrix::from_coordinate_text("2 2 1\n0 5\n", Path::new("mem")).is_err());
        assert!(SparseMatrix::from_coordinate_text("2 2 2\n0 1 1.0\n", Path::new("mem")).is_err());
    }
}
