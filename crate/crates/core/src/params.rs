//! Dense parameter tables and sparse row gradients.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};

/// Row-sparse gradient accumulator over a fixed list of tables.
///
/// Rows are kept in `BTreeMap`s so iteration order, and therefore every
/// downstream floating-point sum, is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    dims: Vec<usize>,
    rows: Vec<BTreeMap<u32, Vec<f64>>>,
}

impl Gradients {
    pub fn new(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            rows: vec![BTreeMap::new(); dims.len()],
        }
    }

    /// Same table layout as `params`.
    pub fn like(params: &[Array2<f64>]) -> Self {
        Self::new(&params.iter().map(|t| t.ncols()).collect::<Vec<_>>())
    }

    pub fn n_tables(&self) -> usize {
        self.dims.len()
    }

    fn row_mut(&mut self, table: usize, row: u32) -> &mut Vec<f64> {
        let d = self.dims[table];
        self.rows[table].entry(row).or_insert_with(|| vec![0.0; d])
    }

    /// `grad[table][row] += scale * v`
    pub fn add(&mut self, table: usize, row: u32, v: ArrayView1<f64>, scale: f64) {
        let g = self.row_mut(table, row);
        for (gi, &vi) in g.iter_mut().zip(v.iter()) {
            *gi += scale * vi;
        }
    }

    pub fn add_slice(&mut self, table: usize, row: u32, v: &[f64], scale: f64) {
        let g = self.row_mut(table, row);
        for (gi, &vi) in g.iter_mut().zip(v) {
            *gi += scale * vi;
        }
    }

    /// Adds `other` into `self`, row by row.
    pub fn merge(&mut self, other: Gradients) {
        for (t, rows) in other.rows.into_iter().enumerate() {
            for (row, g) in rows {
                self.add_slice(t, row, &g, 1.0);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for rows in &mut self.rows {
            for g in rows.values_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    pub fn get(&self, table: usize, row: u32) -> Option<&[f64]> {
        self.rows[table].get(&row).map(Vec::as_slice)
    }

    pub fn table(&self, table: usize) -> impl Iterator<Item = (u32, &[f64])> + '_ {
        self.rows[table].iter().map(|(&r, g)| (r, g.as_slice()))
    }

    pub fn touches(&self, table: usize) -> bool {
        !self.rows[table].is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|rows| rows.values().all(|g| g.iter().all(|x| x.is_finite())))
    }
}

/// Inner product of two equal-length rows.
#[inline]
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn accumulates_and_merges() {
        let mut g = Gradients::new(&[2, 3]);
        g.add(0, 4, array![1.0, 2.0].view(), 2.0);
        let mut h = Gradients::new(&[2, 3]);
        h.add(0, 4, array![1.0, 1.0].view(), 1.0);
        h.add(1, 0, array![1.0, 1.0, 1.0].view(), -1.0);
        g.merge(h);
        assert_eq!(g.get(0, 4), Some(&[3.0, 5.0][..]));
        assert_eq!(g.get(1, 0), Some(&[-1.0, -1.0, -1.0][..]));
        assert!(g.touches(1) && g.get(1, 1).is_none());
    }
}
