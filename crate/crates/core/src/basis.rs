//! Zeroth-order HAL indicator bases and their sparse binary design matrices.
//!
//! A basis is a coordinate section `s` together with a knot `u_s` taken from a
//! training row; it evaluates to `1(u_s <= w_s)` coordinatewise.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{HalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    /// Strictly increasing 0-based covariate indices.
    pub section: Vec<usize>,
    pub knot: Vec<f64>,
}

impl BasisFunction {
    #[inline]
    pub fn eval(&self, x: ArrayView1<'_, f64>) -> bool {
        self.section.iter().zip(&self.knot).all(|(&c, &k)| k <= x[c])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub bases: Vec<BasisFunction>,
    pub max_degree: usize,
    pub source_n: usize,
    pub d: usize,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }
}

/// Sparse binary matrix stored column-major: for each column the sorted list
/// of rows where the basis is one.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    n_rows: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    accel: Option<DominanceIndex>,
}

impl PartialEq for DesignMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.n_rows == other.n_rows && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }
}

impl DesignMatrix {
    pub fn from_columns(n_rows: usize, columns: &[Vec<u32>]) -> Self {
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        for c in columns {
            debug_assert!(c.windows(2).all(|p| p[0] < p[1]));
            row_idx.extend_from_slice(c);
            col_ptr.push(row_idx.len());
        }
        Self { n_rows, col_ptr, row_idx, accel: None }
    }

    pub fn nrows(&self) -> usize {
        self.n_rows
    }

    pub fn ncols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[u32] {
        &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.column(j).binary_search(&(i as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Array2<u8> {
        let mut out = Array2::zeros((self.n_rows, self.ncols()));
        for j in 0..self.ncols() {
            for &i in self.column(j) {
                out[[i as usize, j]] = 1;
            }
        }
        out
    }

    /// `out[j] = sum_{i in column j} r[i]` for every column.
    ///
    /// Designs built by [`enumerate_basis`] answer this with dominance sweeps
    /// over sections of size one and two (O(n log n) per section) instead of
    /// touching every nonzero.
    pub fn transpose_mul(&self, r: &[f64], out: &mut [f64]) {
        debug_assert_eq!(r.len(), self.n_rows);
        debug_assert_eq!(out.len(), self.ncols());
        match &self.accel {
            Some(acc) => {
                let mut dom = vec![0.0; self.n_rows];
                for (sweep, cols) in acc.sweeps.iter().zip(&acc.sweep_columns) {
                    sweep.dominance_sums(r, &mut dom);
                    for &(j, knot_row) in cols {
                        out[j] = dom[knot_row];
                    }
                }
                for &j in &acc.plain_columns {
                    out[j] = self.column_dot(j, r);
                }
            }
            None => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = self.column_dot(j, r);
                }
            }
        }
    }

    #[inline]
    pub fn column_dot(&self, j: usize, r: &[f64]) -> f64 {
        self.column(j).iter().map(|&i| r[i as usize]).sum()
    }
}

/// Precomputed sort orders that turn `X^T r` for a whole section into a
/// dominance-sum sweep.
#[derive(Debug, Clone)]
struct DominanceIndex {
    sweeps: Vec<SectionSweep>,
    /// (column, knot row) pairs served by each sweep.
    sweep_columns: Vec<Vec<(usize, usize)>>,
    plain_columns: Vec<usize>,
}

#[derive(Debug, Clone)]
struct SectionSweep {
    /// Rows sorted by the first section coordinate, descending.
    order: Vec<usize>,
    /// Start offsets in `order` of runs with equal first coordinate.
    groups: Vec<usize>,
    /// Dense descending rank of the second coordinate (two-way sections only).
    rank2: Option<(Vec<usize>, usize)>,
}

impl SectionSweep {
    fn new(w: &Array2<f64>, section: &[usize]) -> Self {
        let n = w.nrows();
        let c0 = section[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| w[[j, c0]].total_cmp(&w[[i, c0]]));
        let mut groups = vec![0];
        for k in 1..n {
            if w[[order[k], c0]] != w[[order[k - 1], c0]] {
                groups.push(k);
            }
        }
        let rank2 = (section.len() == 2).then(|| {
            let c1 = section[1];
            let mut by2: Vec<usize> = (0..n).collect();
            by2.sort_by(|&i, &j| w[[j, c1]].total_cmp(&w[[i, c1]]));
            let mut rank = vec![0usize; n];
            let mut r = 0;
            for k in 0..n {
                if k > 0 && w[[by2[k], c1]] != w[[by2[k - 1], c1]] {
                    r += 1;
                }
                rank[by2[k]] = r;
            }
            (rank, r + 1)
        });
        Self { order, groups, rank2 }
    }

    /// `dom[i] = sum of r[l] over rows l with w_l >= w_i on the section`.
    fn dominance_sums(&self, r: &[f64], dom: &mut [f64]) {
        let n = self.order.len();
        match &self.rank2 {
            None => {
                let mut running = 0.0;
                for (g, &start) in self.groups.iter().enumerate() {
                    let end = self.groups.get(g + 1).copied().unwrap_or(n);
                    let run = &self.order[start..end];
                    running += run.iter().map(|&i| r[i]).sum::<f64>();
                    for &i in run {
                        dom[i] = running;
                    }
                }
            }
            Some((rank, m)) => {
                let mut tree = vec![0.0; m + 1];
                for (g, &start) in self.groups.iter().enumerate() {
                    let end = self.groups.get(g + 1).copied().unwrap_or(n);
                    let run = &self.order[start..end];
                    for &i in run {
                        let mut k = rank[i] + 1;
                        while k <= *m {
                            tree[k] += r[i];
                            k += k & k.wrapping_neg();
                        }
                    }
                    for &i in run {
                        let mut k = rank[i] + 1;
                        let mut s = 0.0;
                        while k > 0 {
                            s += tree[k];
                            k -= k & k.wrapping_neg();
                        }
                        dom[i] = s;
                    }
                }
            }
        }
    }
}

/// All nonempty subsets of `0..d` with at most `max_degree` elements, by
/// increasing size then lexicographically.
pub fn sections(d: usize, max_degree: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, d: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for c in start..d {
            cur.push(c);
            extend(c + 1, d, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for size in 1..=max_degree.min(d) {
        extend(0, d, size, &mut Vec::new(), &mut out);
    }
    out
}

fn hash_rows(rows: &[u32]) -> u64 {
    let mut h = DefaultHasher::new();
    rows.hash(&mut h);
    h.finish()
}

fn knot_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Enumerates every (section, training-row knot) candidate, drops all-one
/// columns and duplicate columns, and returns the bases with their training
/// design.
pub fn enumerate_basis(w_train: &Array2<f64>, max_degree: usize) -> Result<(BasisSet, DesignMatrix)> {
    let (n, d) = w_train.dim();
    if max_degree < 1 || max_degree > d {
        return Err(HalError::InvalidArgument(format!("max_degree must be in 1..={d}, got {max_degree}")));
    }
    if n < 2 {
        return Err(HalError::InvalidArgument(format!("need at least 2 training rows, got {n}")));
    }

    let secs = sections(d, max_degree);
    let mut bases: Vec<BasisFunction> = Vec::new();
    let mut knot_rows: Vec<usize> = Vec::new();
    let mut section_of: Vec<usize> = Vec::new();
    let mut columns: Vec<Vec<u32>> = Vec::new();
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();

    let mut member = Vec::with_capacity(n);
    for (si, s) in secs.iter().enumerate() {
        for i in 0..n {
            let knot: Vec<f64> = s.iter().map(|&c| w_train[[i, c]]).collect();
            member.clear();
            for l in 0..n {
                if s.iter().zip(&knot).all(|(&c, &k)| k <= w_train[[l, c]]) {
                    member.push(l as u32);
                }
            }
            if member.len() == n {
                continue;
            }
            let h = hash_rows(&member);
            let slot = seen.entry(h).or_default();
            if let Some(&j) = slot.iter().find(|&&j| columns[j] == member) {
                if section_of[j] == si && knot_less(&knot, &bases[j].knot) {
                    bases[j].knot = knot;
                    knot_rows[j] = i;
                }
                continue;
            }
            slot.push(columns.len());
            columns.push(member.clone());
            bases.push(BasisFunction { section: s.clone(), knot });
            knot_rows.push(i);
            section_of.push(si);
        }
    }

    let mut design = DesignMatrix::from_columns(n, &columns);

    let mut sweep_of_section: HashMap<usize, usize> = HashMap::new();
    let mut sweeps = Vec::new();
    let mut sweep_columns: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut plain_columns = Vec::new();
    for j in 0..columns.len() {
        let s = &secs[section_of[j]];
        if s.len() <= 2 {
            let k = *sweep_of_section.entry(section_of[j]).or_insert_with(|| {
                sweeps.push(SectionSweep::new(w_train, s));
                sweep_columns.push(Vec::new());
                sweeps.len() - 1
            });
            sweep_columns[k].push((j, knot_rows[j]));
        } else {
            plain_columns.push(j);
        }
    }
    design.accel = Some(DominanceIndex { sweeps, sweep_columns, plain_columns });

    let set = BasisSet { bases, max_degree, source_n: n, d };
    Ok((set, design))
}

/// Evaluates training bases on new rows. No deduplication is applied.
pub fn evaluate_basis(basis_set: &BasisSet, w_new: &Array2<f64>) -> Result<DesignMatrix> {
    if w_new.ncols() != basis_set.d {
        return Err(HalError::DimensionMismatch { expected: basis_set.d, found: w_new.ncols() });
    }
    let n = w_new.nrows();
    let columns: Vec<Vec<u32>> = basis_set
        .bases
        .iter()
        .map(|b| (0..n).filter(|&i| b.eval(w_new.row(i))).map(|i| i as u32).collect())
        .collect();
    Ok(DesignMatrix::from_columns(n, &columns))
}
