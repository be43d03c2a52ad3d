//! Dense Cholesky factor that grows and shrinks in place.
//!
//! The lower-triangular factor is stored row-major with a fixed row stride,
//! so appending a coordinate writes one new row and removing a coordinate
//! shifts the trailing rows before a rank-one update of the trailing block.

/// Pivots below this fraction of the diagonal entry count as singular.
const PIVOT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct CholFactor {
    dim: usize,
    stride: usize,
    l: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for t in 0..4 {
            acc[t] += a[4 * c + t] * b[4 * c + t];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for t in 4 * chunks..a.len() {
        s += a[t] * b[t];
    }
    s
}

impl CholFactor {
    /// Factors the symmetric matrix `a` (row-major, `dim x dim`); `None` if it
    /// is not numerically positive definite.
    pub(crate) fn new(a: &[f64], dim: usize) -> Option<Self> {
        let stride = dim + dim / 2 + 8;
        let mut f = Self { dim: 0, stride, l: vec![0.0; stride * stride] };
        for i in 0..dim {
            if !f.push(&a[i * dim..i * dim + i + 1]) {
                return None;
            }
        }
        Some(f)
    }

    #[cfg(test)]
    pub(crate) fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.l[i * self.stride..i * self.stride + i + 1]
    }

    fn grow(&mut self) {
        let stride = 2 * self.stride;
        let mut l = vec![0.0; stride * stride];
        for i in 0..self.dim {
            l[i * stride..i * stride + i + 1].copy_from_slice(self.row(i));
        }
        self.stride = stride;
        self.l = l;
    }

    /// Appends a coordinate given its matrix entries against the existing
    /// coordinates followed by its diagonal entry (`dim + 1` values).
    /// Returns false, leaving the factor unchanged, if the extended matrix is
    /// not positive definite.
    pub(crate) fn push(&mut self, col: &[f64]) -> bool {
        let m = self.dim;
        debug_assert_eq!(col.len(), m + 1);
        if m == self.stride {
            self.grow();
        }
        let base = m * self.stride;
        for j in 0..m {
            let (head, tail) = self.l.split_at_mut(base);
            let lj = &head[j * self.stride..j * self.stride + j + 1];
            let s = col[j] - dot(&tail[..j], &lj[..j]);
            tail[j] = s / lj[j];
        }
        let r = &self.l[base..base + m];
        let d = col[m] - dot(r, r);
        if !(d.is_finite() && d > PIVOT_FLOOR * col[m].abs()) {
            return false;
        }
        self.l[base + m] = d.sqrt();
        self.dim += 1;
        true
    }

    /// Removes coordinate `k`, updating the factor of the remaining matrix.
    pub(crate) fn remove(&mut self, k: usize) {
        let m = self.dim;
        assert!(k < m);
        let st = self.stride;
        let mut x: Vec<f64> = (k + 1..m).map(|i| self.l[i * st + k]).collect();
        for i in k + 1..m {
            let src = i * st;
            let dst = (i - 1) * st;
            self.l.copy_within(src..src + k, dst);
            self.l.copy_within(src + k + 1..src + i + 1, dst + k);
        }
        self.dim -= 1;
        // rank-one update of the trailing block with the removed column
        let q = m - 1 - k;
        for j in 0..q {
            let jj = (k + j) * st + k + j;
            let ljj = self.l[jj];
            let r = ljj.hypot(x[j]);
            let c = r / ljj;
            let s = x[j] / ljj;
            self.l[jj] = r;
            for i in j + 1..q {
                let ij = (k + i) * st + k + j;
                let v = (self.l[ij] + s * x[i]) / c;
                self.l[ij] = v;
                x[i] = c * x[i] - s * v;
            }
        }
    }

    /// Solves `L L^T x = b` in place.
    pub(crate) fn solve(&self, b: &mut [f64]) {
        let m = self.dim;
        for i in 0..m {
            let r = self.row(i);
            b[i] = (b[i] - dot(&r[..i], &b[..i])) / r[i];
        }
        for i in (0..m).rev() {
            let r = self.row(i);
            b[i] /= r[i];
            let xi = b[i];
            for (bk, lk) in b[..i].iter_mut().zip(&r[..i]) {
                *bk -= xi * lk;
            }
        }
    }
}
