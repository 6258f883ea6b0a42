use ndarray::ArrayView2;

/// Column-major copy of a design matrix for coordinate-wise access.
#[derive(Debug, Clone)]
pub(crate) struct Columns {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Columns {
    /// Copy restricted to the listed rows.
    pub(crate) fn from_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Self {
        let cols = x.ncols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for j in 0..cols {
            let col = x.column(j);
            data.extend(rows.iter().map(|&i| col[i]));
        }
        Columns {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub(crate) fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub(crate) fn rows(&self) -> usize {
        self.rows
    }

    pub(crate) fn cols(&self) -> usize {
        self.cols
    }

    /// X c
    pub(crate) fn mul(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &cj) in c.iter().enumerate() {
            if cj != 0.0 {
                axpy(cj, self.col(j), &mut out);
            }
        }
        out
    }

    /// Xᵀ v · scale
    pub(crate) fn scaled_tmul(&self, v: &[f64], scale: f64) -> Vec<f64> {
        (0..self.cols).map(|j| dot(self.col(j), v) * scale).collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// y += a x
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Σ w x²
#[inline]
pub(crate) fn weighted_sq(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(wi, xi)| wi * xi * xi).sum()
}

/// Σ w x v
#[inline]
pub(crate) fn weighted_dot(w: &[f64], x: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(x).zip(v).map(|((wi, xi), vi)| wi * xi * vi).sum()
}
