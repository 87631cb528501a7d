use serde::{Deserialize, Serialize};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

/// `out += w · x` for a `rows × cols` row-major `w`.
#[inline]
pub(crate) fn gemv_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, wr) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += wr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += wᵀ · y` for a `rows × cols` row-major `w`.
#[inline]
pub(crate) fn gemv_t_acc(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (yr, wr) in y.iter().zip(w.chunks_exact(cols)) {
        if *yr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(wr) {
            *o += yr * a;
        }
    }
}

/// `w += y ⊗ x` (outer product accumulate).
#[inline]
pub(crate) fn outer_acc(w: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (yr, wr) in y.iter().zip(w.chunks_exact_mut(cols)) {
        if *yr == 0.0 {
            continue;
        }
        for (a, xv) in wr.iter_mut().zip(x) {
            *a += yr * xv;
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-softmax of a row, stable for large magnitudes.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}
