//! Banded LU without pivoting, for the M-matrices the solver assembles.

use crate::error::{invalid, Result};

/// Square band matrix with `width` sub- and super-diagonals, stored row by row.
#[derive(Clone, Debug)]
pub(crate) struct BandMatrix {
    n: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, width: usize) -> Self {
        Self {
            n,
            width,
            data: vec![0.0; n * (2 * width + 1)],
        }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.width, "({i}, {j}) outside band {}", self.width);
        i * (2 * self.width + 1) + (j + self.width - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    /// Clears row `i` and puts `v` on its diagonal.
    pub fn set_identity_row(&mut self, i: usize, v: f64) {
        let w = 2 * self.width + 1;
        self.data[i * w..(i + 1) * w].fill(0.0);
        self.set(i, i, v);
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.width);
            let hi = (i + self.width).min(self.n - 1);
            *o = (lo..=hi).map(|j| self.data[self.slot(i, j)] * x[j]).sum();
        }
    }

    /// In-place Doolittle factorization; fill-in stays inside the band.
    pub fn factor(mut self) -> Result<BandLu> {
        let (n, w) = (self.n, self.width);
        for k in 0..n {
            let pivot = self.data[self.slot(k, k)];
            if !(pivot.abs() > 0.0) || !pivot.is_finite() {
                return Err(invalid(format!("zero or non-finite pivot {pivot} in row {k}")));
            }
            let hi = (k + w).min(n - 1);
            for i in k + 1..=hi {
                let s = self.slot(i, k);
                let m = self.data[s] / pivot;
                if m == 0.0 {
                    continue;
                }
                self.data[s] = m;
                for j in k + 1..=hi {
                    let (a, b) = (self.slot(i, j), self.slot(k, j));
                    self.data[a] -= m * self.data[b];
                }
            }
        }
        Ok(BandLu { m: self })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BandLu {
    m: BandMatrix,
}

impl BandLu {
    pub fn solve(&self, b: &mut [f64]) {
        let (n, w) = (self.m.n, self.m.width);
        let m = &self.m;
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let s: f64 = (lo..i).map(|j| m.data[m.slot(i, j)] * b[j]).sum();
            b[i] -= s;
        }
        for i in (0..n).rev() {
            let hi = (i + w).min(n - 1);
            let s: f64 = (i + 1..=hi).map(|j| m.data[m.slot(i, j)] * b[j]).sum();
            b[i] = (b[i] - s) / m.data[m.slot(i, i)];
        }
    }
}
