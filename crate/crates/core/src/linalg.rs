//! Dense symmetric solves for the small systems used by the model fits.

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> SymMatrix {
        SymMatrix { dim, data: vec![0.0; dim * dim] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] += v;
    }

    /// Adds `w * x x^T` to the upper triangle. Call [`SymMatrix::mirror`]
    /// once accumulation is done.
    pub fn rank_one_upper(&mut self, x: &[f64], w: f64) {
        let d = self.dim;
        for i in 0..d {
            let wi = w * x[i];
            if wi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += wi * x[j];
            }
        }
    }

    pub fn mirror(&mut self) {
        let d = self.dim;
        for i in 0..d {
            for j in 0..i {
                self.data[i * d + j] = self.data[j * d + i];
            }
        }
    }

    /// Cholesky factor `L` with `A = L L^T`, or `None` when the matrix is not
    /// numerically positive definite.
    pub fn cholesky(&self) -> Option<Cholesky> {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        let scale = (0..n).map(|i| self.get(i, i).abs()).fold(0.0, f64::max);
        let floor = scale * 1e-13;
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > floor) {
                return None;
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Some(Cholesky { dim: n, l })
    }
}

#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Ordinary least squares of `y` on an intercept plus the columns of the
/// row-major matrix `x`. Columns are centered and scaled before forming the
/// normal equations; the returned coefficients (intercept first) are on the
/// original scale. `None` when the design matrix is rank deficient.
pub fn ols_with_intercept(x: &[f64], width: usize, y: &[f64]) -> Option<Vec<f64>> {
    let n = y.len();
    let p = width;
    if n == 0 || x.len() != n * p {
        return None;
    }
    let mut center = vec![0.0; p];
    let mut scale = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            center[j] += x[i * p + j];
        }
    }
    center.iter_mut().for_each(|c| *c /= n as f64);
    for i in 0..n {
        for j in 0..p {
            let d = x[i * p + j] - center[j];
            scale[j] += d * d;
        }
    }
    for s in &mut scale {
        *s = (*s / n as f64).sqrt();
        if !(*s > 0.0) {
            // constant column: collinear with the intercept
            return None;
        }
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut xtx = SymMatrix::zeros(p);
    let mut xty = vec![0.0; p];
    let mut row = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            row[j] = (x[i * p + j] - center[j]) / scale[j];
        }
        xtx.rank_one_upper(&row, 1.0);
        let r = y[i] - ybar;
        for j in 0..p {
            xty[j] += row[j] * r;
        }
    }
    xtx.mirror();
    let gamma = if p == 0 { Vec::new() } else { xtx.cholesky()?.solve(&xty) };
    let mut beta = vec![ybar];
    for j in 0..p {
        let b = gamma[j] / scale[j];
        beta[0] -= b * center[j];
        beta.push(b);
    }
    Some(beta)
}
