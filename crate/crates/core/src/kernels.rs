//! Gaussian RBF kernel and the unbiased MMD² estimator with its gradient.

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};

/// Bandwidth candidates swept during model selection.
pub const BANDWIDTH_GRID: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    pub bandwidth: f64,
}

impl KernelConfig {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(KernelConfig { bandwidth })
    }

    #[inline]
    fn eval_sq(&self, d2: f64) -> f64 {
        (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    /// `k(x, y) = exp(−‖x − y‖² / 2σ²)`
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_sq(squared_distance(x, y))
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { bandwidth: 1.0 }
    }
}

/// Gram matrix `K_ij = k(a_i, b_j)`.
pub fn rbf_gram(a: &Matrix, b: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("rbf_gram", a.shape(), b.shape()));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        cfg.eval(a.row(i), b.row(j))
    }))
}

fn check_samples(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "MMD needs at least two samples per side, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("mmd", x.shape(), y.shape()));
    }
    Ok(())
}

/// Σ_{i≠j} k(x_i, y_j) when `paired`, otherwise Σ_{i,j} k(x_i, y_j).
fn cross_sum(x: &Matrix, y: &Matrix, cfg: &KernelConfig, paired: bool) -> f64 {
    let mut s = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            if paired && i == j {
                continue;
            }
            s += cfg.eval(x.row(i), y.row(j));
        }
    }
    s
}

/// Unbiased (U-statistic) estimate of MMD² between the row samples of `x` and `y`.
///
/// Within-sample means exclude the diagonal. With equal sample counts the
/// cross term also skips the `i = j` pairs, which keeps the estimator unbiased
/// and makes `mmd_sq_unbiased(x, x)` exactly zero. The estimate can be
/// slightly negative.
pub fn mmd_sq_unbiased(x: &Matrix, y: &Matrix, cfg: &KernelConfig) -> Result<f64> {
    check_samples(x, y)?;
    let (m, n) = (x.rows() as f64, y.rows() as f64);
    let paired = x.rows() == y.rows();
    let kxx = cross_sum(x, x, cfg, true) / (m * (m - 1.0));
    let kyy = cross_sum(y, y, cfg, true) / (n * (n - 1.0));
    let kxy = if paired {
        cross_sum(x, y, cfg, true) / (m * (m - 1.0))
    } else {
        cross_sum(x, y, cfg, false) / (m * n)
    };
    Ok(kxx + kyy - 2.0 * kxy)
}

/// [`mmd_sq_unbiased`] together with its gradient with respect to every row of `x`.
pub fn mmd_sq_grad(x: &Matrix, y: &Matrix, cfg: &KernelConfig) -> Result<(f64, Matrix)> {
    check_samples(x, y)?;
    let value = mmd_sq_unbiased(x, y, cfg)?;
    let (m, n) = (x.rows(), y.rows());
    let d = x.cols();
    let (mf, nf) = (m as f64, n as f64);
    let paired = m == n;
    let inv_s2 = 1.0 / (cfg.bandwidth * cfg.bandwidth);
    // ∂k(u,v)/∂u = −k(u,v)(u − v)/σ²
    let w_xx = 2.0 / (mf * (mf - 1.0));
    let w_xy = if paired {
        2.0 / (mf * (mf - 1.0))
    } else {
        2.0 / (mf * nf)
    };
    let mut grad = Matrix::zeros(m, d);
    for i in 0..m {
        let xi = x.row(i);
        let mut gi = vec![0.0; d];
        for j in 0..m {
            if i == j {
                continue;
            }
            let xj = x.row(j);
            let k = cfg.eval(xi, xj);
            for t in 0..d {
                gi[t] -= w_xx * k * (xi[t] - xj[t]) * inv_s2;
            }
        }
        for j in 0..n {
            if paired && i == j {
                continue;
            }
            let yj = y.row(j);
            let k = cfg.eval(xi, yj);
            for t in 0..d {
                gi[t] += w_xy * k * (xi[t] - yj[t]) * inv_s2;
            }
        }
        grad.row_mut(i).copy_from_slice(&gi);
    }
    Ok((value, grad))
}
