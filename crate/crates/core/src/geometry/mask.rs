use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Floor on every variance, in squared feature-map cells.
pub const MIN_VARIANCE: f64 = 1e-4;
const MIN_DETERMINANT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceVariant {
    Isotropic,
    Diagonal,
    Full,
}

impl CovarianceVariant {
    pub fn num_params(self) -> usize {
        match self {
            Self::Isotropic => 1,
            Self::Diagonal => 2,
            Self::Full => 4,
        }
    }
}

/// Mask shape parameterization. Log-variances keep the isotropic and
/// diagonal forms positive; the full form uses a 2x2 factor with
/// `Sigma = Phi * Phi^T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionCovariance {
    Isotropic { log_var: f64 },
    Diagonal { log_var: [f64; 2] },
    /// Row-major factor `Phi`.
    Full { factor: [f64; 4] },
}

impl AttentionCovariance {
    pub fn from_params(variant: CovarianceVariant, params: &[f64]) -> Result<Self, GeometryError> {
        if params.len() != variant.num_params() {
            return Err(GeometryError::CovarianceParams {
                variant,
                expected: variant.num_params(),
                found: params.len(),
            });
        }
        Ok(match variant {
            CovarianceVariant::Isotropic => Self::Isotropic { log_var: params[0] },
            CovarianceVariant::Diagonal => Self::Diagonal { log_var: [params[0], params[1]] },
            CovarianceVariant::Full => Self::Full { factor: [params[0], params[1], params[2], params[3]] },
        })
    }

    pub fn isotropic_sigma(sigma: f64) -> Self {
        Self::Isotropic { log_var: (sigma * sigma).ln() }
    }

    pub fn variant(&self) -> CovarianceVariant {
        match self {
            Self::Isotropic { .. } => CovarianceVariant::Isotropic,
            Self::Diagonal { .. } => CovarianceVariant::Diagonal,
            Self::Full { .. } => CovarianceVariant::Full,
        }
    }

    /// Reconstructed `Sigma` after flooring.
    pub fn covariance(&self) -> Matrix2<f64> {
        let floor = MIN_VARIANCE.ln();
        match *self {
            Self::Isotropic { log_var } => Matrix2::identity() * log_var.max(floor).exp(),
            Self::Diagonal { log_var } => Matrix2::new(log_var[0].max(floor).exp(), 0.0, 0.0, log_var[1].max(floor).exp()),
            Self::Full { factor } => {
                let phi = Matrix2::new(factor[0], factor[1], factor[2], factor[3]);
                let sigma = phi * phi.transpose();
                if sigma.determinant() < MIN_DETERMINANT {
                    sigma + Matrix2::identity() * MIN_VARIANCE
                } else {
                    sigma
                }
            }
        }
    }

    /// Chains dL/dSigma (treating entries as independent) to the parameters.
    fn param_grad(&self, d_sigma: &Matrix2<f64>) -> Vec<f64> {
        let floor = MIN_VARIANCE.ln();
        let through = |lv: f64, g: f64| if lv < floor { 0.0 } else { lv.exp() * g };
        match *self {
            Self::Isotropic { log_var } => vec![through(log_var, d_sigma.trace())],
            Self::Diagonal { log_var } => {
                vec![through(log_var[0], d_sigma[(0, 0)]), through(log_var[1], d_sigma[(1, 1)])]
            }
            Self::Full { factor } => {
                let phi = Matrix2::new(factor[0], factor[1], factor[2], factor[3]);
                let g = (d_sigma + d_sigma.transpose()) * phi;
                vec![g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]]
            }
        }
    }
}

/// Non-negative weights over the feature map, row-major `[height][width]`.
/// Cell `(row, col)` sits at feature coordinate `(x, y) = (col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl AttentionMask {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Integer cell with the largest weight, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Weight-averaged cell position.
    pub fn centroid(&self) -> (f64, f64) {
        let total: f64 = self.values.iter().sum();
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            sx += v * (i % self.width) as f64;
            sy += v * (i / self.width) as f64;
        }
        (sx / total, sy / total)
    }
}

/// `m = |Sigma|^-1/2 exp(-0.5 d^T Sigma^-1 d)` with `d = cell - x_attn`, unnormalized.
pub fn gaussian_mask(x_attn: [f64; 2], cov: &AttentionCovariance, width: usize, height: usize) -> AttentionMask {
    let sigma = cov.covariance();
    let precision = sigma.try_inverse().expect("floored covariance is invertible");
    let scale = sigma.determinant().powf(-0.5);
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let d = Vector2::new(col as f64 - x_attn[0], row as f64 - x_attn[1]);
            let q = d.dot(&(precision * d));
            values.push(scale * (-0.5 * q).exp());
        }
    }
    AttentionMask { width, height, values }
}

/// Vector-Jacobian product of [`gaussian_mask`]: given dL/dm per cell,
/// returns (dL/dx_attn, dL/dcovariance-params).
pub fn gaussian_mask_vjp(
    x_attn: [f64; 2],
    cov: &AttentionCovariance,
    width: usize,
    height: usize,
    upstream: &[f64],
) -> ([f64; 2], Vec<f64>) {
    let sigma = cov.covariance();
    let precision = sigma.try_inverse().expect("floored covariance is invertible");
    let scale = sigma.determinant().powf(-0.5);
    let mut d_x = Vector2::zeros();
    let mut weighted_outer = Matrix2::zeros();
    let mut weight = 0.0;
    for row in 0..height {
        for col in 0..width {
            let g = upstream[row * width + col];
            if g == 0.0 {
                continue;
            }
            let d = Vector2::new(col as f64 - x_attn[0], row as f64 - x_attn[1]);
            let pd = precision * d;
            let m = scale * (-0.5 * d.dot(&pd)).exp();
            let w = g * m;
            d_x += pd * w;
            weighted_outer += d * d.transpose() * w;
            weight += w;
        }
    }
    let d_sigma = (precision * weighted_outer * precision - precision * weight) * 0.5;
    ([d_x[0], d_x[1]], cov.param_grad(&d_sigma))
}
