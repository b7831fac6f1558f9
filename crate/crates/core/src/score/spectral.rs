//! Spectral form of the isotropic drift operator.
//!
//! The Neumann operator `L̃` is not symmetric, but it is similar to a
//! symmetric matrix through a positive diagonal weight `W`
//! (`w_i L̃_ij = w_j L̃_ji`): `S = W^{1/2} L̃ W^{-1/2}` is symmetric with
//! orthonormal eigenvectors `U` and eigenvalues `μ_k ≤ 0`, hence
//!
//! ```text
//! exp(a L̃) = W^{-1/2} U exp(a Λ) Uᵀ W^{1/2}.
//! ```

use crate::dynamics::isotropic_operator;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::collections::VecDeque;

/// Largest per-channel pixel count handled by dense eigendecompositions.
pub const MAX_DENSE_PIXELS: usize = 4096;

#[derive(Clone, Debug)]
pub struct SpectralOperator {
    height: usize,
    width: usize,
    sqrt_w: Vec<f64>,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl SpectralOperator {
    /// Diagonalizes the single-channel `Ψ1 ≡ 1` drift on an `height × width`
    /// grid.
    pub fn isotropic(height: usize, width: usize) -> Result<Self> {
        let p = height * width;
        if p > MAX_DENSE_PIXELS {
            return Err(Error::GridTooLarge(p));
        }
        let l = isotropic_operator(height, width)?;
        let w = symmetrizing_weights(&l)?;
        let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let mut s = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                s[(i, j)] = sqrt_w[i] * l[(i, j)] / sqrt_w[j];
            }
        }
        let asym = (&s - s.transpose()).amax();
        debug_assert!(asym < 1e-12, "symmetrized operator is off by {asym}");
        let s = (&s + s.transpose()) * 0.5;
        let eig = SymmetricEigen::new(s);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = DMatrix::zeros(p, p);
        let mut eigenvalues = Vec::with_capacity(p);
        for (k, &src) in order.iter().enumerate() {
            basis.set_column(k, &eig.eigenvectors.column(src));
            eigenvalues.push(eig.eigenvalues[src].min(0.0));
        }
        Ok(SpectralOperator {
            height,
            width,
            sqrt_w,
            basis,
            eigenvalues,
        })
    }

    /// The zero operator on `pixels` pixels (`W = I`, `U = I`, `μ = 0`).
    pub fn trivial(height: usize, width: usize) -> Self {
        let p = height * width;
        SpectralOperator {
            height,
            width,
            sqrt_w: vec![1.0; p],
            basis: DMatrix::identity(p, p),
            eigenvalues: vec![0.0; p],
        }
    }

    pub fn pixels(&self) -> usize {
        self.sqrt_w.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Eigenvalues `μ_k`, sorted from 0 downwards.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors `U` of the symmetrized operator (columns).
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Diagonal of `W^{1/2}`.
    pub fn sqrt_weights(&self) -> &[f64] {
        &self.sqrt_w
    }

    /// `G = Uᵀ W U`, the mode-space covariance of white pixel noise.
    pub fn noise_gram(&self) -> DMatrix<f64> {
        let mut wu = self.basis.clone();
        for (i, mut row) in wu.row_iter_mut().enumerate() {
            row *= self.sqrt_w[i] * self.sqrt_w[i];
        }
        self.basis.transpose() * wu
    }

    /// `W^{-1/2} U D Uᵀ W^{1/2}` for the diagonal `d`.
    pub fn conjugate_diagonal(&self, d: &[f64]) -> DMatrix<f64> {
        let p = self.pixels();
        let mut left = self.basis.clone();
        for i in 0..p {
            for k in 0..p {
                left[(i, k)] *= d[k] / self.sqrt_w[i];
            }
        }
        let mut right = self.basis.transpose();
        for k in 0..p {
            for j in 0..p {
                right[(k, j)] *= self.sqrt_w[j];
            }
        }
        left * right
    }

    /// `exp(a L̃)`.
    pub fn flow_matrix(&self, a: f64) -> DMatrix<f64> {
        let d: Vec<f64> = self.eigenvalues.iter().map(|mu| (a * mu).exp()).collect();
        self.conjugate_diagonal(&d)
    }

    /// `W^{-1/2} U K Uᵀ W^{-1/2}`, the state covariance of mode covariance `K`.
    pub fn state_covariance(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let mut left = self.basis.clone();
        for (i, mut row) in left.row_iter_mut().enumerate() {
            row /= self.sqrt_w[i];
        }
        &left * k * left.transpose()
    }

    /// `Uᵀ W^{1/2} C W^{1/2} U`, the mode covariance of state covariance `C`.
    pub fn mode_covariance(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let mut right = self.basis.clone();
        for (i, mut row) in right.row_iter_mut().enumerate() {
            row *= self.sqrt_w[i];
        }
        right.transpose() * c * right
    }

    /// `y = Uᵀ W^{1/2} x`.
    pub fn to_modes(&self, x: &[f64]) -> DVector<f64> {
        let wx = DVector::from_iterator(x.len(), x.iter().zip(&self.sqrt_w).map(|(a, b)| a * b));
        self.basis.tr_mul(&wx)
    }

    /// `x = W^{-1/2} U y`.
    pub fn from_modes(&self, y: &DVector<f64>) -> Vec<f64> {
        let x = &self.basis * y;
        x.iter().zip(&self.sqrt_w).map(|(a, b)| a / b).collect()
    }
}

/// Positive weights with `w_i L_ij = w_j L_ji`, found by propagating ratios
/// along the nonzero pattern from `w_0 = 1`, normalized to max 1.
fn symmetrizing_weights(l: &DMatrix<f64>) -> Result<Vec<f64>> {
    let p = l.nrows();
    let mut w = vec![f64::NAN; p];
    w[0] = 1.0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        for j in 0..p {
            if i == j || l[(i, j)] == 0.0 {
                continue;
            }
            let candidate = w[i] * l[(i, j)] / l[(j, i)];
            if w[j].is_nan() {
                w[j] = candidate;
                queue.push_back(j);
            } else if (w[j] - candidate).abs() > 1e-12 * w[j].abs() {
                return Err(Error::InvalidArgument(
                    "drift operator is not symmetrizable by a diagonal weight".into(),
                ));
            }
        }
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument("disconnected drift operator".into()));
    }
    let top = w.iter().cloned().fold(0.0, f64::max);
    Ok(w.into_iter().map(|v| v / top).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_quarter_half_one() {
        let l = isotropic_operator(4, 5).unwrap();
        let w = symmetrizing_weights(&l).unwrap();
        assert_eq!(w[0], 0.25);
        assert_eq!(w[1], 0.5);
        assert_eq!(w[6], 1.0);
        assert_eq!(w[19], 0.25);
    }

    #[test]
    fn reconstructs_operator() {
        let op = SpectralOperator::isotropic(5, 4).unwrap();
        let l = isotropic_operator(5, 4).unwrap();
        let rebuilt = op.conjugate_diagonal(op.eigenvalues());
        assert!((rebuilt - &l).amax() < 1e-12);
        let ortho = op.basis().transpose() * op.basis();
        assert!((ortho - DMatrix::identity(20, 20)).amax() < 1e-10);
        assert_eq!(op.eigenvalues()[0], 0.0);
        assert!(op.eigenvalues()[1] < -1e-3);
        let x: Vec<f64> = (0..20).map(|k| (k as f64 * 0.3).sin()).collect();
        let back = op.from_modes(&op.to_modes(&x));
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn flow_matches_matrix_exponential() {
        let op = SpectralOperator::isotropic(4, 4).unwrap();
        let l = isotropic_operator(4, 4).unwrap();
        let expm = (l * 0.7).exp();
        assert!((op.flow_matrix(0.7) - expm).amax() < 1e-10);
    }

    #[test]
    fn too_large_grid() {
        assert!(matches!(SpectralOperator::isotropic(65, 64), Err(Error::GridTooLarge(4160))));
    }
}
