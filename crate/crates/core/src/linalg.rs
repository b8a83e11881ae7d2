//! Spectral helpers for symmetric positive semi-definite matrices.
//!
//! Every pseudo-inverse in the crate goes through [`SymmetricSpectrum`] so
//! that estimators and baselines share one rank decision: eigenvalues at or
//! below `RELATIVE_CUTOFF * lambda_max` are treated as exactly zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue cutoff used for pseudo-inverses and inverse square roots.
pub const RELATIVE_CUTOFF: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix with a fixed rank decision.
#[derive(Debug, Clone)]
pub struct SymmetricSpectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    kept: Vec<bool>,
}

impl SymmetricSpectrum {
    pub fn new(matrix: &DMatrix<f64>) -> Self {
        assert!(matrix.is_square(), "spectrum of a non-square matrix");
        let dim = matrix.nrows();
        if dim == 0 {
            return SymmetricSpectrum {
                eigenvalues: DVector::zeros(0),
                eigenvectors: DMatrix::zeros(0, 0),
                kept: Vec::new(),
            };
        }
        // Symmetrize first so round-off asymmetry cannot leak into the basis.
        let sym = (matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let cutoff = RELATIVE_CUTOFF * lambda_max;
        let kept = eig
            .eigenvalues
            .iter()
            .map(|&l| lambda_max > 0.0 && l > cutoff)
            .collect();
        SymmetricSpectrum {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            kept,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn rank(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank() == self.dim()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(0.0_f64, f64::max)
    }

    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let diag = DVector::from_iterator(
            self.dim(),
            self.eigenvalues
                .iter()
                .zip(&self.kept)
                .map(|(&l, &k)| if k { f(l) } else { 0.0 }),
        );
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&diag) * v.transpose()
    }

    /// Moore-Penrose pseudo-inverse.
    pub fn pinv(&self) -> DMatrix<f64> {
        self.spectral_map(|l| 1.0 / l)
    }

    /// Pseudo-inverse square root, `(M^dagger)^{1/2}`.
    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        self.spectral_map(|l| 1.0 / l.sqrt())
    }

    /// Orthogonal projector onto the retained range, `M M^dagger`.
    pub fn range_projector(&self) -> DMatrix<f64> {
        self.spectral_map(|_| 1.0)
    }

    /// Distance from `v` to the retained range.
    pub fn out_of_range_norm(&self, v: &DVector<f64>) -> f64 {
        (v - self.range_projector() * v).norm()
    }
}

pub fn pinv(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    SymmetricSpectrum::new(matrix).pinv()
}

/// `v^T M^dagger v`, clamped at zero.
pub fn quad_form_pinv(spectrum: &SymmetricSpectrum, v: &DVector<f64>) -> f64 {
    let p = spectrum.pinv();
    v.dot(&(p * v)).max(0.0)
}
