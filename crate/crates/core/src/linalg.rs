//! Small dense linear-algebra helpers shared by the latent models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Cholesky factorization, retrying with each diagonal jitter in turn.
/// Returns the factor and the jitter that was finally added (0 if none).
pub fn cholesky_with_jitter(m: &DMatrix<f64>, jitters: &[f64]) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let n = m.nrows();
    for &j in jitters {
        let shifted = m + DMatrix::<f64>::identity(n, n) * j;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, j));
        }
    }
    Err(Error::NotPositiveDefinite {
        jitter: jitters.last().copied().unwrap_or(0.0),
    })
}

/// `ln |A|` from a Cholesky factor of `A`.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Principal components of the rows of `data` (n samples x d features).
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Covariance eigenvalues (divided by n), descending; length min(n, d).
    pub eigenvalues: Vec<f64>,
    /// Unit directions, one column per retained eigenvalue.
    pub directions: DMatrix<f64>,
    /// Sample scores along `directions` (n x retained).
    pub scores: DMatrix<f64>,
}

/// Eigenvalues at or below this are treated as rounding noise.
pub const MIN_EIGENVALUE: f64 = 1e-24;

/// PCA through the n x n Gram matrix, which is cheap when d >> n.
/// Components whose eigenvalue is below `1e-12` of the largest (or below
/// [`MIN_EIGENVALUE`]) are dropped from `directions`.
pub fn gram_pca(data: &DMatrix<f64>) -> Pca {
    let (n, d) = data.shape();
    let mean = DVector::from_iterator(d, (0..d).map(|j| data.column(j).mean()));
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let gram = &centered * centered.transpose() / n as f64;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let keep = eigenvalues
        .iter()
        .take_while(|&&l| l > MIN_EIGENVALUE && l > top * 1e-12)
        .count()
        .min(d);
    let mut directions = DMatrix::zeros(d, keep);
    let mut scores = DMatrix::zeros(n, keep);
    for (k, &i) in order.iter().take(keep).enumerate() {
        let v = eig.eigenvectors.column(i);
        let mut u = centered.transpose() * v;
        let norm = u.norm();
        u /= norm;
        scores.set_column(k, &(&centered * &u));
        directions.set_column(k, &u);
    }
    Pca {
        mean,
        eigenvalues,
        directions,
        scores,
    }
}

/// Stacks equally long vectors as the rows of a matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}
