use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::metrics::pca::pca_project;

/// Ridge added to the between-class scatter before inversion, relative to its
/// mean diagonal.
pub const SB_RIDGE: f64 = 1e-10;

/// Discriminant trace `Tr(S_B⁻¹ S_W)`; smaller is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtScore {
    pub value: f64,
    pub n_classes: usize,
    pub dim: usize,
    /// Condition number of the regularized between-class scatter.
    pub condition: f64,
}

/// `S_W` and `S_B` normalized by `n`, and the class count.
fn scatters(vectors: &DMatrix<f64>, labels: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    let (n, d) = vectors.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
    }
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(Error::invalid(format!("discriminant trace needs at least 2 classes, found {}", classes.len())));
    }

    let mean = DVector::from_iterator(d, vectors.column_iter().map(|c| c.mean()));
    let mut within = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    for rows in classes.values() {
        let mut mu = DVector::zeros(d);
        for &i in rows {
            mu += vectors.row(i).transpose();
        }
        mu /= rows.len() as f64;
        for &i in rows {
            let c = vectors.row(i).transpose() - &mu;
            within.ger(1.0, &c, &c, 1.0);
        }
        let dm = &mu - &mean;
        between.ger(rows.len() as f64, &dm, &dm, 1.0);
    }
    within /= n as f64;
    between /= n as f64;
    Ok((within, between, classes.len()))
}

fn coincident_means(smallest: f64) -> Error {
    Error::NotPositiveDefinite {
        what: "between-class scatter (class means coincide)".into(),
        smallest_eigenvalue: smallest,
    }
}

/// Discriminant trace with `S_W = Σ_c Σ_{i∈c} (x_i−μ_c)(x_i−μ_c)ᵀ / n` and
/// `S_B = Σ_c n_c (μ_c−μ)(μ_c−μ)ᵀ / n`.
///
/// `S_B` has rank at most `C − 1`; in higher dimensions the ridge keeps it
/// invertible but the value is then dominated by the null space. Use
/// [`dt_score_subspace`] to compare representations of such data.
pub fn dt_score(vectors: &DMatrix<f64>, labels: &[usize]) -> Result<DtScore> {
    let (within, between, n_classes) = scatters(vectors, labels)?;
    let d = vectors.ncols();
    let trace = between.trace();
    let eig = SymmetricEigen::new(between.clone()).eigenvalues;
    let smallest = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if trace <= 0.0 {
        return Err(coincident_means(smallest));
    }
    let ridge = SB_RIDGE * trace / d as f64;
    let mut reg = between;
    for i in 0..d {
        reg[(i, i)] += ridge;
    }
    let chol = Cholesky::new(reg).ok_or(Error::NotPositiveDefinite {
        what: "between-class scatter".into(),
        smallest_eigenvalue: smallest,
    })?;
    let largest = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max) + ridge;
    let condition = largest / (smallest + ridge);
    if condition > 1e12 {
        log::warn!("between-class scatter is ill-conditioned (condition {condition:.3e})");
    }
    Ok(DtScore {
        value: chol.solve(&within).trace(),
        n_classes,
        dim: d,
        condition,
    })
}

/// Relative eigenvalue cutoff defining the range of `S_B`.
pub const RANGE_TOL: f64 = 1e-10;

/// `Tr(S_B⁺ S_W)`: the discriminant trace restricted to the span of the
/// class-mean differences, i.e. within-class spread measured along the
/// between-class directions. Equals [`dt_score`] (up to the ridge) when `S_B`
/// has full rank. `dim` in the result is the rank used.
pub fn dt_score_subspace(vectors: &DMatrix<f64>, labels: &[usize]) -> Result<DtScore> {
    let (n, d) = vectors.shape();
    if d >= n && n >= 2 {
        // The centered rows span at most n − 1 dimensions; an orthonormal
        // basis of that span changes nothing and keeps the scatters small.
        let reduced = pca_project(vectors, n - 1)?;
        return dt_score_subspace(&reduced.coords, labels);
    }
    let (within, between, n_classes) = scatters(vectors, labels)?;
    let eig = SymmetricEigen::new(between);
    let largest = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if largest <= 0.0 {
        return Err(coincident_means(largest));
    }
    let mut value = 0.0;
    let mut rank = 0;
    let mut smallest_kept = largest;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > RANGE_TOL * largest {
            let u = eig.eigenvectors.column(k);
            value += (u.transpose() * &within * u)[(0, 0)] / lambda;
            rank += 1;
            smallest_kept = smallest_kept.min(lambda);
        }
    }
    Ok(DtScore {
        value,
        n_classes,
        dim: rank,
        condition: largest / smallest_kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_one_dimensional() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 2.0, 4.0, 6.0]);
        let dt = dt_score(&x, &[0, 0, 1, 1]).unwrap();
        assert!((dt.value - 0.25).abs() < 1e-9);
        assert_eq!(dt.n_classes, 2);
    }

    #[test]
    fn zero_within_scatter() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 3.0]);
        assert!(dt_score(&x, &[0, 0, 1, 1]).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 3.0, 5.0, 6.5, 9.0]);
        let labels = [0, 0, 1, 1, 2, 2];
        let a = dt_score(&x, &labels).unwrap().value;
        let b = dt_score(&(x * -3.5), &labels).unwrap().value;
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn subspace_matches_full_rank_and_ignores_null_directions() {
        let x = DMatrix::from_row_slice(6, 2, &[0.0, 1.0, 1.0, -1.0, 3.0, 0.5, 5.0, 0.0, 6.5, 2.0, 9.0, -0.5]);
        let labels = [0, 0, 1, 1, 2, 2];
        let full = dt_score(&x, &labels).unwrap().value;
        let sub = dt_score_subspace(&x, &labels).unwrap();
        assert!((full - sub.value).abs() < 1e-6 * full);
        assert_eq!(sub.dim, 2);
        // Two classes in 2-D: only the mean-difference axis counts.
        let y = DMatrix::from_row_slice(4, 2, &[0.0, 5.0, 2.0, -5.0, 4.0, 5.0, 6.0, -5.0]);
        let s = dt_score_subspace(&y, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.dim, 1);
        assert!((s.value - 0.25).abs() < 1e-9);
        // Embedding in more dimensions than points takes the reduced route.
        let wide = DMatrix::from_fn(4, 7, |i, j| if j < 2 { y[(i, j)] } else { 0.0 });
        let w = dt_score_subspace(&wide, &[0, 0, 1, 1]).unwrap();
        assert!((w.value - 0.25).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!(dt_score(&x, &[0, 0, 0]).is_err());
        let same_means = DMatrix::from_column_slice(4, 1, &[0.0, 2.0, 0.0, 2.0]);
        assert!(matches!(dt_score(&same_means, &[0, 0, 1, 1]), Err(Error::NotPositiveDefinite { .. })));
        assert!(dt_score(&x, &[0, 1]).is_err());
    }
}
