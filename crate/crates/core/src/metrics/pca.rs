use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data_io::{fmt_f64, SegmentRecord};
use crate::error::{Error, Result};

/// Gram eigenvalues at or below this fraction of the largest count as zero.
const NULL_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// n × k coordinates on the leading components.
    pub coords: DMatrix<f64>,
    /// d × k unit component directions.
    pub components: DMatrix<f64>,
    /// Eigenvalues of the (1/n-normalized) sample covariance, descending;
    /// `min(n, d)` of them, the rest are zero.
    pub eigenvalues: Vec<f64>,
}

/// Projects mean-centered rows onto the top `out_dims` principal components.
///
/// Uses the d × d covariance when `d <= n`, otherwise the n × n Gram matrix.
/// Each component is signed so that its largest-magnitude loading is
/// positive. All-identical rows give zero coordinates.
pub fn pca_project(vectors: &DMatrix<f64>, out_dims: usize) -> Result<PcaProjection> {
    let (n, d) = vectors.shape();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 rows"));
    }
    if out_dims == 0 || out_dims > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "PCA output dimension {out_dims} not in 1..={}",
            (n - 1).min(d)
        )));
    }
    let mean = DVector::from_iterator(d, vectors.column_iter().map(|c| c.mean()));
    let mut centered = vectors.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let nf = n as f64;

    let (eigenvalues, mut components) = if d <= n {
        let cov = centered.transpose() * &centered / nf;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        let comps = DMatrix::from_fn(d, out_dims, |i, k| eig.eigenvectors[(i, order[k])]);
        (order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect::<Vec<_>>(), comps)
    } else {
        let gram = &centered * centered.transpose() / nf;
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        let mut comps = DMatrix::zeros(d, out_dims);
        // Round-off eigenvalues would give unit vectors outside the data span.
        let cutoff = NULL_TOL * eig.eigenvalues[order[0]].max(0.0);
        for (k, &o) in order.iter().take(out_dims).enumerate() {
            let lambda = eig.eigenvalues[o];
            if lambda > cutoff {
                let v = centered.transpose() * eig.eigenvectors.column(o);
                let norm = v.norm();
                if norm > 0.0 {
                    comps.set_column(k, &(v / norm));
                }
            }
        }
        (order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect::<Vec<_>>(), comps)
    };

    if eigenvalues[0] <= 0.0 {
        log::warn!("PCA input rows are all identical; projecting to zero");
        return Ok(PcaProjection {
            coords: DMatrix::zeros(n, out_dims),
            components: DMatrix::zeros(d, out_dims),
            eigenvalues,
        });
    }

    for mut col in components.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    let coords = &centered * &components;
    Ok(PcaProjection {
        coords,
        components,
        eigenvalues,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// CSV `segment_id,pc1,pc2[,...][,label]`.
pub fn pca_to_csv(records: &[SegmentRecord], coords: &DMatrix<f64>, labels: Option<&[String]>) -> Result<String> {
    if records.len() != coords.nrows() || labels.is_some_and(|l| l.len() != records.len()) {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            found: coords.nrows(),
        });
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["segment_id".to_string()];
    header.extend((1..=coords.ncols()).map(|k| format!("pc{k}")));
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).expect("writing to memory");
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![r.segment_id.clone()];
        row.extend(coords.row(i).iter().map(|&v| fmt_f64(v)));
        if let Some(l) = labels {
            row.push(l[i].clone());
        }
        w.write_record(&row).expect("writing to memory");
    }
    Ok(String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_in_three_dims() {
        let x = DMatrix::from_fn(6, 3, |i, j| (i as f64) * [1.0, -2.0, 0.5][j] + 4.0);
        let p = pca_project(&x, 2).unwrap();
        assert!(p.coords.column(1).amax() < 1e-10);
        assert!(p.coords.column(0).amax() > 1.0);
    }

    #[test]
    fn planar_data_keeps_distances() {
        let x = DMatrix::from_row_slice(4, 3, &[0.0, 0.0, 1.0, 3.0, 0.0, 1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let p = pca_project(&x, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let a = (x.row(i) - x.row(j)).norm();
                let b = (p.coords.row(i) - p.coords.row(j)).norm();
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wide_low_rank_input_keeps_distances() {
        // Rank 2 in 7 dimensions; the third requested component is null.
        let x = DMatrix::from_fn(4, 7, |i, j| if j < 2 { [[0.0, 5.0], [2.0, -5.0], [4.0, 5.0], [6.0, -5.0]][i][j] } else { 0.0 });
        let p = pca_project(&x, 3).unwrap();
        assert_eq!(p.coords.column(2).amax(), 0.0);
        for i in 0..4 {
            for j in 0..4 {
                let a = (x.row(i) - x.row(j)).norm();
                let b = (p.coords.row(i) - p.coords.row(j)).norm();
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_rows_project_to_zero() {
        let x = DMatrix::from_element(5, 3, 2.5);
        let p = pca_project(&x, 2).unwrap();
        assert_eq!(p.coords.amax(), 0.0);
    }

    #[test]
    fn bad_dimensions() {
        let x = DMatrix::from_fn(3, 5, |i, j| (i * j) as f64);
        assert!(pca_project(&x, 3).is_err());
        assert!(pca_project(&x, 0).is_err());
        assert!(pca_project(&DMatrix::zeros(1, 2), 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let recs = vec![SegmentRecord::new("r", "s0", 0.0, 1.0, None), SegmentRecord::new("r", "s1", 1.0, 1.0, None)];
        let coords = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.0]);
        let text = pca_to_csv(&recs, &coords, Some(&["a".into(), "b".into()])).unwrap();
        assert_eq!(text, "segment_id,pc1,pc2,label\ns0,0.5,-1,a\ns1,2,0,b\n");
    }
}
