//! Principal component analysis via symmetric eigendecomposition.
//!
//! With `n` rows of dimension `d`, the `d x d` sample covariance is decomposed
//! when `d <= n`; otherwise the `n x n` Gram matrix of the centered data is
//! decomposed and loadings are recovered as `X^T u / sqrt(s)`. Both give the
//! same nonzero spectrum.
//!
//! Component signs are fixed so that the loading entry with the largest
//! magnitude is positive.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TextlabError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub doc_id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProjectionDiagnostics {
    Pca {
        explained_variance: Vec<f64>,
        explained_variance_ratio: Vec<f64>,
        /// True when the data has rank below 2 and a zero axis was padded in.
        padded: bool,
    },
    Tsne {
        initial_kl: f64,
        final_kl: f64,
        iterations: usize,
        perplexity: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub method: ProjectionMethod,
    pub points: Vec<ProjectedPoint>,
    pub diagnostics: ProjectionDiagnostics,
}

/// Fitted principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One loading vector per component, unit length (zero when padded).
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// `n x k` projected coordinates.
    pub scores: Vec<Vec<f64>>,
    /// Number of requested components that had to be padded with zeros.
    pub padded: usize,
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    for r in rows {
        if r.len() != d {
            return Err(TextlabError::DimensionMismatch {
                expected: d,
                actual: r.len(),
            });
        }
    }
    Ok(d)
}

impl PcaModel {
    pub fn fit(rows: &[Vec<f64>], n_components: usize) -> Result<Self> {
        let n = rows.len();
        if n < n_components.max(2) {
            return Err(TextlabError::TooFewDocuments {
                required: n_components.max(2),
                actual: n,
            });
        }
        let d = check_rows(rows)?;
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let denom = (n - 1) as f64;

        // (variance, unit loading vector) pairs, descending by variance.
        let mut pairs: Vec<(f64, Vec<f64>)> = if d <= n {
            let cov = centered.transpose() * &centered / denom;
            let eig = SymmetricEigen::new(cov);
            (0..d)
                .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
                .collect()
        } else {
            let gram = &centered * centered.transpose();
            let eig = SymmetricEigen::new(gram);
            (0..n)
                .map(|k| {
                    let s = eig.eigenvalues[k];
                    let u = eig.eigenvectors.column(k);
                    let v = if s > 0.0 {
                        (centered.transpose() * u / s.sqrt()).iter().copied().collect()
                    } else {
                        vec![0.0; d]
                    };
                    (s / denom, v)
                })
                .collect()
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

        let total: f64 = pairs.iter().map(|(v, _)| v.max(0.0)).sum();
        let top = pairs.first().map(|(v, _)| v.max(0.0)).unwrap_or(0.0);
        let tol = 1e-12 * top.max(1.0);

        let mut components = Vec::with_capacity(n_components);
        let mut explained_variance = Vec::with_capacity(n_components);
        let mut padded = 0;
        for k in 0..n_components {
            match pairs.get(k) {
                Some((var, v)) if *var > tol => {
                    let mut v = v.clone();
                    orient(&mut v);
                    components.push(v);
                    explained_variance.push(*var);
                }
                _ => {
                    components.push(vec![0.0; d]);
                    explained_variance.push(0.0);
                    padded += 1;
                }
            }
        }
        let explained_variance_ratio = explained_variance
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        let scores = (0..n)
            .map(|i| {
                components
                    .iter()
                    .map(|c| (0..d).map(|j| centered[(i, j)] * c[j]).sum())
                    .collect()
            })
            .collect();

        Ok(Self {
            mean,
            components,
            explained_variance,
            explained_variance_ratio,
            scores,
            padded,
        })
    }
}

fn orient(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Two-component PCA projection of `rows`, labelled by `ids`.
pub fn pca(ids: &[String], rows: &[Vec<f64>]) -> Result<Projection2D> {
    if ids.len() != rows.len() {
        return Err(TextlabError::DimensionMismatch {
            expected: rows.len(),
            actual: ids.len(),
        });
    }
    let model = PcaModel::fit(rows, 2)?;
    let points = ids
        .iter()
        .zip(&model.scores)
        .map(|(id, s)| ProjectedPoint {
            doc_id: id.clone(),
            x: s[0],
            y: s[1],
        })
        .collect();
    Ok(Projection2D {
        method: ProjectionMethod::Pca,
        points,
        diagnostics: ProjectionDiagnostics::Pca {
            explained_variance: model.explained_variance,
            explained_variance_ratio: model.explained_variance_ratio,
            padded: model.padded > 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_on_a_line_have_no_second_component() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let m = PcaModel::fit(&rows, 2).unwrap();
        assert!(m.explained_variance[0] > 1.0);
        assert!(m.explained_variance[1].abs() < 1e-9);
        assert_eq!(m.padded, 1);
    }

    #[test]
    fn duplicates_project_identically() {
        let rows = vec![
            vec![1.0, 0.0, 3.0],
            vec![0.0, 2.0, 1.0],
            vec![1.0, 0.0, 3.0],
            vec![4.0, 1.0, 0.0],
        ];
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let p = pca(&ids, &rows).unwrap();
        assert_eq!(p.points[0].x, p.points[2].x);
        assert_eq!(p.points[0].y, p.points[2].y);
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        // d > n takes the Gram route; score variance must equal the eigenvalue.
        let rows = vec![
            vec![1.0, 0.0, 3.0, 2.0, 0.5],
            vec![0.0, 2.0, 1.0, 1.0, 0.0],
            vec![2.0, 1.0, 0.0, 3.0, 1.0],
        ];
        let m = PcaModel::fit(&rows, 2).unwrap();
        for k in 0..2 {
            let var: f64 = m.scores.iter().map(|s| s[k] * s[k]).sum::<f64>() / 2.0;
            assert!((var - m.explained_variance[k]).abs() < 1e-9);
            let norm: f64 = m.components[k].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_rows() {
        assert!(PcaModel::fit(&[vec![1.0, 2.0]], 2).is_err());
    }
}
