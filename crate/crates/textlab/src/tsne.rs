//! Exact t-SNE.
//!
//! Gaussian input affinities are calibrated per point by bisection on the
//! precision so that the conditional distribution reaches the target
//! perplexity, then symmetrized as `(P_j|i + P_i|j) / 2n`. The embedding is
//! optimized by gradient descent on `KL(P || Q)` with a Student-t kernel,
//! momentum, per-coordinate gains and early exaggeration. All pairwise terms
//! are computed exactly, so cost is O(n^2) per iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TextlabError};
use crate::pca::{ProjectedPoint, Projection2D, ProjectionDiagnostics, ProjectionMethod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    /// `None` selects `n / (4 * early_exaggeration)`, which keeps the
    /// exaggerated attraction step below one for small `n`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 5.0,
            iterations: 1000,
            seed: 0,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

const MIN_PROB: f64 = 1e-12;

pub(crate) fn squared_distances(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Row-stochastic conditional affinities `P_j|i` at the given perplexity.
pub fn conditional_affinities(dist2: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = dist2.len();
    let target = perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut beta = 1.0;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            // Shift by the nearest distance for numerical stability.
            let dmin = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist2[i][j])
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(dist2[i][j] - dmin) * beta).exp() };
                sum += row[j];
            }
            let mut entropy = 0.0;
            for p in row.iter_mut() {
                *p /= sum;
                if *p > 0.0 {
                    entropy -= *p * p.ln();
                }
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        p[i] = row;
    }
    p
}

fn joint_affinities(conditional: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = conditional.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i][j] = ((conditional[i][j] + conditional[j][i]) / (2.0 * n as f64)).max(MIN_PROB);
            }
        }
    }
    p
}

/// Student-t kernel numerators and their sum.
fn kernel(y: &[[f64; 2]]) -> (Vec<Vec<f64>>, f64) {
    let n = y.len();
    let mut num = vec![vec![0.0; n]; n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i][j] = v;
            num[j][i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

pub(crate) fn kl_divergence(p: &[Vec<f64>], y: &[[f64; 2]]) -> f64 {
    let (num, sum) = kernel(y);
    let mut kl = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if i != j && p[i][j] > 0.0 {
                let q = (num[i][j] / sum).max(MIN_PROB);
                kl += p[i][j] * (p[i][j] / q).ln();
            }
        }
    }
    kl
}

pub fn tsne(ids: &[String], rows: &[Vec<f64>], config: TsneConfig) -> Result<Projection2D> {
    let n = rows.len();
    if ids.len() != n {
        return Err(TextlabError::DimensionMismatch {
            expected: n,
            actual: ids.len(),
        });
    }
    if n < 4 {
        return Err(TextlabError::TooFewDocuments {
            required: 4,
            actual: n,
        });
    }
    let limit = (n as f64 - 1.0) / 3.0;
    if !(config.perplexity > 0.0 && config.perplexity < limit) {
        return Err(TextlabError::InfeasiblePerplexity {
            perplexity: config.perplexity,
            points: n,
            limit,
        });
    }
    if let Some(d) = rows.first().map(Vec::len) {
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(TextlabError::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
    }

    let p = joint_affinities(&conditional_affinities(&squared_distances(rows), config.perplexity));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let initial_kl = kl_divergence(&p, &y);

    let lr = config
        .learning_rate
        .unwrap_or_else(|| n as f64 / config.early_exaggeration / 4.0);
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.exaggeration_iterations { 0.5 } else { 0.8 };
        let (num, sum) = kernel(&y);
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i][j] / sum;
                let mult = 4.0 * (exaggeration * p[i][j] - q) * num[i][j];
                grad[0] += mult * (y[i][0] - y[j][0]);
                grad[1] += mult * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                let same_sign = (grad[c] > 0.0) == (update[i][c] > 0.0);
                gains[i][c] = if same_sign { gains[i][c] * 0.8 } else { gains[i][c] + 0.2 };
                gains[i][c] = gains[i][c].max(0.01);
                update[i][c] = momentum * update[i][c] - lr * gains[i][c] * grad[c];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let cx = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|v| v[1]).sum::<f64>() / n as f64;
        for v in &mut y {
            v[0] -= cx;
            v[1] -= cy;
        }
    }
    let final_kl = kl_divergence(&p, &y);

    let points = ids
        .iter()
        .zip(&y)
        .map(|(id, v)| ProjectedPoint {
            doc_id: id.clone(),
            x: v[0],
            y: v[1],
        })
        .collect();
    Ok(Projection2D {
        method: ProjectionMethod::Tsne,
        points,
        diagnostics: ProjectionDiagnostics::Tsne {
            initial_kl,
            final_kl,
            iterations: config.iterations,
            perplexity: config.perplexity,
        },
    })
}
