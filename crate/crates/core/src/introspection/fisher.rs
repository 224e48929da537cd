//! Empirical Fisher metric over introspective feature columns and the
//! associated variance score `sum_j r_j^T F^{-1} r_j`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::IntrospectiveFeature;
use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// `F = (1/M) sum_m (1/N) sum_j r_mj r_mj^T + ridge * I`, factorised once.
#[derive(Debug, Clone)]
pub struct FisherMetric {
    fisher: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
}

impl FisherMetric {
    pub fn estimate(features: &[IntrospectiveFeature], dim: usize, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(Error::Parameter(format!("ridge must be > 0, got {ridge}")));
        }
        let mut fisher = DMatrix::<f64>::zeros(dim, dim);
        if !features.is_empty() {
            for f in features {
                if f.rows() != dim {
                    return Err(Error::Shape(format!("feature has {} rows, metric has {dim}", f.rows())));
                }
                let w = 1.0 / (features.len() * f.cols()) as f64;
                for j in 0..f.cols() {
                    let col = DVector::from_column_slice(f.column(j));
                    fisher.ger(w, &col, &col, 1.0);
                }
            }
            // ger accumulates both triangles; symmetrise against rounding
            fisher = (&fisher + fisher.transpose()) * 0.5;
        }
        for i in 0..dim {
            fisher[(i, i)] += ridge;
        }
        let chol = Cholesky::new(fisher.clone())
            .ok_or_else(|| Error::Numeric("Fisher matrix is not positive definite".into()))?;
        Ok(Self { fisher, chol, ridge })
    }

    pub fn score(&self, probe: &IntrospectiveFeature) -> Result<f64> {
        if probe.rows() != self.fisher.nrows() {
            return Err(Error::Shape("probe rows differ from metric dimension".into()));
        }
        let mut total = 0.0;
        for j in 0..probe.cols() {
            let r = DVector::from_column_slice(probe.column(j));
            let solved = self.chol.solve(&r);
            total += r.dot(&solved);
        }
        Ok(total.max(0.0))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.fisher
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.fisher.clone().symmetric_eigenvalues().min()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisherDiagnostic {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub fisher: Vec<f64>,
    pub variance_score: f64,
    pub ridge: f64,
}

pub fn fisher_variance(features: &[IntrospectiveFeature], probe: &IntrospectiveFeature, ridge: f64) -> Result<FisherDiagnostic> {
    let metric = FisherMetric::estimate(features, probe.rows(), ridge)?;
    let variance_score = metric.score(probe)?;
    let m = metric.matrix();
    let dim = m.nrows();
    let fisher = (0..dim).flat_map(|i| (0..dim).map(move |j| m[(i, j)])).collect();
    Ok(FisherDiagnostic {
        dim,
        fisher,
        variance_score,
        ridge,
    })
}
