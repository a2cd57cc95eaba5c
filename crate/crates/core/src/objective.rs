//! Lossy mutual-information objective over a block of unit features.
//!
//! For a block `Z` with labels, the loss is
//!
//! ```text
//! Σ_j (B_j / 2B) · logdet(Σ̂_j) − ½ · logdet(Σ̂),
//! Σ̂_j = Z_j Z_jᵀ / B_j + (ε²/d) I,   Σ̂ = Z Zᵀ / B + (ε²/d) I
//! ```
//!
//! i.e. `h(Z|Y) − h(Z)` under Gaussian entropies. Minimizing it compresses
//! each class and expands the whole block. The gradient with respect to a
//! column `z_i` of class `j` is `(Σ̂_j⁻¹ − Σ̂⁻¹) z_i / B`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::symlin::{cholesky_logdet, spd_inverse, SymMatrix};

/// Encoded feature columns with their (observed) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureBlock {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.ncols() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature columns but {} labels",
                features.ncols(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Column indices per class, in block order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            idx[l].push(i);
        }
        idx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `(B_j / 2B) · logdet(Σ̂_j)`; zero for classes absent from the block.
    pub per_class_terms: Vec<f64>,
    /// `½ · logdet(Σ̂)`.
    pub global_term: f64,
}

/// `Z Zᵀ / k + (ε²/d) I`.
pub fn lossy_covariance(columns: ArrayView2<f64>, eps_sq: f64) -> Result<SymMatrix> {
    let k = columns.ncols();
    if k == 0 {
        return Err(Error::EmptyBlock);
    }
    let d = columns.nrows();
    let mut cov = columns.dot(&columns.t()) / k as f64;
    let shift = eps_sq / d as f64;
    for i in 0..d {
        cov[[i, i]] += shift;
    }
    SymMatrix::from_upper(cov)
}

fn gather(features: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    features.select(Axis(1), idx)
}

/// Per-class lossy covariances (None for absent classes) and the global one.
fn block_covariances(block: &FeatureBlock, eps_sq: f64) -> Result<(Vec<Option<SymMatrix>>, SymMatrix)> {
    if block.is_empty() {
        return Err(Error::EmptyBlock);
    }
    let global = lossy_covariance(block.features.view(), eps_sq)?;
    let per_class = block
        .class_indices()
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                Ok(None)
            } else if idx.len() == block.len() {
                // Same columns in the same order: reuse so the terms cancel exactly.
                Ok(Some(global.clone()))
            } else {
                lossy_covariance(gather(&block.features, idx).view(), eps_sq).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((per_class, global))
}

pub fn loss_value(block: &FeatureBlock, eps_sq: f64) -> Result<LossBreakdown> {
    let (per_class, global) = block_covariances(block, eps_sq)?;
    let b = block.len() as f64;
    let mut per_class_terms = vec![0.0; block.num_classes];
    for (j, cov) in per_class.iter().enumerate() {
        if let Some(cov) = cov {
            let bj = block.labels.iter().filter(|&&l| l == j).count() as f64;
            per_class_terms[j] = bj / (2.0 * b) * cholesky_logdet(cov)?;
        }
    }
    let global_term = 0.5 * cholesky_logdet(&global)?;
    let total = per_class_terms.iter().sum::<f64>() - global_term;
    Ok(LossBreakdown {
        total,
        per_class_terms,
        global_term,
    })
}

/// `∂loss/∂Z`, a `d × B` matrix.
pub fn loss_grad_features(block: &FeatureBlock, eps_sq: f64) -> Result<Array2<f64>> {
    let (per_class, global) = block_covariances(block, eps_sq)?;
    let b = block.len() as f64;
    let global_inv = spd_inverse(&global)?;
    let mut grad = Array2::<f64>::zeros(block.features.raw_dim());
    for (j, idx) in block.class_indices().iter().enumerate() {
        let Some(cov) = &per_class[j] else { continue };
        let diff = spd_inverse(cov)?.into_array() - global_inv.as_array();
        let cols = gather(&block.features, idx);
        let g = diff.dot(&cols) / b;
        for (k, &i) in idx.iter().enumerate() {
            grad.column_mut(i).assign(&g.column(k));
        }
    }
    Ok(grad)
}

/// Loss and feature gradient in one pass.
pub fn loss_and_grad(block: &FeatureBlock, eps_sq: f64) -> Result<(LossBreakdown, Array2<f64>)> {
    Ok((loss_value(block, eps_sq)?, loss_grad_features(block, eps_sq)?))
}

/// Mean softmax cross-entropy over `J × B` logits and its gradient
/// `(softmax − onehot) / B`.
pub fn ce_baseline_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (j, b) = logits.dim();
    if b != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{b} logit columns but {} labels",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::EmptyBlock);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= j) {
        return Err(Error::LabelOutOfRange { label, num_classes: j });
    }
    let mut grad = Array2::<f64>::zeros((j, b));
    let mut loss = 0.0;
    for (i, col) in logits.axis_iter(Axis(1)).enumerate() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exp: Array1<f64> = col.mapv(|v| (v - max).exp());
        let sum = exp.sum();
        loss += sum.ln() + max - col[labels[i]];
        let mut g = grad.column_mut(i);
        g.assign(&(exp / sum));
        g[labels[i]] -= 1.0;
    }
    grad /= b as f64;
    Ok((loss / b as f64, grad))
}
