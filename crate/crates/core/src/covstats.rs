//! Zero-mean Gaussian class statistics: local estimation, server-side
//! combination, covariance momentum, leave-one-device-out correctors, and
//! the orthogonality index of class principal directions.

use std::io::{Read, Write};

use log::warn;
use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::symlin::{principal_eigenvector, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Local,
    Global,
    Corrector,
}

impl Role {
    fn code(self) -> u64 {
        match self {
            Role::Local => 0,
            Role::Global => 1,
            Role::Corrector => 2,
        }
    }

    fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(Role::Local),
            1 => Ok(Role::Global),
            2 => Ok(Role::Corrector),
            other => Err(Error::InvalidSpec(format!("unknown classifier role tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub prior: f64,
    pub count: usize,
    /// Includes the `(ε²/d) I` shift.
    pub covariance: SymMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub classes: Vec<ClassStats>,
    pub dim: usize,
    pub eps_sq: f64,
    pub role: Role,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_count(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }

    /// Covariance assigned to a class nobody observed.
    pub fn null_covariance(dim: usize, eps_sq: f64) -> SymMatrix {
        SymMatrix::scaled_identity(dim, eps_sq / dim as f64)
    }

    /// Values on the wire for the covariances alone: `J·d²`.
    pub fn wire_values(&self) -> usize {
        classifier_values(self.num_classes(), self.dim)
    }

    fn compatible(&self, other: &Classifier) -> bool {
        self.num_classes() == other.num_classes()
            && self.dim == other.dim
            && self.eps_sq == other.eps_sq
    }

    /// Snapshot: header `(J, d, eps_sq, role)` then per class
    /// `(prior, count, upper-triangular covariance)`, 64-bit little-endian.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.num_classes() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.eps_sq.to_le_bytes())?;
        w.write_all(&self.role.code().to_le_bytes())?;
        for c in &self.classes {
            w.write_all(&c.prior.to_le_bytes())?;
            w.write_all(&(c.count as u64).to_le_bytes())?;
            for v in c.covariance.upper_triangle() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let j = u64::from_le_bytes(next(&mut r)?) as usize;
        let dim = u64::from_le_bytes(next(&mut r)?) as usize;
        if j == 0 || dim == 0 || j > 1 << 20 || dim > 1 << 12 {
            return Err(Error::InvalidSpec(format!("bad classifier header J={j} d={dim}")));
        }
        let eps_sq = f64::from_le_bytes(next(&mut r)?);
        let role = Role::from_code(u64::from_le_bytes(next(&mut r)?))?;
        let tri = dim * (dim + 1) / 2;
        let mut classes = Vec::with_capacity(j);
        for _ in 0..j {
            let prior = f64::from_le_bytes(next(&mut r)?);
            let count = u64::from_le_bytes(next(&mut r)?) as usize;
            let mut values = Vec::with_capacity(tri);
            for _ in 0..tri {
                values.push(f64::from_le_bytes(next(&mut r)?));
            }
            classes.push(ClassStats {
                prior,
                count,
                covariance: SymMatrix::from_upper_triangle(dim, &values)?,
            });
        }
        Ok(Self {
            classes,
            dim,
            eps_sq,
            role,
        })
    }
}

/// `J·d²`: covariance values carried by one classifier upload.
pub fn classifier_values(num_classes: usize, dim: usize) -> usize {
    num_classes * dim * dim
}

/// Maximum-likelihood class priors and zero-mean covariances from a
/// device's `d × D_m` features.
pub fn estimate_local_classifier(
    features: ArrayView2<f64>,
    labels: &[usize],
    eps_sq: f64,
    num_classes: usize,
) -> Result<Classifier> {
    let (dim, n) = features.dim();
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!("{n} feature columns but {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    if !(eps_sq > 0.0) {
        return Err(Error::InvalidSpec(format!("eps_sq must be positive, got {eps_sq}")));
    }
    let mut idx = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        idx[l].push(i);
    }
    let shift = eps_sq / dim as f64;
    let classes = idx
        .iter()
        .map(|members| {
            if members.is_empty() {
                return Ok(ClassStats {
                    prior: 0.0,
                    count: 0,
                    covariance: Classifier::null_covariance(dim, eps_sq),
                });
            }
            let cols = features.select(Axis(1), members);
            let mut cov = cols.dot(&cols.t()) / members.len() as f64;
            for i in 0..dim {
                cov[[i, i]] += shift;
            }
            Ok(ClassStats {
                prior: members.len() as f64 / n as f64,
                count: members.len(),
                covariance: SymMatrix::from_upper(cov)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Classifier {
        classes,
        dim,
        eps_sq,
        role: Role::Local,
    })
}

/// Count-weighted combination of local classifiers into a global one.
pub fn aggregate_classifiers(locals: &[&Classifier]) -> Result<Classifier> {
    let first = *locals.first().ok_or(Error::AllEmpty)?;
    if let Some(bad) = locals.iter().find(|c| !first.compatible(c)) {
        return Err(Error::ShapeMismatch(format!(
            "classifier (J={}, d={}, eps_sq={}) vs (J={}, d={}, eps_sq={})",
            first.num_classes(),
            first.dim,
            first.eps_sq,
            bad.num_classes(),
            bad.dim,
            bad.eps_sq
        )));
    }
    let grand_total: usize = locals.iter().map(|c| c.total_count()).sum();
    if grand_total == 0 {
        return Err(Error::AllEmpty);
    }
    let (j, dim, eps_sq) = (first.num_classes(), first.dim, first.eps_sq);
    let mut classes = Vec::with_capacity(j);
    for k in 0..j {
        let class_total: usize = locals.iter().map(|c| c.classes[k].count).sum();
        // π_j = Σ_m (D_m / D) π_{m,j}
        let prior = locals
            .iter()
            .map(|c| c.total_count() as f64 / grand_total as f64 * c.classes[k].prior)
            .sum();
        let covariance = if class_total == 0 {
            Classifier::null_covariance(dim, eps_sq)
        } else {
            let mut acc = ndarray::Array2::<f64>::zeros((dim, dim));
            for c in locals {
                let s = &c.classes[k];
                if s.count > 0 {
                    acc.scaled_add(s.count as f64 / class_total as f64, s.covariance.as_array());
                }
            }
            SymMatrix::from_upper(acc)?
        };
        classes.push(ClassStats {
            prior,
            count: class_total,
            covariance,
        });
    }
    Ok(Classifier {
        classes,
        dim,
        eps_sq,
        role: Role::Global,
    })
}

/// Exponential blending `β·prev + (1−β)·fresh` of class covariances; priors
/// and counts come from `fresh`. With no previous classifier, `fresh` is
/// returned unchanged.
pub fn apply_covariance_momentum(
    previous: Option<&Classifier>,
    fresh: &Classifier,
    beta_cov: f64,
) -> Result<Classifier> {
    if !(0.0..1.0).contains(&beta_cov) {
        return Err(Error::InvalidSpec(format!("beta_cov must be in [0, 1), got {beta_cov}")));
    }
    let Some(prev) = previous else {
        return Ok(fresh.clone());
    };
    if !prev.compatible(fresh) {
        return Err(Error::ShapeMismatch("momentum between incompatible classifiers".into()));
    }
    if beta_cov == 0.0 {
        return Ok(fresh.clone());
    }
    let mut out = fresh.clone();
    for (o, p) in out.classes.iter_mut().zip(&prev.classes) {
        o.covariance = p.covariance.lincomb(beta_cov, &o.covariance, 1.0 - beta_cov)?;
    }
    Ok(out)
}

/// Removes one device's contribution from the global classifier:
///
/// `Σ_{j∖m} = (N_j Σ_j − D_{m,j} Σ_{m,j}) / (N_j − D_{m,j})`.
///
/// When the device holds every sample of a class the denominator vanishes;
/// that class then keeps the global covariance and count, with a warning.
pub fn external_corrector(
    global: &Classifier,
    local: &Classifier,
    total_counts: &[usize],
) -> Result<Classifier> {
    if !global.compatible(local) || total_counts.len() != global.num_classes() {
        return Err(Error::ShapeMismatch("corrector inputs disagree on J, d or eps_sq".into()));
    }
    let mut classes = Vec::with_capacity(global.num_classes());
    for (k, (g, l)) in global.classes.iter().zip(&local.classes).enumerate() {
        let total = total_counts[k];
        if l.count > total {
            return Err(Error::CountMismatch {
                class: k,
                local: l.count,
                total,
            });
        }
        let rest = total - l.count;
        if l.count == 0 {
            classes.push(ClassStats {
                prior: 0.0,
                count: total,
                covariance: g.covariance.clone(),
            });
        } else if rest == 0 {
            warn!("class {k} is held entirely by one device; corrector falls back to the global covariance");
            classes.push(ClassStats {
                prior: 0.0,
                count: total,
                covariance: g.covariance.clone(),
            });
        } else {
            let cov = g
                .covariance
                .lincomb(total as f64, &l.covariance, -(l.count as f64))?
                .scale(1.0 / rest as f64);
            classes.push(ClassStats {
                prior: 0.0,
                count: rest,
                covariance: cov,
            });
        }
    }
    let remaining: usize = classes.iter().map(|c| c.count).sum();
    for c in &mut classes {
        c.prior = if remaining == 0 { 0.0 } else { c.count as f64 / remaining as f64 };
    }
    Ok(Classifier {
        classes,
        dim: global.dim,
        eps_sq: global.eps_sq,
        role: Role::Corrector,
    })
}

/// Mean absolute cosine similarity between principal eigenvectors of the
/// populated classes. 0 means mutually orthogonal class subspaces.
pub fn orthogonality_index(classifier: &Classifier) -> Result<f64> {
    let mut dirs = Vec::new();
    for (k, c) in classifier.classes.iter().enumerate() {
        if c.count == 0 {
            continue;
        }
        let v = match principal_eigenvector(&c.covariance) {
            Ok(v) => v,
            Err(Error::DegenerateSpectrum { vector, .. }) => {
                warn!("class {k}: principal direction is ambiguous");
                ndarray::Array1::from(vector)
            }
            Err(e) => return Err(e),
        };
        dirs.push(v);
    }
    let j = dirs.len();
    if j < 2 {
        return Err(Error::TooFewClasses(j));
    }
    let mut acc = 0.0;
    for u in 0..j {
        for v in (u + 1)..j {
            acc += 2.0 * dirs[u].dot(&dirs[v]).abs();
        }
    }
    Ok(acc / (j * (j - 1)) as f64)
}
