//! Dense symmetric and SPD linear algebra.
//!
//! Everything works on [`SymMatrix`], a square `f64` matrix whose storage is
//! kept exactly symmetric: constructors mirror the upper triangle and every
//! operation returning a matrix mirrors its result the same way. Matrices in
//! this crate are small (the feature dimension), so a cyclic Jacobi solver is
//! used for eigendecompositions and a plain Cholesky for log-determinants and
//! inverses.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Eigenvalue floor used by [`spd_neg_power`].
pub const EIGEN_FLOOR: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Square symmetric matrix with mirrored storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    entries: Array2<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix from the upper triangle of `m`; the lower
    /// triangle is ignored and overwritten.
    pub fn from_upper(mut m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c || r == 0 {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square and non-empty, got {r}x{c}"
            )));
        }
        mirror_upper(&mut m);
        Ok(Self { entries: m })
    }

    /// Like [`SymMatrix::from_upper`] but rejects inputs whose triangles
    /// disagree by more than 1e-12.
    pub fn from_symmetric(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r == c {
            for i in 0..r {
                for j in (i + 1)..r {
                    if (m[[i, j]] - m[[j, i]]).abs() > 1e-12 {
                        return Err(Error::ShapeMismatch(format!(
                            "entries ({i},{j}) and ({j},{i}) differ"
                        )));
                    }
                }
            }
        }
        Self::from_upper(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: Array2::eye(dim),
        }
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self {
            entries: Array2::eye(dim) * scale,
        }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self {
            entries: Array2::from_diag(&ArrayView1::from(diag)),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn into_array(self) -> Array2<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn diag(&self) -> Array1<f64> {
        self.entries.diag().to_owned()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            entries: &self.entries * factor,
        }
    }

    /// `a * self + b * other`, mirrored.
    pub fn lincomb(&self, a: f64, other: &SymMatrix, b: f64) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine {}x{} with {}x{}",
                self.dim(),
                self.dim(),
                other.dim(),
                other.dim()
            )));
        }
        let mut m = &self.entries * a + &other.entries * b;
        mirror_upper(&mut m);
        Ok(Self { entries: m })
    }

    /// `xᵀ S x`.
    pub fn quad_form(&self, x: ArrayView1<f64>) -> f64 {
        x.dot(&self.entries.dot(&x))
    }

    pub fn frobenius_distance(&self, other: &SymMatrix) -> f64 {
        (&self.entries - &other.entries)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Upper-triangular entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                out.push(self.entries[[i, j]]);
            }
        }
        out
    }

    pub fn from_upper_triangle(dim: usize, values: &[f64]) -> Result<Self> {
        if values.len() != dim * (dim + 1) / 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} upper-triangular values for dim {dim}, got {}",
                dim * (dim + 1) / 2,
                values.len()
            )));
        }
        let mut m = Array2::zeros((dim, dim));
        let mut k = 0;
        for i in 0..dim {
            for j in i..dim {
                m[[i, j]] = values[k];
                k += 1;
            }
        }
        Self::from_upper(m)
    }
}

/// Eigendecomposition with eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub eigenvalues: Array1<f64>,
    /// Column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Array2<f64>,
}

impl EigenPair {
    /// `V diag(f(λ)) Vᵀ`, mirrored.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let v = &self.eigenvectors;
        let scaled = v * &self.eigenvalues.mapv(f).insert_axis(ndarray::Axis(0));
        let mut m = scaled.dot(&v.t());
        mirror_upper(&mut m);
        SymMatrix { entries: m }
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.reconstruct_with(|l| l)
    }
}

fn mirror_upper(m: &mut Array2<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            m[[j, i]] = m[[i, j]];
        }
    }
}

/// Lower Cholesky factor `L` with `S = L Lᵀ`.
pub fn cholesky(s: &SymMatrix) -> Result<Array2<f64>> {
    let d = s.dim();
    let a = s.as_array();
    let mut l = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                index: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..d {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / ljj;
        }
    }
    Ok(l)
}

/// `log det S` from the Cholesky factor.
pub fn cholesky_logdet(s: &SymMatrix) -> Result<f64> {
    let l = cholesky(s)?;
    Ok(2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>())
}

/// Inverse of an SPD matrix via `S⁻¹ = L⁻ᵀ L⁻¹`.
pub fn spd_inverse(s: &SymMatrix) -> Result<SymMatrix> {
    let l = cholesky(s)?;
    let d = s.dim();
    // Forward substitution for L⁻¹ (lower triangular).
    let mut linv = Array2::<f64>::zeros((d, d));
    for col in 0..d {
        linv[[col, col]] = 1.0 / l[[col, col]];
        for i in (col + 1)..d {
            let mut acc = 0.0;
            for k in col..i {
                acc += l[[i, k]] * linv[[k, col]];
            }
            linv[[i, col]] = -acc / l[[i, i]];
        }
    }
    let mut inv = linv.t().dot(&linv);
    mirror_upper(&mut inv);
    Ok(SymMatrix { entries: inv })
}

/// Solves `S x = b` for SPD `S`.
pub fn spd_solve(s: &SymMatrix, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(s)?;
    let d = s.dim();
    if b.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "right-hand side has length {}, matrix is {d}x{d}",
            b.len()
        )));
    }
    let mut y = Array1::<f64>::zeros(d);
    for i in 0..d {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[[i, k]] * y[k];
        }
        y[i] = acc / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(d);
    for i in (0..d).rev() {
        let mut acc = y[i];
        for k in (i + 1)..d {
            acc -= l[[k, i]] * x[k];
        }
        x[i] = acc / l[[i, i]];
    }
    Ok(x)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigendecomp(s: &SymMatrix) -> Result<EigenPair> {
    let d = s.dim();
    let mut a = s.as_array().clone();
    let mut v = Array2::<f64>::eye(d);
    let scale = s.frobenius_norm();

    let off_norm = |a: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                acc += 2.0 * a[[i, j]] * a[[i, j]];
            }
        }
        acc.sqrt()
    };

    let tol = 1e-15 * scale.max(f64::MIN_POSITIVE);
    let mut converged = off_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..d {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - sn * akq;
                    a[[k, q]] = sn * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - sn * aqk;
                    a[[q, k]] = sn * apk + c * aqk;
                }
                // The rotation zeroes (p, q) analytically; pin it to kill rounding.
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for k in 0..d {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= tol;
    }
    if !converged {
        return Err(Error::ConvergenceFailure {
            sweeps,
            residual: off_norm(&a),
        });
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]).then(i.cmp(&j)));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut eigenvectors = Array2::<f64>::zeros((d, d));
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).to_owned();
        canonicalize_sign(&mut col);
        eigenvectors.column_mut(dst).assign(&col);
    }
    Ok(EigenPair {
        eigenvalues,
        eigenvectors,
    })
}

/// Flips `v` so its first entry with magnitude above 1e-12 is positive.
fn canonicalize_sign(v: &mut Array1<f64>) {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
}

/// `S^{-alpha}` with eigenvalues floored at [`EIGEN_FLOOR`].
pub fn spd_neg_power(s: &SymMatrix, alpha: f64) -> Result<SymMatrix> {
    spd_neg_power_with_floor(s, alpha, Some(EIGEN_FLOOR))
}

/// `S^{-alpha}`; `floor = None` is strict mode, where any non-positive
/// eigenvalue is an error.
pub fn spd_neg_power_with_floor(
    s: &SymMatrix,
    alpha: f64,
    floor: Option<f64>,
) -> Result<SymMatrix> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "negative power exponent must be positive, got {alpha}"
        )));
    }
    let eig = sym_eigendecomp(s)?;
    if floor.is_none() {
        if let Some((index, &value)) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .find(|(_, &l)| l <= 0.0)
        {
            return Err(Error::NotPositiveDefinite { index, value });
        }
    }
    let floor = floor.unwrap_or(0.0);
    Ok(eig.reconstruct_with(|l| l.max(floor).powf(-alpha)))
}

/// Unit eigenvector of the largest eigenvalue, first nonzero entry positive.
///
/// When the top two eigenvalues agree within 1e-10 the direction is
/// ambiguous and [`Error::DegenerateSpectrum`] carries the vector anyway.
pub fn principal_eigenvector(s: &SymMatrix) -> Result<Array1<f64>> {
    let eig = sym_eigendecomp(s)?;
    let v = eig.eigenvectors.column(0).to_owned();
    if eig.eigenvalues.len() >= 2 {
        let top = eig.eigenvalues[0];
        let second = eig.eigenvalues[1];
        if (top - second).abs() <= 1e-10 * top.abs().max(1.0) {
            return Err(Error::DegenerateSpectrum {
                top,
                second,
                vector: v.to_vec(),
            });
        }
    }
    Ok(v)
}
