//! Python bindings. Feature matrices cross the boundary as lists of samples
//! (`n` rows of length `d`); they are transposed to the column layout used
//! by the core crate.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedcova::classifier;
use fedcova::config::ExperimentConfig;
use fedcova::covstats::{self, Role};
use fedcova::objective::{self, FeatureBlock};
use fedcova::orchestrator;
use fedcova::symlin::SymMatrix;

fn py_err(e: fedcova::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `n × d` rows to a `d × n` matrix.
fn columns(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    Ok(Array2::from_shape_fn((d, n), |(i, j)| rows[j][i]))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.columns().into_iter().map(|c| c.to_vec()).collect()
}

fn matrix_rows(m: &SymMatrix) -> Vec<Vec<f64>> {
    m.as_array().rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Gaussian class statistics: priors, counts and covariances per class.
#[pyclass(name = "Classifier", module = "fedcova_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyClassifier {
    inner: covstats::Classifier,
}

#[pymethods]
impl PyClassifier {
    /// Builds a global classifier from explicit statistics.
    #[new]
    #[pyo3(signature = (priors, counts, covariances, eps_sq))]
    fn new(priors: Vec<f64>, counts: Vec<usize>, covariances: Vec<Vec<Vec<f64>>>, eps_sq: f64) -> PyResult<Self> {
        if priors.len() != counts.len() || priors.len() != covariances.len() || priors.is_empty() {
            return Err(PyValueError::new_err("priors, counts and covariances must have one entry per class"));
        }
        let dim = covariances[0].len();
        let classes = priors
            .iter()
            .zip(&counts)
            .zip(&covariances)
            .map(|((&prior, &count), cov)| {
                if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
                    return Err(PyValueError::new_err("covariances must all be d × d"));
                }
                let a = Array2::from_shape_fn((dim, dim), |(i, j)| cov[i][j]);
                Ok(covstats::ClassStats {
                    prior,
                    count,
                    covariance: SymMatrix::from_symmetric(a).map_err(py_err)?,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: covstats::Classifier { classes, dim, eps_sq, role: Role::Global },
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn role(&self) -> &'static str {
        match self.inner.role {
            Role::Local => "local",
            Role::Global => "global",
            Role::Corrector => "corrector",
        }
    }

    #[getter]
    fn priors(&self) -> Vec<f64> {
        self.inner.classes.iter().map(|c| c.prior).collect()
    }

    #[getter]
    fn counts(&self) -> Vec<usize> {
        self.inner.counts()
    }

    #[getter]
    fn covariances(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.classes.iter().map(|c| matrix_rows(&c.covariance)).collect()
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        let mut buf = Vec::new();
        self.inner.write_snapshot(&mut buf).map_err(py_err)?;
        Ok(buf)
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: covstats::Classifier::read_snapshot(data.as_slice()).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Classifier(role={}, J={}, d={})", self.role(), self.inner.num_classes(), self.inner.dim)
    }
}

#[pyfunction]
fn estimate_local_classifier(features: Vec<Vec<f64>>, labels: Vec<usize>, eps_sq: f64, num_classes: usize) -> PyResult<PyClassifier> {
    let z = columns(&features)?;
    let inner = covstats::estimate_local_classifier(z.view(), &labels, eps_sq, num_classes).map_err(py_err)?;
    Ok(PyClassifier { inner })
}

#[pyfunction]
fn aggregate_classifiers(locals: Vec<PyRef<'_, PyClassifier>>) -> PyResult<PyClassifier> {
    let refs: Vec<&covstats::Classifier> = locals.iter().map(|c| &c.inner).collect();
    Ok(PyClassifier {
        inner: covstats::aggregate_classifiers(&refs).map_err(py_err)?,
    })
}

#[pyfunction]
fn external_corrector(global: PyRef<'_, PyClassifier>, local: PyRef<'_, PyClassifier>, totals: Vec<usize>) -> PyResult<PyClassifier> {
    Ok(PyClassifier {
        inner: covstats::external_corrector(&global.inner, &local.inner, &totals).map_err(py_err)?,
    })
}

#[pyfunction]
fn orthogonality_index(cls: PyRef<'_, PyClassifier>) -> PyResult<f64> {
    covstats::orthogonality_index(&cls.inner).map_err(py_err)
}

/// Returns `(scores, confidences, predicted)`.
#[pyfunction]
fn map_score(z: Vec<f64>, cls: PyRef<'_, PyClassifier>) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
    let s = classifier::map_score(ndarray::ArrayView1::from(&z), &cls.inner).map_err(py_err)?;
    Ok((s.scores, s.confidences, s.predicted))
}

/// Returns `(scores, confidences, predicted)`.
#[pyfunction]
fn subspace_score(z: Vec<f64>, cls: PyRef<'_, PyClassifier>, alpha: f64) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
    let s = classifier::subspace_score(ndarray::ArrayView1::from(&z), &cls.inner, alpha).map_err(py_err)?;
    Ok((s.scores, s.confidences, s.predicted))
}

/// Lossy mutual-information loss of a labelled feature block.
#[pyfunction]
fn loss_value(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, eps_sq: f64) -> PyResult<f64> {
    let block = FeatureBlock::new(columns(&features)?, labels, num_classes).map_err(py_err)?;
    Ok(objective::loss_value(&block, eps_sq).map_err(py_err)?.total)
}

/// Gradient of [`loss_value`] with respect to each sample's features.
#[pyfunction]
fn loss_grad(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, eps_sq: f64) -> PyResult<Vec<Vec<f64>>> {
    let block = FeatureBlock::new(columns(&features)?, labels, num_classes).map_err(py_err)?;
    Ok(rows(&objective::loss_grad_features(&block, eps_sq).map_err(py_err)?))
}

#[pyfunction]
fn classifier_values(num_classes: usize, dim: usize) -> usize {
    covstats::classifier_values(num_classes, dim)
}

/// Runs an experiment described by a TOML string. Returns a dict with the
/// per-round metrics, the pre-training values, the communication summary
/// and the final global classifier (`None` in cross-entropy mode).
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(py_err)?;
    let result = py.detach(|| orchestrator::run_experiment(&config)).map_err(py_err)?;
    let metrics = result
        .metrics
        .iter()
        .map(|m| {
            let d = PyDict::new(py);
            let (inspected, relabeled, correct) = m
                .corrections
                .as_ref()
                .map_or((0, 0, 0), |c| (c.inspected, c.relabeled, c.relabeled_correctly));
            d.set_item("round", m.round)?;
            d.set_item("mode", m.mode.as_str())?;
            d.set_item("global_accuracy", m.global_accuracy)?;
            d.set_item("train_accuracy", m.train_accuracy)?;
            d.set_item("global_noise_rate", m.global_noise_rate)?;
            d.set_item("orthogonality_index", m.orthogonality_index)?;
            d.set_item("mean_loss", m.mean_loss)?;
            d.set_item("corrections_inspected", inspected)?;
            d.set_item("corrections_relabeled", relabeled)?;
            d.set_item("corrections_correct", correct)?;
            d.set_item("classifier_values", m.classifier_values)?;
            d.set_item("model_values", m.model_values)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = PyDict::new(py);
    out.set_item("metrics", metrics)?;
    out.set_item("config_hash", config.hash_hex())?;
    out.set_item("initial_noise_rate", result.initial.global_noise_rate)?;
    out.set_item("initial_orthogonality_index", result.initial.orthogonality_index)?;
    out.set_item("last5_mean_accuracy", result.last_k_mean_accuracy(5))?;
    out.set_item("classifier_values", result.comm.classifier_values)?;
    out.set_item("model_values", result.comm.model_values)?;
    out.set_item("ratio", result.comm.ratio)?;
    out.set_item("classifier", result.final_classifier.map(|inner| PyClassifier { inner }))?;
    Ok(out)
}

/// Oracle self-checks as `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (seed = 1))]
fn verify(seed: u64) -> Vec<(String, bool, String)> {
    fedcova::verify::run_all(seed)
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

#[pymodule]
fn fedcova_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(estimate_local_classifier, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_classifiers, m)?)?;
    m.add_function(wrap_pyfunction!(external_corrector, m)?)?;
    m.add_function(wrap_pyfunction!(orthogonality_index, m)?)?;
    m.add_function(wrap_pyfunction!(map_score, m)?)?;
    m.add_function(wrap_pyfunction!(subspace_score, m)?)?;
    m.add_function(wrap_pyfunction!(loss_value, m)?)?;
    m.add_function(wrap_pyfunction!(loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(classifier_values, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_columns_round_trip() {
        let r = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let c = columns(&r).unwrap();
        assert_eq!(c.dim(), (3, 2));
        assert_eq!(c[[2, 1]], 6.0);
        assert_eq!(rows(&c), r);
    }
}
