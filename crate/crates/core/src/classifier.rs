//! MAP and subspace-augmented scoring against a covariance classifier, and
//! confidence-thresholded relabeling.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::covstats::{Classifier, Role};
use crate::error::{Error, Result};
use crate::symlin::{cholesky_logdet, spd_inverse, spd_neg_power, SymMatrix};

/// Stand-in for `−∞` so softmax never sees NaN.
pub const NEG_SCORE: f64 = f64::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Map,
    Subspace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub confidences: Vec<f64>,
    pub predicted: usize,
    pub mode: ScoreMode,
}

impl ClassScores {
    fn from_scores(scores: Vec<f64>, mode: ScoreMode) -> Self {
        let predicted = argmax(&scores);
        let confidences = softmax(&scores);
        Self {
            scores,
            confidences,
            predicted,
            mode,
        }
    }

    pub fn confidence(&self) -> f64 {
        self.confidences[self.predicted]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectionReport {
    pub inspected: usize,
    pub relabeled: usize,
    /// Relabels that restored the hidden true label; zero when no ground
    /// truth was supplied.
    pub relabeled_correctly: usize,
    /// `flips[from][to]` counts relabels from observed class `from`.
    pub per_class_flips: Vec<Vec<usize>>,
}

impl CorrectionReport {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            per_class_flips: vec![vec![0; num_classes]; num_classes],
            ..Default::default()
        }
    }

    pub fn merge(&mut self, other: &CorrectionReport) {
        self.inspected += other.inspected;
        self.relabeled += other.relabeled;
        self.relabeled_correctly += other.relabeled_correctly;
        if self.per_class_flips.is_empty() {
            self.per_class_flips = other.per_class_flips.clone();
        } else {
            for (row, orow) in self.per_class_flips.iter_mut().zip(&other.per_class_flips) {
                for (v, o) in row.iter_mut().zip(orow) {
                    *v += o;
                }
            }
        }
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature-1 softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Precomputed MAP terms: `log π_j − ½ logdet Σ_j` and `Σ_j⁻¹`.
#[derive(Debug, Clone)]
pub struct MapScorer {
    offsets: Vec<f64>,
    precisions: Vec<Option<SymMatrix>>,
}

impl MapScorer {
    pub fn new(classifier: &Classifier) -> Result<Self> {
        let mut offsets = Vec::with_capacity(classifier.num_classes());
        let mut precisions = Vec::with_capacity(classifier.num_classes());
        for c in &classifier.classes {
            if c.prior > 0.0 {
                offsets.push(c.prior.ln() - 0.5 * cholesky_logdet(&c.covariance)?);
                precisions.push(Some(spd_inverse(&c.covariance)?));
            } else {
                offsets.push(NEG_SCORE);
                precisions.push(None);
            }
        }
        Ok(Self { offsets, precisions })
    }

    pub fn score(&self, z: ArrayView1<f64>) -> ClassScores {
        let scores = self
            .offsets
            .iter()
            .zip(&self.precisions)
            .map(|(&off, p)| match p {
                Some(p) => off - 0.5 * p.quad_form(z),
                None => NEG_SCORE,
            })
            .collect();
        ClassScores::from_scores(scores, ScoreMode::Map)
    }
}

/// Precomputed `Σ_j^{−α}` for the score `−(zᵀ Σ_j^{−α} z)^{1/α}`.
#[derive(Debug, Clone)]
pub struct SubspaceScorer {
    alpha: f64,
    powers: Vec<Option<Array2<f64>>>,
}

impl SubspaceScorer {
    pub fn new(classifier: &Classifier, alpha: f64) -> Result<Self> {
        if !(alpha >= 1.0) {
            return Err(Error::InvalidSpec(format!("alpha must be >= 1, got {alpha}")));
        }
        let powers = classifier
            .classes
            .iter()
            .map(|c| {
                if c.count == 0 {
                    Ok(None)
                } else {
                    spd_neg_power(&c.covariance, alpha).map(|p| Some(p.into_array()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { alpha, powers })
    }

    pub fn raw_scores(&self, z: ArrayView1<f64>) -> Vec<f64> {
        self.powers
            .iter()
            .map(|p| match p {
                Some(p) => -z.dot(&p.dot(&z)).max(0.0).powf(1.0 / self.alpha),
                None => NEG_SCORE,
            })
            .collect()
    }

    pub fn score(&self, z: ArrayView1<f64>) -> ClassScores {
        ClassScores::from_scores(self.raw_scores(z), ScoreMode::Subspace)
    }

    /// Argmax prediction for every column of a `d × N` block.
    pub fn predict_all(&self, features: ArrayView2<f64>) -> Vec<usize> {
        features
            .axis_iter(Axis(1))
            .map(|z| argmax(&self.raw_scores(z)))
            .collect()
    }
}

/// `log π_j − ½ logdet Σ_j − ½ zᵀ Σ_j⁻¹ z`, softmax confidences.
pub fn map_score(z: ArrayView1<f64>, classifier: &Classifier) -> Result<ClassScores> {
    check_dim(z, classifier)?;
    Ok(MapScorer::new(classifier)?.score(z))
}

/// `−(zᵀ Σ_j^{−α} z)^{1/α}` (priors ignored), softmax confidences.
pub fn subspace_score(z: ArrayView1<f64>, classifier: &Classifier, alpha: f64) -> Result<ClassScores> {
    check_dim(z, classifier)?;
    Ok(SubspaceScorer::new(classifier, alpha)?.score(z))
}

fn check_dim(z: ArrayView1<f64>, classifier: &Classifier) -> Result<()> {
    if z.len() != classifier.dim {
        return Err(Error::ShapeMismatch(format!(
            "feature of length {} against classifier of dim {}",
            z.len(),
            classifier.dim
        )));
    }
    Ok(())
}

/// Relabels samples whose subspace prediction under `corrector` differs from
/// the observed label with softmax confidence at least `eta_c`.
pub fn relabel_dataset(
    features: ArrayView2<f64>,
    observed_labels: &[usize],
    corrector: &Classifier,
    alpha: f64,
    eta_c: f64,
    true_labels: Option<&[usize]>,
) -> Result<(Vec<usize>, CorrectionReport)> {
    if corrector.role == Role::Local {
        return Err(Error::InvalidSpec("relabeling needs a global or corrector classifier".into()));
    }
    if features.ncols() != observed_labels.len() || features.nrows() != corrector.dim {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} vs {} labels, classifier dim {}",
            features.dim(),
            observed_labels.len(),
            corrector.dim
        )));
    }
    if let Some(t) = true_labels {
        if t.len() != observed_labels.len() {
            return Err(Error::ShapeMismatch("true labels length differs".into()));
        }
    }
    let j = corrector.num_classes();
    if let Some(&label) = observed_labels.iter().find(|&&l| l >= j) {
        return Err(Error::LabelOutOfRange { label, num_classes: j });
    }
    let scorer = SubspaceScorer::new(corrector, alpha)?;
    let mut labels = observed_labels.to_vec();
    let mut report = CorrectionReport::empty(j);
    for (i, z) in features.axis_iter(Axis(1)).enumerate() {
        report.inspected += 1;
        let s = scorer.score(z);
        if s.predicted != observed_labels[i] && s.confidence() >= eta_c {
            report.relabeled += 1;
            report.per_class_flips[observed_labels[i]][s.predicted] += 1;
            if true_labels.is_some_and(|t| t[i] == s.predicted) {
                report.relabeled_correctly += 1;
            }
            labels[i] = s.predicted;
        }
    }
    Ok((labels, report))
}

/// Log-density of `N(0, Σ)` at `z`, evaluated directly.
pub fn gaussian_log_density(z: ArrayView1<f64>, cov: &SymMatrix) -> Result<f64> {
    let d = z.len() as f64;
    let logdet = cholesky_logdet(cov)?;
    let quad = z.dot(&spd_inverse(cov)?.as_array().dot(&z));
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covstats::ClassStats;
    use ndarray::Array1;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn unit(v: &[f64]) -> Array1<f64> {
        let a = Array1::from(v.to_vec());
        let n = a.dot(&a).sqrt();
        a / n
    }

    fn toy() -> Classifier {
        Classifier {
            classes: vec![
                ClassStats { prior: 0.5, count: 5, covariance: SymMatrix::from_diag(&[4.0, 0.2]) },
                ClassStats { prior: 0.5, count: 5, covariance: SymMatrix::from_diag(&[0.2, 3.0]) },
            ],
            dim: 2,
            eps_sq: 0.4,
            role: Role::Global,
        }
    }

    #[test]
    fn map_toy_covariances() {
        let z = array![1.0, 0.0];
        let s = map_score(z.view(), &toy()).unwrap();
        let expect0 = 0.5_f64.ln() - 0.5 * 0.8_f64.ln() - 0.125;
        let expect1 = 0.5_f64.ln() - 0.5 * 0.6_f64.ln() - 2.5;
        assert_abs_diff_eq!(s.scores[0], expect0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.scores[1], expect1, epsilon = 1e-14);
        assert_eq!(s.predicted, 0);
        assert_eq!(s.mode, ScoreMode::Map);
    }

    #[test]
    fn identical_classes_tie_to_lowest_index() {
        let mut c = toy();
        c.classes[1] = c.classes[0].clone();
        let s = map_score(array![0.6, 0.8].view(), &c).unwrap();
        assert_eq!(s.predicted, 0);
        assert_abs_diff_eq!(s.confidences[0], 0.5, epsilon = 1e-15);
        let s = subspace_score(array![0.6, 0.8].view(), &c, 3.0).unwrap();
        assert_eq!(s.predicted, 0);
    }

    #[test]
    fn subspace_toy_covariances() {
        let z = array![1.0, 0.0];
        let s1 = subspace_score(z.view(), &toy(), 1.0).unwrap();
        assert_abs_diff_eq!(s1.scores[0], -0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(s1.scores[1], -5.0, epsilon = 1e-12);
        assert_eq!(s1.predicted, 0);
        let s2 = subspace_score(z.view(), &toy(), 2.0).unwrap();
        assert_abs_diff_eq!(s2.scores[0], -0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(s2.scores[1], -5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s2.confidences.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_classes_never_win() {
        let mut c = toy();
        c.classes[0].count = 0;
        c.classes[0].prior = 0.0;
        let s = subspace_score(array![1.0, 0.0].view(), &c, 2.0).unwrap();
        assert_eq!(s.predicted, 1);
        assert_eq!(s.scores[0], NEG_SCORE);
        assert_eq!(s.confidences[0], 0.0);
        let m = map_score(array![1.0, 0.0].view(), &c).unwrap();
        assert_eq!(m.predicted, 1);
        assert!(m.confidences.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn map_agrees_with_density_oracle() {
        let c = toy();
        for z in [array![1.0, 0.0], array![0.0, 1.0], unit(&[0.3, 0.7])] {
            let dens: Vec<f64> = c
                .classes
                .iter()
                .map(|k| k.prior.ln() + gaussian_log_density(z.view(), &k.covariance).unwrap())
                .collect();
            assert_eq!(map_score(z.view(), &c).unwrap().predicted, argmax(&dens));
        }
    }

    #[test]
    fn scale_changes_confidence_not_argmax() {
        let mut c = toy();
        let z = unit(&[0.5, 0.4]);
        let before = subspace_score(z.view(), &c, 2.0).unwrap();
        for k in &mut c.classes {
            k.covariance = k.covariance.scale(9.0);
        }
        let after = subspace_score(z.view(), &c, 2.0).unwrap();
        assert_eq!(before.predicted, after.predicted);
        for (a, b) in before.scores.iter().zip(&after.scores) {
            assert_abs_diff_eq!(*b, a / 9.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[1.0, -2.0, 0.5]);
        let b = softmax(&[101.0, 98.0, 100.5]);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn relabel_threshold_and_guard() {
        let feats = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let observed = [1, 1, 0];
        let truth = [0, 1, 0];
        let (labels, report) =
            relabel_dataset(feats.view(), &observed, &toy(), 2.0, 0.5, Some(&truth)).unwrap();
        assert_eq!(labels, vec![0, 1, 0]);
        assert_eq!(report.inspected, 3);
        assert_eq!(report.relabeled, 1);
        assert_eq!(report.relabeled_correctly, 1);
        assert_eq!(report.per_class_flips, vec![vec![0, 0], vec![1, 0]]);

        let strict = 1.0 + f64::EPSILON;
        let (labels, report) = relabel_dataset(feats.view(), &observed, &toy(), 2.0, strict, None).unwrap();
        assert_eq!(labels, observed.to_vec());
        assert_eq!(report.relabeled, 0);

        // Idempotent at a fixed corrector.
        let (again, r2) = relabel_dataset(feats.view(), &[0, 1, 0], &toy(), 2.0, 0.5, None).unwrap();
        assert_eq!(again, vec![0, 1, 0]);
        assert_eq!(r2.relabeled, 0);
    }

    #[test]
    fn relabel_rejects_local_role() {
        let mut c = toy();
        c.role = Role::Local;
        assert!(relabel_dataset(array![[1.0], [0.0]].view(), &[0], &c, 1.0, 0.5, None).is_err());
    }
}
