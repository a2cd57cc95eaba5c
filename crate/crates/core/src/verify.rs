//! Self-checks against independent oracles: finite differences for the
//! encoder gradient, brute-force Gaussian densities for MAP scoring, direct
//! complement aggregation for correctors, and eigenvalue bookkeeping for the
//! lossy covariance.
//!
//! Every check takes a fixture count so the same code serves the quick
//! `verify` command and the full acceptance suite.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classifier::{argmax, map_score, subspace_score};
use crate::covstats::{aggregate_classifiers, classifier_values, external_corrector, ClassStats, Classifier, Role};
use crate::encoder::{backward, forward, init_encoder, EncoderParams, ParamGrads};
use crate::error::Result;
use crate::objective::{loss_grad_features, loss_value, lossy_covariance, FeatureBlock};
use crate::symlin::{sym_eigendecomp, SymMatrix};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Pre-activations closer than this to zero are avoided in gradient fixtures
/// so that no finite-difference probe crosses a ReLU kink.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

pub fn report(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for o in outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{status}  {:width$}  {}", o.name, o.detail);
    }
    out
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, dim: usize, floor: f64) -> SymMatrix {
    let a = gaussian_matrix(rng, dim, dim + 2);
    let mut s = a.dot(&a.t()) / (dim + 2) as f64;
    for i in 0..dim {
        s[[i, i]] += floor;
    }
    SymMatrix::from_upper(s).expect("square")
}

/// A labelled batch pushed through a small random encoder.
#[derive(Debug, Clone)]
pub struct GradientFixture {
    pub params: EncoderParams,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub eps_sq: f64,
}

/// Random fixture with `d ≤ 4`, `B ≤ 16`, `J ≤ 3`, at least two classes
/// present, and no pre-activation within the kink margin.
pub fn gradient_fixture(seed: u64) -> GradientFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let input_dim = rng.random_range(2..=5);
        let hidden = rng.random_range(2..=6);
        let dim = rng.random_range(2..=4);
        let num_classes = rng.random_range(2..=3);
        let batch = rng.random_range(4..=16);
        let eps_sq = rng.random_range(0.1..2.0);
        let dims = if rng.random_bool(0.5) { vec![input_dim, hidden, dim] } else { vec![input_dim, dim] };
        let params = init_encoder(&dims, rng.random()).expect("valid dims");
        let inputs = gaussian_matrix(&mut rng, input_dim, batch);
        let mut labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..num_classes)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let Ok((_, tape)) = forward(&params, inputs.view()) else { continue };
        let hidden_ok = tape.pre_activations[..tape.pre_activations.len() - 1]
            .iter()
            .all(|v| v.iter().all(|x| x.abs() > KINK_MARGIN));
        if hidden_ok && !tape.degenerate.iter().any(|&d| d) {
            return GradientFixture { params, inputs, labels, num_classes, eps_sq };
        }
    }
}

/// Signature of an analytic gradient under test.
pub type GradientFn = fn(&EncoderParams, ArrayView2<f64>, &[usize], usize, f64) -> Result<ParamGrads>;

/// Loss of the full pipeline: encoder, normalization, lossy MI objective.
pub fn pipeline_loss(params: &EncoderParams, inputs: ArrayView2<f64>, labels: &[usize], num_classes: usize, eps_sq: f64) -> Result<f64> {
    let (z, _) = forward(params, inputs)?;
    Ok(loss_value(&FeatureBlock::new(z, labels.to_vec(), num_classes)?, eps_sq)?.total)
}

/// Back-propagated gradient of [`pipeline_loss`].
pub fn pipeline_gradient(params: &EncoderParams, inputs: ArrayView2<f64>, labels: &[usize], num_classes: usize, eps_sq: f64) -> Result<ParamGrads> {
    let (z, tape) = forward(params, inputs)?;
    let grad_z = loss_grad_features(&FeatureBlock::new(z, labels.to_vec(), num_classes)?, eps_sq)?;
    backward(params, &tape, grad_z.view())
}

/// Entry error: relative to the finite-difference value, except that
/// absolute agreement below `1e-9` counts as exact.
fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-9 {
        0.0
    } else {
        diff / (numeric.abs() + 1e-8)
    }
}

/// Worst entry error of `grad_fn` against central differences over every
/// weight and bias.
pub fn max_gradient_error(fx: &GradientFixture, grad_fn: GradientFn) -> Result<f64> {
    let x = fx.inputs.view();
    let grads = grad_fn(&fx.params, x, &fx.labels, fx.num_classes, fx.eps_sq)?;
    let loss = |p: &EncoderParams| pipeline_loss(p, x, &fx.labels, fx.num_classes, fx.eps_sq);
    let mut worst = 0.0f64;
    for k in 0..fx.params.num_layers() {
        let cols = fx.params.weights[k].ncols();
        for idx in 0..fx.params.weights[k].len() {
            let at = (idx / cols, idx % cols);
            let mut plus = fx.params.clone();
            plus.weights[k][at] += FD_STEP;
            let mut minus = fx.params.clone();
            minus.weights[k][at] -= FD_STEP;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(entry_error(grads.weights[k][at], numeric));
        }
        for r in 0..fx.params.biases[k].len() {
            let mut plus = fx.params.clone();
            plus.biases[k][r] += FD_STEP;
            let mut minus = fx.params.clone();
            minus.biases[k][r] -= FD_STEP;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(entry_error(grads.biases[k][r], numeric));
        }
    }
    Ok(worst)
}

pub fn check_gradient(fixtures: usize, seed: u64, grad_fn: GradientFn) -> CheckOutcome {
    let mut worst = 0.0f64;
    for i in 0..fixtures {
        match max_gradient_error(&gradient_fixture(seed.wrapping_add(i as u64)), grad_fn) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CheckOutcome::new("gradient", false, format!("fixture {i}: {e}")),
        }
    }
    CheckOutcome::new(
        "gradient",
        worst <= 1e-5,
        format!("{fixtures} fixtures, worst relative error {worst:.2e} (limit 1e-5)"),
    )
}

/// Loss of blocks whose samples all share one label.
pub fn check_single_class(fixtures: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..fixtures {
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=40);
        let num_classes = rng.random_range(1..=5);
        let label = rng.random_range(0..num_classes);
        let z = gaussian_matrix(&mut rng, dim, n);
        let eps_sq = rng.random_range(0.01..4.0);
        let block = FeatureBlock::new(z, vec![label; n], num_classes).expect("valid block");
        match loss_value(&block, eps_sq) {
            Ok(l) => worst = worst.max(l.total.abs()),
            Err(e) => return CheckOutcome::new("single-class nullity", false, e.to_string()),
        }
    }
    CheckOutcome::new(
        "single-class nullity",
        worst <= 1e-10,
        format!("{fixtures} blocks, worst |loss| {worst:.2e} (limit 1e-10)"),
    )
}

/// `log N(z; 0, Σ)` through the eigendecomposition, independent of the
/// Cholesky path used by the scorers.
fn eigen_log_density(z: ArrayView1<f64>, cov: &SymMatrix) -> f64 {
    let eig = sym_eigendecomp(cov).expect("symmetric");
    let proj = eig.eigenvectors.t().dot(&z);
    let logdet: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let quad: f64 = proj.iter().zip(&eig.eigenvalues).map(|(p, l)| p * p / l).sum();
    -0.5 * (z.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn random_classifier(rng: &mut ChaCha8Rng, dim: usize, num_classes: usize, normalize_det: bool, equal_priors: bool) -> Classifier {
    let raw: Vec<f64> = (0..num_classes).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let classes = raw
        .iter()
        .map(|&w| {
            let mut cov = random_spd(rng, dim, 0.05);
            if normalize_det {
                let logdet: f64 = sym_eigendecomp(&cov).expect("symmetric").eigenvalues.iter().map(|l| l.ln()).sum();
                cov = cov.scale((-logdet / dim as f64).exp());
            }
            ClassStats {
                prior: if equal_priors { 1.0 / num_classes as f64 } else { w / sum },
                count: 1,
                covariance: cov,
            }
        })
        .collect();
    Classifier { classes, dim, eps_sq: 0.1, role: Role::Global }
}

/// MAP argmax vs brute-force `argmax π_j N(z; 0, Σ_j)`, and subspace ranking
/// at `α = 1` vs MAP ranking under unit determinants and equal priors.
pub fn check_map_oracle(fixtures: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..fixtures {
        let dim = rng.random_range(1..=6);
        let num_classes = rng.random_range(2..=5);
        let z: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));

        let cls = random_classifier(&mut rng, dim, num_classes, false, false);
        let brute: Vec<f64> = cls
            .classes
            .iter()
            .map(|c| c.prior * eigen_log_density(z.view(), &c.covariance).exp())
            .collect();
        match map_score(z.view(), &cls) {
            Ok(s) if s.predicted == argmax(&brute) => {}
            _ => mismatches += 1,
        }

        // In one dimension unit determinants make every class identical.
        let dim = dim.max(2);
        let z: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
        let cls = random_classifier(&mut rng, dim, num_classes, true, true);
        match (map_score(z.view(), &cls), subspace_score(z.view(), &cls, 1.0)) {
            (Ok(m), Ok(s)) if ranking(&m.scores) == ranking(&s.scores) => {}
            _ => mismatches += 1,
        }
    }
    CheckOutcome::new(
        "MAP oracle",
        mismatches == 0,
        format!("{fixtures} fixtures, {mismatches} mismatches"),
    )
}

/// A random fleet of local classifiers where class 0 is held by device 0
/// only and every device lacks at least one other class.
pub fn random_fleet(rng: &mut ChaCha8Rng) -> Vec<Classifier> {
    let devices = rng.random_range(2..=6);
    let dim = rng.random_range(1..=5);
    let num_classes = rng.random_range(3..=5);
    let eps_sq = 0.5;
    (0..devices)
        .map(|m| {
            let missing = rng.random_range(1..num_classes);
            let counts: Vec<usize> = (0..num_classes)
                .map(|j| match j {
                    0 if m == 0 => rng.random_range(1..30),
                    0 => 0,
                    j if j == missing => 0,
                    _ => rng.random_range(1..30),
                })
                .collect();
            let total: usize = counts.iter().sum();
            let classes = counts
                .iter()
                .map(|&count| ClassStats {
                    prior: count as f64 / total as f64,
                    count,
                    covariance: if count == 0 {
                        Classifier::null_covariance(dim, eps_sq)
                    } else {
                        random_spd(rng, dim, eps_sq / dim as f64)
                    },
                })
                .collect();
            Classifier { classes, dim, eps_sq, role: Role::Local }
        })
        .collect()
}

/// Largest per-class Frobenius gap between a device's external corrector
/// and the direct aggregate of every other device. Classes nobody else
/// holds are compared against the global covariance instead.
pub fn corrector_gap(fleet: &[Classifier]) -> Result<f64> {
    let all: Vec<&Classifier> = fleet.iter().collect();
    let global = aggregate_classifiers(&all)?;
    let totals = global.counts();
    let mut worst = 0.0f64;
    for (m, local) in fleet.iter().enumerate() {
        let corrector = external_corrector(&global, local, &totals)?;
        let rest: Vec<&Classifier> = fleet.iter().enumerate().filter(|&(k, _)| k != m).map(|(_, c)| c).collect();
        let direct = aggregate_classifiers(&rest)?;
        for k in 0..global.num_classes() {
            let expected = if direct.classes[k].count == 0 {
                &global.classes[k].covariance
            } else {
                &direct.classes[k].covariance
            };
            worst = worst.max(corrector.classes[k].covariance.frobenius_distance(expected));
        }
    }
    Ok(worst)
}

pub fn check_corrector(fixtures: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..fixtures {
        match corrector_gap(&random_fleet(&mut rng)) {
            Ok(g) => worst = worst.max(g),
            Err(e) => return CheckOutcome::new("corrector algebra", false, format!("fleet {i}: {e}")),
        }
    }
    CheckOutcome::new(
        "corrector algebra",
        worst <= 1e-10,
        format!("{fixtures} fleets, worst Frobenius gap {worst:.2e} (limit 1e-10)"),
    )
}

/// Eigenvalues of the lossy covariance minus those of the plain one, less
/// the expected shift `ε²/d`.
pub fn eigen_shift_gap(block: ArrayView2<f64>, eps_sq: f64) -> Result<f64> {
    let dim = block.nrows() as f64;
    let shifted = sym_eigendecomp(&lossy_covariance(block, eps_sq)?)?.eigenvalues;
    let plain = sym_eigendecomp(&lossy_covariance(block, 0.0)?)?.eigenvalues;
    Ok(shifted
        .iter()
        .zip(plain.iter())
        .map(|(s, p)| (s - p - eps_sq / dim).abs())
        .fold(0.0, f64::max))
}

pub fn check_eigen_shift(fixtures: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..fixtures {
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=30);
        let z = gaussian_matrix(&mut rng, dim, n);
        let eps_sq = rng.random_range(0.0..5.0);
        match eigen_shift_gap(z.view(), eps_sq) {
            Ok(g) => worst = worst.max(g),
            Err(e) => return CheckOutcome::new("eigenvalue shift", false, format!("block {i}: {e}")),
        }
    }
    CheckOutcome::new(
        "eigenvalue shift",
        worst <= 1e-9,
        format!("{fixtures} blocks, worst deviation {worst:.2e} (limit 1e-9)"),
    )
}

pub fn check_comm_accounting() -> CheckOutcome {
    let big = classifier_values(10, 128);
    let small = classifier_values(4, 8);
    CheckOutcome::new(
        "communication accounting",
        big == 163_840 && small == 256,
        format!("J=10,d=128 -> {big}; J=4,d=8 -> {small}"),
    )
}

/// The quick suite behind the `verify` command.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_gradient(10, seed, pipeline_gradient),
        check_single_class(20, seed),
        check_map_oracle(200, seed),
        check_corrector(100, seed),
        check_eigen_shift(50, seed),
        check_comm_accounting(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corrupted_gradient(
        params: &EncoderParams,
        inputs: ArrayView2<f64>,
        labels: &[usize],
        num_classes: usize,
        eps_sq: f64,
    ) -> Result<ParamGrads> {
        let mut g = pipeline_gradient(params, inputs, labels, num_classes, eps_sq)?;
        g.weights[0][[0, 0]] *= 1.01;
        Ok(g)
    }

    #[test]
    fn quick_suite_passes() {
        let outcomes = run_all(1);
        assert!(outcomes.iter().all(|o| o.passed), "{}", report(&outcomes));
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let o = check_gradient(3, 5, corrupted_gradient);
        assert!(!o.passed, "{}", o.detail);
    }

    #[test]
    fn fixtures_respect_size_limits() {
        for s in 0..30 {
            let fx = gradient_fixture(s);
            assert!(fx.params.output_dim() <= 4);
            assert!(fx.inputs.ncols() <= 16);
            assert!(fx.num_classes <= 3);
        }
    }

    #[test]
    fn report_lists_every_check() {
        let text = report(&[
            CheckOutcome::new("a", true, "x".into()),
            CheckOutcome::new("bb", false, "y".into()),
        ]);
        assert_eq!(text, "PASS  a   x\nFAIL  bb  y\n");
    }
}
