//! The federated round loop.
//!
//! Each round: the server broadcasts the global encoder and classifier;
//! on scheduled rounds the most suspicious devices relabel their data
//! (top-`k2` with their leave-one-out corrector, the next `k1 − k2` with the
//! global classifier); every participating device trains locally, then
//! re-encodes its full dataset and uploads its class statistics; the server
//! averages encoders by dataset size, combines classifiers by class count,
//! and blends covariances with the previous global classifier.
//!
//! Per-device randomness is drawn from streams derived from the experiment
//! seed, so running devices on a worker pool does not change any result.

use std::fmt::Write as _;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;

use crate::classifier::{argmax, relabel_dataset, CorrectionReport, SubspaceScorer};
use crate::config::{ExperimentConfig, Mode};
use crate::covstats::{
    aggregate_classifiers, apply_covariance_momentum, classifier_values, estimate_local_classifier,
    external_corrector, orthogonality_index, Classifier,
};
use crate::encoder::{
    aggregate_params, backward, encode, forward, init_encoder, sgd_step, EncoderParams, OptState,
};
use crate::error::{Error, Result};
use crate::fleet::{
    device_rng, epoch_order, global_noise_rate, inject_noise, partition_noniid, read_dataset,
    synthesize_dataset, DeviceDataset,
};
use crate::objective::{ce_baseline_loss, loss_and_grad, FeatureBlock};

pub const CSV_HEADER: &str = "round,mode,global_accuracy,train_accuracy,global_noise_rate,orthogonality_index,mean_loss,corrections_inspected,corrections_relabeled,corrections_correct,classifier_values,model_values";

const STREAM_TRAIN: u64 = 1;
const STREAM_PARTICIPATION: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub mode: Mode,
    pub global_accuracy: f64,
    pub train_accuracy: f64,
    pub global_noise_rate: f64,
    pub orthogonality_index: f64,
    pub mean_loss: f64,
    pub corrections: Option<CorrectionReport>,
    pub classifier_values: usize,
    pub model_values: usize,
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        let (inspected, relabeled, correct) = self
            .corrections
            .as_ref()
            .map_or((0, 0, 0), |c| (c.inspected, c.relabeled, c.relabeled_correctly));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.mode.as_str(),
            self.global_accuracy,
            self.train_accuracy,
            self.global_noise_rate,
            self.orthogonality_index,
            self.mean_loss,
            inspected,
            relabeled,
            correct,
            self.classifier_values,
            self.model_values
        )
    }
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(out, "{}", m.csv_row());
    }
    out
}

/// Transport per round and device: covariance values vs model values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommSummary {
    pub classifier_values: usize,
    pub model_values: usize,
    pub ratio: f64,
}

impl CommSummary {
    pub fn new(num_classes: usize, feature_dim: usize, model_values: usize) -> Self {
        let classifier_values = classifier_values(num_classes, feature_dim);
        Self {
            classifier_values,
            model_values,
            ratio: classifier_values as f64 / model_values as f64,
        }
    }
}

/// Everything the server and devices hold between rounds.
#[derive(Debug, Clone)]
pub struct FleetState {
    pub devices: Vec<DeviceDataset>,
    pub encoder: EncoderParams,
    /// Linear head `d → J`, only in cross-entropy mode.
    pub head: Option<EncoderParams>,
    /// Broadcast classifier (after covariance momentum).
    pub global: Option<Classifier>,
    /// Count-weighted combination of the last uploads, before momentum.
    /// Leave-one-out correctors are exact algebraic inverses of this.
    pub combined: Option<Classifier>,
    /// Last classifier each device uploaded into `combined`.
    pub uploads: Vec<Option<Classifier>>,
    pub round: usize,
    pub num_classes: usize,
}

/// Values measured before the first round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialMetrics {
    pub global_noise_rate: f64,
    pub orthogonality_index: f64,
    pub global_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ExperimentConfig,
    pub state: FleetState,
    pub test_inputs: Array2<f64>,
    pub test_labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub initial: InitialMetrics,
    pub final_encoder: EncoderParams,
    pub final_head: Option<EncoderParams>,
    pub final_classifier: Option<Classifier>,
    pub comm: CommSummary,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.global_accuracy)
    }

    pub fn last_k_mean_accuracy(&self, k: usize) -> Option<f64> {
        last_k_mean_accuracy(&self.metrics, k)
    }
}

/// Mean test accuracy over the last `k` rounds (fewer if the run is shorter).
pub fn last_k_mean_accuracy(metrics: &[RoundMetrics], k: usize) -> Option<f64> {
    if metrics.is_empty() || k == 0 {
        return None;
    }
    let tail = &metrics[metrics.len().saturating_sub(k)..];
    Some(tail.iter().map(|m| m.global_accuracy).sum::<f64>() / tail.len() as f64)
}

/// True on `T_c0, T_c0 + δ, T_c0 + 2δ, …`.
pub fn correction_due(t: usize, config: &ExperimentConfig) -> bool {
    t >= config.correction_start && (t - config.correction_start).is_multiple_of(config.correction_period)
}

/// Result of one device's local round.
struct LocalUpdate {
    device: usize,
    encoder: EncoderParams,
    head: Option<EncoderParams>,
    classifier: Option<Classifier>,
    mean_loss: f64,
}

impl Simulation {
    /// Builds data, partitions it, injects noise, initializes the encoder
    /// and, in covariance mode, the round-0 global classifier.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let j = config.data.num_classes;
        let (train_x, train_y, test_x, test_y) = match (&config.data.path, &config.data.test_path) {
            (Some(train), Some(test)) => {
                let (x, y, jt) = read_dataset(std::fs::File::open(train)?)?;
                let (tx, ty, jv) = read_dataset(std::fs::File::open(test)?)?;
                if jt != j || jv != j || x.nrows() != config.data.input_dim || tx.nrows() != x.nrows() {
                    return Err(Error::ConfigParse(format!(
                        "field `data`: ingest files disagree with num_classes={j} input_dim={}",
                        config.data.input_dim
                    )));
                }
                (x, y, tx, ty)
            }
            _ => {
                let d = &config.data;
                let (x, y) = synthesize_dataset(j, d.input_dim, d.samples_per_class, d.class_separation, seed)?;
                let (tx, ty) = synthesize_dataset(
                    j,
                    d.input_dim,
                    d.test_samples_per_class,
                    d.class_separation,
                    seed.wrapping_add(0x7e57),
                )?;
                (x, y, tx, ty)
            }
        };
        let devices = partition_noniid(train_x.view(), &train_y, &config.partition_spec(), seed.wrapping_add(1))?;
        let devices = inject_noise(&devices, &config.noise_spec(), seed.wrapping_add(2))?;
        let encoder = init_encoder(&config.layer_dims(), seed)?;
        let head = match config.mode {
            Mode::FedavgCe => Some(init_encoder(&[config.model.feature_dim, j], seed.wrapping_add(3))?),
            Mode::Fedcova => None,
        };
        let m = devices.len();
        let mut sim = Self {
            config,
            state: FleetState {
                devices,
                encoder,
                head,
                global: None,
                combined: None,
                uploads: vec![None; m],
                round: 0,
                num_classes: j,
            },
            test_inputs: test_x,
            test_labels: test_y,
        };
        if sim.config.mode == Mode::Fedcova {
            let uploads = sim
                .state
                .devices
                .iter()
                .map(|d| local_classifier(&sim.state.encoder, d, &sim.config))
                .collect::<Result<Vec<_>>>()?;
            sim.install_uploads(uploads.into_iter().enumerate().collect())?;
        }
        Ok(sim)
    }

    /// Stores uploads, recombines them and applies covariance momentum.
    fn install_uploads(&mut self, uploads: Vec<(usize, Option<Classifier>)>) -> Result<()> {
        for u in self.state.uploads.iter_mut() {
            *u = None;
        }
        for (device, c) in uploads {
            self.state.uploads[device] = c;
        }
        let present: Vec<&Classifier> = self.state.uploads.iter().flatten().collect();
        if present.is_empty() {
            return Ok(());
        }
        let combined = aggregate_classifiers(&present)?;
        let global = apply_covariance_momentum(self.state.global.as_ref(), &combined, self.config.beta_cov)?;
        self.state.combined = Some(combined);
        self.state.global = Some(global);
        Ok(())
    }

    pub fn initial_metrics(&self) -> Result<InitialMetrics> {
        let (global_accuracy, phi) = self.evaluate(self.test_inputs.view(), &self.test_labels)?;
        Ok(InitialMetrics {
            global_noise_rate: global_noise_rate(&self.state.devices),
            orthogonality_index: phi,
            global_accuracy,
        })
    }

    /// Devices ordered most-suspicious first: descending fraction of samples
    /// whose subspace prediction under the global classifier disagrees with
    /// the observed label; ties go to the lower device id.
    pub fn rank_noisy_devices(&self) -> Result<Vec<usize>> {
        let global = self
            .state
            .global
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("ranking needs a global classifier".into()))?;
        let scorer = SubspaceScorer::new(global, self.config.alpha)?;
        let rates = self
            .state
            .devices
            .iter()
            .map(|d| {
                if d.is_empty() {
                    return Ok(0.0);
                }
                let z = encode(&self.state.encoder, d.inputs.view())?;
                let pred = scorer.predict_all(z.view());
                let disagree = pred.iter().zip(&d.observed_labels).filter(|(p, o)| p != o).count();
                Ok(disagree as f64 / d.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut order: Vec<usize> = (0..rates.len()).collect();
        order.sort_by(|&a, &b| rates[b].total_cmp(&rates[a]).then(a.cmp(&b)));
        Ok(order)
    }

    /// Relabels the top-ranked devices. Positions `< k2` use their external
    /// corrector, positions in `[k2, k1)` the global classifier.
    pub fn correction_pass(&mut self) -> Result<CorrectionReport> {
        let j = self.state.num_classes;
        let mut report = CorrectionReport::empty(j);
        let (k1, k2) = (self.config.top_k1(), self.config.top_k2());
        if k1 == 0 {
            return Ok(report);
        }
        let (Some(global), Some(combined)) = (self.state.global.clone(), self.state.combined.clone()) else {
            return Ok(report);
        };
        let totals = combined.counts();
        let order = self.rank_noisy_devices()?;
        for (pos, &dev) in order.iter().enumerate().take(k1) {
            if self.state.devices[dev].is_empty() {
                continue;
            }
            let corrector = if pos < k2 {
                match &self.state.uploads[dev] {
                    Some(local) => external_corrector(&combined, local, &totals)?,
                    None => combined.clone(),
                }
            } else {
                global.clone()
            };
            let d = &self.state.devices[dev];
            let z = encode(&self.state.encoder, d.inputs.view())?;
            let (labels, r) = relabel_dataset(
                z.view(),
                &d.observed_labels,
                &corrector,
                self.config.alpha,
                self.config.eta_c,
                Some(&d.true_labels),
            )?;
            self.state.devices[dev].observed_labels = labels;
            report.merge(&r);
        }
        Ok(report)
    }

    fn participants(&self, t: usize) -> Vec<usize> {
        let m = self.state.devices.len();
        let k = ((self.config.participation * m as f64).round() as usize).clamp(1, m);
        if k == m {
            return (0..m).collect();
        }
        let mut rng = device_rng(self.config.seed, usize::MAX, (t as u64) << 8 | STREAM_PARTICIPATION);
        let mut chosen = index::sample(&mut rng, m, k).into_vec();
        chosen.sort_unstable();
        chosen
    }

    fn local_update(&self, device: usize, t: usize) -> Result<LocalUpdate> {
        let d = &self.state.devices[device];
        let cfg = &self.config;
        let mut encoder = self.state.encoder.clone();
        let mut head = self.state.head.clone();
        let opt = &cfg.optimizer;
        let mut enc_state = OptState::new(&encoder, opt.learning_rate, opt.momentum, opt.weight_decay);
        let mut head_state = head
            .as_ref()
            .map(|h| OptState::new(h, opt.learning_rate, opt.momentum, opt.weight_decay));
        let mut rng = device_rng(cfg.seed, d.device_id, (t as u64) << 8 | STREAM_TRAIN);
        let batch = cfg.batch_size.min(d.len()).max(1);
        let mut losses = Vec::new();
        for _ in 0..cfg.local_epochs {
            let order = epoch_order(d.len(), &mut rng);
            for chunk in order.chunks(batch) {
                let x = d.inputs.select(Axis(1), chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| d.observed_labels[i]).collect();
                let (z, tape) = forward(&encoder, x.view())?;
                let (loss, grad_z) = match (&mut head, &mut head_state) {
                    (Some(h), Some(hs)) => {
                        let logits = h.affine(z.view());
                        let (loss, grad_logits) = ce_baseline_loss(logits.view(), &labels)?;
                        let mut head_grads = h.zeros_like();
                        head_grads.weights[0] = grad_logits.dot(&z.t());
                        head_grads.biases[0] = grad_logits.sum_axis(Axis(1));
                        let grad_z = h.weights[0].t().dot(&grad_logits);
                        if loss.is_finite() {
                            sgd_step(h, &head_grads, hs)?;
                        }
                        (loss, grad_z)
                    }
                    _ => {
                        let block = FeatureBlock::new(z, labels, self.state.num_classes)?;
                        let (loss, grad_z) = loss_and_grad(&block, cfg.eps_sq)?;
                        (loss.total, grad_z)
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::NonFiniteGradient(format!("device {device} local loss")));
                }
                let grads = backward(&encoder, &tape, grad_z.view())?;
                sgd_step(&mut encoder, &grads, &mut enc_state)?;
                losses.push(loss);
            }
        }
        let classifier = match cfg.mode {
            Mode::Fedcova => local_classifier(&encoder, d, cfg)?,
            Mode::FedavgCe => None,
        };
        let mean_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        Ok(LocalUpdate {
            device,
            encoder,
            head,
            classifier,
            mean_loss,
        })
    }

    /// Runs one communication round and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.state.round;
        let corrections = if self.config.mode == Mode::Fedcova && correction_due(t, &self.config) {
            Some(self.correction_pass()?)
        } else {
            None
        };

        let active: Vec<usize> = self
            .participants(t)
            .into_iter()
            .filter(|&m| !self.state.devices[m].is_empty())
            .collect();
        let results: Vec<Result<LocalUpdate>> = if self.config.parallel {
            active.par_iter().map(|&m| self.local_update(m, t)).collect()
        } else {
            active.iter().map(|&m| self.local_update(m, t)).collect()
        };
        let mut updates = Vec::with_capacity(results.len());
        for (m, r) in active.iter().zip(results) {
            match r {
                Ok(u) => updates.push(u),
                Err(e @ Error::NonFiniteGradient(_)) => warn!("round {t}: skipping device {m}: {e}"),
                Err(e) => return Err(e),
            }
        }

        if !updates.is_empty() {
            let sizes: Vec<usize> = updates.iter().map(|u| self.state.devices[u.device].len()).collect();
            let encoders: Vec<&EncoderParams> = updates.iter().map(|u| &u.encoder).collect();
            self.state.encoder = aggregate_params(&encoders, &sizes)?;
            if self.state.head.is_some() {
                let heads: Vec<&EncoderParams> = updates.iter().filter_map(|u| u.head.as_ref()).collect();
                self.state.head = Some(aggregate_params(&heads, &sizes)?);
            }
            if self.config.mode == Mode::Fedcova {
                let uploads = updates.iter().map(|u| (u.device, u.classifier.clone())).collect();
                self.install_uploads(uploads)?;
            }
        }
        let mean_loss = if updates.is_empty() {
            0.0
        } else {
            updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64
        };

        let (global_accuracy, phi) = self.evaluate(self.test_inputs.view(), &self.test_labels)?;
        let train_accuracy = self.train_accuracy()?;
        self.state.round += 1;
        let comm = self.comm_summary();
        Ok(RoundMetrics {
            round: t,
            mode: self.config.mode,
            global_accuracy,
            train_accuracy,
            global_noise_rate: global_noise_rate(&self.state.devices),
            orthogonality_index: phi,
            mean_loss,
            corrections,
            classifier_values: match self.config.mode {
                Mode::Fedcova => comm.classifier_values,
                Mode::FedavgCe => 0,
            },
            model_values: comm.model_values,
        })
    }

    pub fn comm_summary(&self) -> CommSummary {
        let model_values = self.state.encoder.num_parameters()
            + self.state.head.as_ref().map_or(0, |h| h.num_parameters());
        CommSummary::new(self.state.num_classes, self.config.model.feature_dim, model_values)
    }

    /// Predicted classes for a `D × N` block under the current global model.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        let z = encode(&self.state.encoder, inputs)?;
        match (&self.state.head, &self.state.global) {
            (Some(head), _) => {
                let logits = head.affine(z.view());
                Ok(logits
                    .axis_iter(Axis(1))
                    .map(|c| argmax(c.as_slice().unwrap_or(&c.to_vec())))
                    .collect())
            }
            (None, Some(global)) => Ok(SubspaceScorer::new(global, self.config.alpha)?.predict_all(z.view())),
            (None, None) => Err(Error::InvalidSpec("no global classifier to predict with".into())),
        }
    }

    /// Test accuracy and orthogonality index of the global classifier. In
    /// cross-entropy mode the index is measured on a classifier estimated
    /// from the training features (nothing is transported).
    pub fn evaluate(&self, test_inputs: ArrayView2<f64>, test_labels: &[usize]) -> Result<(f64, f64)> {
        if test_labels.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let pred = self.predict(test_inputs)?;
        let correct = pred.iter().zip(test_labels).filter(|(p, l)| p == l).count();
        let accuracy = correct as f64 / test_labels.len() as f64;
        let phi = match &self.state.global {
            Some(g) => orthogonality_index(g)?,
            None => {
                let locals = self
                    .state
                    .devices
                    .iter()
                    .map(|d| local_classifier(&self.state.encoder, d, &self.config))
                    .collect::<Result<Vec<_>>>()?;
                let present: Vec<&Classifier> = locals.iter().flatten().collect();
                orthogonality_index(&aggregate_classifiers(&present)?)?
            }
        };
        Ok((accuracy, phi))
    }

    /// Accuracy on all devices' training inputs against the hidden true labels.
    pub fn train_accuracy(&self) -> Result<f64> {
        let mut correct = 0;
        let mut total = 0;
        for d in self.state.devices.iter().filter(|d| !d.is_empty()) {
            let pred = self.predict(d.inputs.view())?;
            correct += pred.iter().zip(&d.true_labels).filter(|(p, l)| p == l).count();
            total += d.len();
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    pub fn run(mut self) -> Result<ExperimentResult> {
        let initial = self.initial_metrics()?;
        let mut metrics = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            metrics.push(self.run_round()?);
        }
        let comm = self.comm_summary();
        Ok(ExperimentResult {
            metrics,
            initial,
            final_encoder: self.state.encoder,
            final_head: self.state.head,
            final_classifier: self.state.global,
            comm,
        })
    }
}

/// Local class statistics of a device's full dataset under `encoder`.
fn local_classifier(encoder: &EncoderParams, d: &DeviceDataset, cfg: &ExperimentConfig) -> Result<Option<Classifier>> {
    if d.is_empty() {
        return Ok(None);
    }
    let z = encode(encoder, d.inputs.view())?;
    estimate_local_classifier(z.view(), &d.observed_labels, cfg.eps_sq, cfg.data.num_classes).map(Some)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    Simulation::new(config.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny(mode: Mode, rounds: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::desk_default(11, mode, rounds, 1.0, 2.0);
        c.model.hidden_dims = vec![16];
        c.model.feature_dim = 4;
        c.data.input_dim = 6;
        c.data.num_classes = 3;
        c.data.samples_per_class = 40;
        c.data.test_samples_per_class = 40;
        c.partition.num_devices = 4;
        c.batch_size = 32;
        c.correction_start = 0;
        c.correction_period = 2;
        c
    }

    #[test]
    fn correction_schedule() {
        let mut c = tiny(Mode::Fedcova, 300);
        c.correction_start = 200;
        c.correction_period = 30;
        assert!(correction_due(200, &c));
        assert!(!correction_due(215, &c));
        assert!(correction_due(230, &c));
        assert!(!correction_due(199, &c));
        c.correction_period = 1;
        assert!((200..300).all(|t| correction_due(t, &c)));
    }

    #[test]
    fn zero_rounds_yield_no_metrics() {
        let r = run_experiment(&tiny(Mode::Fedcova, 0)).unwrap();
        assert!(r.metrics.is_empty());
        assert!(r.final_classifier.is_some());
    }

    #[test]
    fn runs_are_deterministic_across_fanout() {
        let a = run_experiment(&tiny(Mode::Fedcova, 4)).unwrap();
        let b = run_experiment(&tiny(Mode::Fedcova, 4)).unwrap();
        let mut par = tiny(Mode::Fedcova, 4);
        par.parallel = true;
        let c = run_experiment(&par).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&c.metrics));
        assert_eq!(a.metrics.len(), 4);
        assert!(a.metrics[0].corrections.is_some());
        assert!(a.metrics[1].corrections.is_none());
    }

    #[test]
    fn fedavg_mode_runs() {
        let r = run_experiment(&tiny(Mode::FedavgCe, 3)).unwrap();
        assert_eq!(r.metrics.len(), 3);
        assert!(r.final_head.is_some());
        assert!(r.metrics.iter().all(|m| m.classifier_values == 0 && m.corrections.is_none()));
        assert_eq!(r.comm.model_values, crate::encoder::num_parameters(&[6, 16, 4]) + 4 * 3 + 3);
    }

    #[test]
    fn zero_k_means_no_relabels() {
        let mut c = tiny(Mode::Fedcova, 1);
        c.top_k1 = Some(0);
        c.top_k2 = Some(0);
        c.noise.device_ratio = 0.5;
        c.noise.sample_ratio = 0.8;
        let mut sim = Simulation::new(c).unwrap();
        let before: Vec<Vec<usize>> = sim.state.devices.iter().map(|d| d.observed_labels.clone()).collect();
        let report = sim.correction_pass().unwrap();
        assert_eq!(report.relabeled, 0);
        let after: Vec<Vec<usize>> = sim.state.devices.iter().map(|d| d.observed_labels.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn ranking_is_total_and_ties_by_id() {
        let mut sim = Simulation::new(tiny(Mode::Fedcova, 1)).unwrap();
        let order = sim.rank_noisy_devices().unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..4).collect::<Vec<_>>());
        // Two identical devices must rank in id order.
        sim.state.devices[2] = DeviceDataset { device_id: 2, ..sim.state.devices[1].clone() };
        let order = sim.rank_noisy_devices().unwrap();
        let p1 = order.iter().position(|&d| d == 1).unwrap();
        let p2 = order.iter().position(|&d| d == 2).unwrap();
        assert!(p1 < p2);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = run_experiment(&tiny(Mode::Fedcova, 2)).unwrap();
        let csv = metrics_csv(&r.metrics);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("0,fedcova,"));
        assert_eq!(lines[1].split(',').count(), 12);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let sim = Simulation::new(tiny(Mode::Fedcova, 1)).unwrap();
        assert_eq!(sim.evaluate(sim.test_inputs.view(), &[]), Err(Error::EmptyTestSet));
    }
}
