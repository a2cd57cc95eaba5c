use fedcova::classifier::subspace_score;
use fedcova::config::{ExperimentConfig, Mode};
use fedcova::encoder::encode;
use fedcova::fleet::global_noise_rate;
use fedcova::orchestrator::{run_experiment, Simulation};

fn small(seed: u64, rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_default(seed, Mode::Fedcova, rounds, 1.0, 2.0);
    c.data.class_separation = 8.0;
    c.correction_start = rounds;
    c
}

#[test]
fn single_clean_device_fits_separable_data() {
    let mut c = small(3, 40);
    c.partition.num_devices = 1;
    c.data.class_separation = 6.0;
    let r = run_experiment(&c).unwrap();
    let last = r.metrics.last().unwrap();
    assert!(last.train_accuracy > 0.95, "train accuracy {}", last.train_accuracy);
}

#[test]
fn planted_noisy_device_ranks_first() {
    let c = small(5, 120);
    let mut sim = Simulation::new(c).unwrap();
    let j = sim.state.num_classes;
    let planted = 3;
    let d = &mut sim.state.devices[planted];
    d.observed_labels = d.true_labels.iter().map(|&y| (y + 1) % j).collect();
    for _ in 0..20 {
        sim.run_round().unwrap();
    }
    assert_eq!(sim.rank_noisy_devices().unwrap()[0], planted);
}

#[test]
fn correction_reduces_noise_after_warmup() {
    let mut c = small(9, 120);
    c.noise.device_ratio = 0.5;
    c.noise.sample_ratio = 0.8;
    c.top_k1 = Some(8);
    c.top_k2 = Some(8);
    let mut sim = Simulation::new(c).unwrap();
    for _ in 0..50 {
        sim.run_round().unwrap();
    }
    let before = global_noise_rate(&sim.state.devices);
    sim.correction_pass().unwrap();
    let after = global_noise_rate(&sim.state.devices);
    assert!(after < before, "noise {before} -> {after}");
}

#[test]
fn clean_fleet_corrections_are_never_right() {
    let mut c = small(4, 120);
    c.top_k1 = Some(8);
    let mut sim = Simulation::new(c).unwrap();
    for _ in 0..5 {
        sim.run_round().unwrap();
    }
    let report = sim.correction_pass().unwrap();
    let total: usize = sim.state.devices.iter().map(|d| d.len()).sum();
    assert_eq!(report.relabeled_correctly, 0);
    assert_eq!(global_noise_rate(&sim.state.devices), report.relabeled as f64 / total as f64);
}

#[test]
fn evaluate_matches_naive_scoring_loop() {
    let mut sim = Simulation::new(small(8, 120)).unwrap();
    for _ in 0..3 {
        sim.run_round().unwrap();
    }
    let (acc, _) = sim.evaluate(sim.test_inputs.view(), &sim.test_labels).unwrap();
    let z = encode(&sim.state.encoder, sim.test_inputs.view()).unwrap();
    let global = sim.state.global.as_ref().unwrap();
    let mut correct = 0;
    for (i, &y) in sim.test_labels.iter().enumerate() {
        if subspace_score(z.column(i), global, sim.config.alpha).unwrap().predicted == y {
            correct += 1;
        }
    }
    assert_eq!(acc, correct as f64 / sim.test_labels.len() as f64);
}

#[test]
fn indistinguishable_classes_score_near_chance() {
    let mut c = small(2, 120);
    c.data.class_separation = 0.0;
    c.data.test_samples_per_class = 500;
    let sim = Simulation::new(c).unwrap();
    let (acc, _) = sim.evaluate(sim.test_inputs.view(), &sim.test_labels).unwrap();
    // 2000 test samples: one standard error of a 1/4 rate is about 0.01.
    assert!((acc - 0.25).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn baseline_is_not_handicapped_on_clean_data() {
    let mut c = small(7, 60);
    c.correction_start = 5;
    c.correction_period = 5;
    let cova = run_experiment(&c).unwrap().final_accuracy().unwrap();
    c.mode = Mode::FedavgCe;
    let base = run_experiment(&c).unwrap().final_accuracy().unwrap();
    assert!((cova - base).abs() <= 0.05, "fedcova {cova} vs baseline {base}");
}

#[test]
fn partial_participation_is_deterministic() {
    let mut c = small(6, 6);
    c.participation = 0.5;
    let a = run_experiment(&c).unwrap();
    let b = run_experiment(&c).unwrap();
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn communication_summary_matches_configuration() {
    let c = small(1, 2);
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.comm.classifier_values, 4 * 8 * 8);
    assert_eq!(r.comm.model_values, c.encoder_parameters());
    assert!(r.metrics.iter().all(|m| m.classifier_values == 256 && m.model_values == c.encoder_parameters()));
}
