//! Synthetic data, non-i.i.d. partitioning, and bi-level label noise.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub device_id: usize,
    /// `D × D_m`, one sample per column.
    pub inputs: Array2<f64>,
    pub observed_labels: Vec<usize>,
    /// Hidden ground truth, used for metrics only.
    pub true_labels: Vec<usize>,
    /// Column indices into the dataset this device was carved from.
    pub source_indices: Vec<usize>,
    pub noise_rate_assigned: f64,
}

impl DeviceDataset {
    pub fn len(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_labels.is_empty()
    }

    pub fn noisy_count(&self) -> usize {
        self.observed_labels
            .iter()
            .zip(&self.true_labels)
            .filter(|(o, t)| o != t)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePattern {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub device_ratio: f64,
    pub sample_ratio: f64,
    pub pattern: NoisePattern,
    /// Asymmetric target per true class.
    pub flip_map: Vec<usize>,
}

impl NoiseSpec {
    /// Asymmetric noise defaults to the cyclic map `j → (j+1) mod J`.
    pub fn new(device_ratio: f64, sample_ratio: f64, pattern: NoisePattern, num_classes: usize) -> Self {
        Self {
            device_ratio,
            sample_ratio,
            pattern,
            flip_map: cyclic_flip_map(num_classes),
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.device_ratio) || !(0.0..=1.0).contains(&self.sample_ratio) {
            return Err(Error::InvalidSpec(format!(
                "noise ratios must lie in [0, 1], got rho={} tau={}",
                self.device_ratio, self.sample_ratio
            )));
        }
        if self.pattern == NoisePattern::Asymmetric {
            if self.flip_map.len() != num_classes {
                return Err(Error::InvalidSpec(format!(
                    "flip map has {} entries for {num_classes} classes",
                    self.flip_map.len()
                )));
            }
            if let Some((j, _)) = self
                .flip_map
                .iter()
                .enumerate()
                .find(|&(j, &t)| t == j || t >= num_classes)
            {
                return Err(Error::InvalidSpec(format!("flip map entry {j} is a fixed point or out of range")));
            }
        }
        Ok(())
    }

    /// Interval the per-device noise rate is drawn from.
    pub fn rate_interval(&self) -> (f64, f64) {
        let tau = self.sample_ratio;
        if tau <= 0.5 {
            (0.0, 2.0 * tau)
        } else {
            (2.0 * tau - 1.0, 1.0)
        }
    }
}

pub fn cyclic_flip_map(num_classes: usize) -> Vec<usize> {
    (0..num_classes).map(|j| (j + 1) % num_classes).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub bernoulli_p: f64,
    pub dirichlet_alpha: f64,
    pub num_devices: usize,
}

impl PartitionSpec {
    fn validate(&self) -> Result<()> {
        if !(self.bernoulli_p > 0.0 && self.bernoulli_p <= 1.0) {
            return Err(Error::InvalidSpec(format!("bernoulli_p must be in (0, 1], got {}", self.bernoulli_p)));
        }
        if !(self.dirichlet_alpha > 0.0) || !self.dirichlet_alpha.is_finite() {
            return Err(Error::InvalidSpec(format!("dirichlet_alpha must be positive, got {}", self.dirichlet_alpha)));
        }
        if self.num_devices == 0 {
            return Err(Error::InvalidSpec("num_devices must be positive".into()));
        }
        Ok(())
    }
}

/// Per-device RNG stream derived from the experiment seed.
pub fn device_rng(seed: u64, device_id: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ device_id as u64);
    rng.set_stream(stream);
    rng
}

/// Unit class directions: orthogonal axes when `D ≥ J`, `±e_i` when
/// `J ≤ 2D`, otherwise evenly spaced on the circle in the first two axes.
pub fn class_means(num_classes: usize, input_dim: usize) -> Array2<f64> {
    let mut means = Array2::<f64>::zeros((input_dim, num_classes));
    for j in 0..num_classes {
        if num_classes <= input_dim {
            means[[j, j]] = 1.0;
        } else if num_classes <= 2 * input_dim {
            if j < input_dim {
                means[[j, j]] = 1.0;
            } else {
                means[[j - input_dim, j]] = -1.0;
            }
        } else {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / num_classes as f64;
            means[[0, j]] = angle.cos();
            means[[1, j]] = angle.sin();
        }
    }
    means
}

/// `n` samples per class from `N(separation·μ_j, I)`, class-major order.
pub fn synthesize_dataset(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if num_classes < 2 || input_dim < 2 || samples_per_class == 0 {
        return Err(Error::InvalidSpec(format!(
            "need J >= 2, D >= 2, n >= 1; got J={num_classes} D={input_dim} n={samples_per_class}"
        )));
    }
    if !class_separation.is_finite() || class_separation < 0.0 {
        return Err(Error::InvalidSpec(format!("bad class separation {class_separation}")));
    }
    let means = class_means(num_classes, input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = num_classes * samples_per_class;
    let mut inputs = Array2::<f64>::zeros((input_dim, total));
    let mut labels = Vec::with_capacity(total);
    for j in 0..num_classes {
        for s in 0..samples_per_class {
            let col = j * samples_per_class + s;
            for r in 0..input_dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs[[r, col]] = class_separation * means[[r, j]] + noise;
            }
            labels.push(j);
        }
    }
    Ok((inputs, labels))
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, len: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

/// Bernoulli class-presence × Dirichlet size allocation across devices.
///
/// `Ψ[m][j] ~ Bernoulli(p)` decides whether device `m` holds class `j`
/// (all-zero columns are redrawn); each class's samples are then assigned
/// to its holders independently with probabilities `q_j ~ Dir(α·1)`.
pub fn partition_noniid(
    inputs: ArrayView2<f64>,
    labels: &[usize],
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<DeviceDataset>> {
    spec.validate()?;
    if inputs.ncols() != labels.len() {
        return Err(Error::InvalidSpec(format!(
            "{} input columns but {} labels",
            inputs.ncols(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let m = spec.num_devices;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); m];
    for members in &by_class {
        let holders: Vec<usize> = loop {
            let column: Vec<usize> = (0..m).filter(|_| rng.random_bool(spec.bernoulli_p)).collect();
            if !column.is_empty() {
                break column;
            }
        };
        let q = sample_dirichlet(&mut rng, spec.dirichlet_alpha, holders.len())?;
        let pick = WeightedIndex::new(&q).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        for &i in members {
            assigned[holders[pick.sample(&mut rng)]].push(i);
        }
    }

    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(device_id, mut idx)| {
            idx.sort_unstable();
            let labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            DeviceDataset {
                device_id,
                inputs: inputs.select(Axis(1), &idx),
                observed_labels: labels.clone(),
                true_labels: labels,
                source_indices: idx,
                noise_rate_assigned: 0.0,
            }
        })
        .collect())
}

/// Round-half-away-from-zero count, as used for noisy devices and flips.
pub fn rounded_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Corrupts observed labels on `round(ρ·M)` uniformly chosen devices. Each
/// noisy device draws its rate `r` from [`NoiseSpec::rate_interval`] and
/// flips exactly `round(r·D_m)` uniformly chosen samples.
pub fn inject_noise(devices: &[DeviceDataset], spec: &NoiseSpec, seed: u64) -> Result<Vec<DeviceDataset>> {
    let num_classes = devices
        .iter()
        .flat_map(|d| d.true_labels.iter())
        .max()
        .map_or(0, |&m| m + 1)
        .max(spec.flip_map.len());
    spec.validate(num_classes)?;
    if spec.pattern == NoisePattern::Symmetric && num_classes < 2 && spec.device_ratio > 0.0 {
        return Err(Error::InvalidSpec("symmetric noise needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy_n = rounded_count(spec.device_ratio, devices.len());
    let mut noisy = vec![false; devices.len()];
    for i in index::sample(&mut rng, devices.len(), noisy_n) {
        noisy[i] = true;
    }
    let (lo, hi) = spec.rate_interval();

    let mut out = Vec::with_capacity(devices.len());
    for (dev, &is_noisy) in devices.iter().zip(&noisy) {
        let mut d = dev.clone();
        d.observed_labels = d.true_labels.clone();
        d.noise_rate_assigned = 0.0;
        if is_noisy {
            let mut drng = device_rng(seed, d.device_id, 0x6e6f697365);
            let r = if hi > lo { drng.random_range(lo..=hi) } else { lo };
            d.noise_rate_assigned = r;
            let flips = rounded_count(r, d.len());
            for i in index::sample(&mut drng, d.len(), flips) {
                let t = d.true_labels[i];
                d.observed_labels[i] = match spec.pattern {
                    NoisePattern::Asymmetric => spec.flip_map[t],
                    NoisePattern::Symmetric => {
                        let k = drng.random_range(0..num_classes - 1);
                        if k >= t { k + 1 } else { k }
                    }
                };
            }
        }
        out.push(d);
    }
    Ok(out)
}

/// Fraction of all samples whose observed label differs from the truth.
pub fn global_noise_rate(devices: &[DeviceDataset]) -> f64 {
    let total: usize = devices.iter().map(|d| d.len()).sum();
    if total == 0 {
        return 0.0;
    }
    devices.iter().map(|d| d.noisy_count()).sum::<usize>() as f64 / total as f64
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Writes the ingest format: `u64` header `(D, J, N)` then `N` records of
/// `D` `f64` values and one `u64` label, little-endian.
pub fn write_dataset<W: Write>(mut w: W, inputs: ArrayView2<f64>, labels: &[usize], num_classes: usize) -> Result<()> {
    if inputs.ncols() != labels.len() {
        return Err(Error::ShapeMismatch("inputs and labels disagree".into()));
    }
    for v in [inputs.nrows(), num_classes, labels.len()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for (col, &label) in inputs.axis_iter(Axis(1)).zip(labels) {
        for v in col {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(label as u64).to_le_bytes())?;
    }
    Ok(())
}

/// Reads the ingest format; returns `(inputs, labels, J)`.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(Array2<f64>, Vec<usize>, usize)> {
    let mut buf = [0u8; 8];
    let mut header = [0usize; 3];
    for h in &mut header {
        r.read_exact(&mut buf)?;
        *h = u64::from_le_bytes(buf) as usize;
    }
    let [dim, num_classes, n] = header;
    if dim == 0 || num_classes == 0 || dim > 1 << 20 || n > 1 << 32 {
        return Err(Error::InvalidSpec(format!("bad dataset header D={dim} J={num_classes} N={n}")));
    }
    let mut inputs = Array2::<f64>::zeros((dim, n));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        for k in 0..dim {
            r.read_exact(&mut buf)?;
            inputs[[k, i]] = f64::from_le_bytes(buf);
        }
        r.read_exact(&mut buf)?;
        let label = u64::from_le_bytes(buf) as usize;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        labels.push(label);
    }
    Ok((inputs, labels, num_classes))
}

/// Accuracy of the nearest class-centroid rule fit on one set and scored on
/// another.
pub fn nearest_centroid_accuracy(
    train: (ArrayView2<f64>, &[usize]),
    test: (ArrayView2<f64>, &[usize]),
    num_classes: usize,
) -> f64 {
    let dim = train.0.nrows();
    let mut centroids = Array2::<f64>::zeros((dim, num_classes));
    let mut counts = vec![0usize; num_classes];
    for (col, &l) in train.0.axis_iter(Axis(1)).zip(train.1) {
        let mut c = centroids.column_mut(l);
        c += &col;
        counts[l] += 1;
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            let mut c = centroids.column_mut(j);
            c /= n as f64;
        }
    }
    let correct = test
        .0
        .axis_iter(Axis(1))
        .zip(test.1)
        .filter(|(x, &l)| {
            let dists: Array1<f64> = centroids
                .axis_iter(Axis(1))
                .map(|c| (&c - x).mapv(|v| v * v).sum())
                .collect();
            let best = (0..num_classes)
                .filter(|&j| counts[j] > 0)
                .min_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                .unwrap_or(0);
            best == l
        })
        .count();
    correct as f64 / test.1.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_fleet(seed: u64, m: usize) -> Vec<DeviceDataset> {
        let (x, y) = synthesize_dataset(4, 5, 60, 3.0, seed).unwrap();
        let spec = PartitionSpec { bernoulli_p: 0.5, dirichlet_alpha: 5.0, num_devices: m };
        partition_noniid(x.view(), &y, &spec, seed + 1).unwrap()
    }

    #[test]
    fn synthesize_is_deterministic() {
        let a = synthesize_dataset(3, 4, 10, 2.0, 5).unwrap();
        let b = synthesize_dataset(3, 4, 10, 2.0, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.dim(), (4, 30));
        assert!(synthesize_dataset(1, 4, 10, 2.0, 5).is_err());
        assert!(synthesize_dataset(3, 1, 10, 2.0, 5).is_err());
        assert!(synthesize_dataset(3, 4, 0, 2.0, 5).is_err());
    }

    #[test]
    fn class_means_are_spread() {
        for (j, d) in [(3, 5), (4, 4), (6, 4), (5, 2)] {
            let m = class_means(j, d);
            for a in 0..j {
                assert!((m.column(a).dot(&m.column(a)) - 1.0).abs() < 1e-12);
                if j <= d {
                    for b in (a + 1)..j {
                        assert!(m.column(a).dot(&m.column(b)) <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn separable_data_is_separable() {
        let (x, y) = synthesize_dataset(2, 2, 500, 6.0, 1).unwrap();
        let (tx, ty) = synthesize_dataset(2, 2, 500, 6.0, 2).unwrap();
        assert!(nearest_centroid_accuracy((x.view(), &y), (tx.view(), &ty), 2) > 0.99);
    }

    #[test]
    fn inseparable_data_is_chance() {
        let (x, y) = synthesize_dataset(4, 6, 500, 0.0, 1).unwrap();
        let (tx, ty) = synthesize_dataset(4, 6, 500, 0.0, 2).unwrap();
        let acc = nearest_centroid_accuracy((x.view(), &y), (tx.view(), &ty), 4);
        assert!((acc - 0.25).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn partition_is_a_set_partition() {
        let devices = small_fleet(3, 7);
        let mut all: Vec<usize> = devices.iter().flat_map(|d| d.source_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..240).collect::<Vec<_>>());
        let (x, y) = synthesize_dataset(4, 5, 60, 3.0, 3).unwrap();
        for d in &devices {
            for (k, &i) in d.source_indices.iter().enumerate() {
                assert_eq!(d.inputs.column(k), x.column(i));
                assert_eq!(d.true_labels[k], y[i]);
            }
        }
    }

    #[test]
    fn partition_single_device_holds_all() {
        let (x, y) = synthesize_dataset(3, 3, 20, 1.0, 0).unwrap();
        let spec = PartitionSpec { bernoulli_p: 0.3, dirichlet_alpha: 1.0, num_devices: 1 };
        let d = partition_noniid(x.view(), &y, &spec, 9).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].len(), 60);
    }

    #[test]
    fn partition_rejects_bad_spec() {
        let (x, y) = synthesize_dataset(3, 3, 5, 1.0, 0).unwrap();
        for spec in [
            PartitionSpec { bernoulli_p: 0.0, dirichlet_alpha: 1.0, num_devices: 2 },
            PartitionSpec { bernoulli_p: 0.5, dirichlet_alpha: 0.0, num_devices: 2 },
            PartitionSpec { bernoulli_p: 0.5, dirichlet_alpha: 1.0, num_devices: 0 },
        ] {
            assert!(matches!(partition_noniid(x.view(), &y, &spec, 0), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn no_noise_when_rho_zero() {
        let devices = small_fleet(4, 5);
        let spec = NoiseSpec::new(0.0, 0.7, NoisePattern::Symmetric, 4);
        let noisy = inject_noise(&devices, &spec, 1).unwrap();
        assert_eq!(global_noise_rate(&noisy), 0.0);
    }

    #[test]
    fn full_noise_flips_everything() {
        let devices = small_fleet(4, 5);
        let spec = NoiseSpec::new(1.0, 1.0, NoisePattern::Symmetric, 4);
        let noisy = inject_noise(&devices, &spec, 1).unwrap();
        assert_eq!(global_noise_rate(&noisy), 1.0);
    }

    #[test]
    fn flip_counts_and_patterns() {
        let devices = small_fleet(8, 6);
        for pattern in [NoisePattern::Symmetric, NoisePattern::Asymmetric] {
            let spec = NoiseSpec::new(0.5, 0.3, pattern, 4);
            let noisy = inject_noise(&devices, &spec, 2).unwrap();
            assert!(noisy.iter().filter(|d| d.noise_rate_assigned > 0.0).count() <= 3);
            for (before, after) in devices.iter().zip(&noisy) {
                assert_eq!(before.inputs, after.inputs);
                assert_eq!(before.true_labels, after.true_labels);
                assert_eq!(after.noisy_count(), rounded_count(after.noise_rate_assigned, after.len()));
                assert!(after.noise_rate_assigned <= 0.6);
                for (o, t) in after.observed_labels.iter().zip(&after.true_labels) {
                    if o != t && pattern == NoisePattern::Asymmetric {
                        assert_eq!(*o, (t + 1) % 4);
                    }
                }
            }
        }
    }

    #[test]
    fn asymmetric_map_must_not_have_fixed_points() {
        let devices = small_fleet(1, 2);
        let mut spec = NoiseSpec::new(0.5, 0.5, NoisePattern::Asymmetric, 4);
        spec.flip_map = vec![1, 1, 3, 0];
        assert!(matches!(inject_noise(&devices, &spec, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn rate_interval_matches_tau() {
        let s = |tau| NoiseSpec::new(1.0, tau, NoisePattern::Symmetric, 2).rate_interval();
        assert_eq!(s(0.3), (0.0, 0.6));
        assert_eq!(s(0.5), (0.0, 1.0));
        let (lo, hi) = s(0.7);
        assert!((lo - 0.4).abs() < 1e-12 && hi == 1.0);
        assert_eq!(s(1.0), (1.0, 1.0));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(rounded_count(0.5, 5), 3);
        assert_eq!(rounded_count(0.25, 2), 1);
        assert_eq!(rounded_count(0.6, 20), 12);
    }

    #[test]
    fn dataset_ingest_round_trip() {
        let (x, y) = synthesize_dataset(3, 4, 5, 1.0, 0).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, x.view(), &y, 3).unwrap();
        assert_eq!(bytes.len(), 8 * (3 + 15 * 5));
        let (x2, y2, j) = read_dataset(bytes.as_slice()).unwrap();
        assert_eq!((x2, y2, j), (x, y, 3));
    }
}
