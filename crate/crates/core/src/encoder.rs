//! Feed-forward feature encoder with unit-normalized outputs, hand-written
//! backpropagation, and SGD with momentum.
//!
//! Weights are stored `out × in` so that a layer maps a `in × B` block of
//! columns to `out × B` as `W X + b`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Columns whose pre-normalization norm falls below this are replaced by `e1`.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub seed: u64,
}

/// Parameter-shaped gradients (also used for momentum buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct OptState {
    pub momentum_buffers: ParamGrads,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub inputs: Array2<f64>,
    /// Affine outputs of every layer, before any activation.
    pub pre_activations: Vec<Array2<f64>>,
    /// Post-activation outputs of every layer (the last one is affine only).
    pub activations: Vec<Array2<f64>>,
    /// Column norms of the last layer's output before normalization.
    pub norms: Vec<f64>,
    /// Columns replaced by `e1` because their norm was below [`DEGENERATE_NORM`].
    pub degenerate: Vec<bool>,
    pub outputs: Array2<f64>,
}

impl EncoderParams {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("layer_dims is non-empty")
    }

    pub fn num_parameters(&self) -> usize {
        num_parameters(&self.layer_dims)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Affine map of the first layer only, without activation or
    /// normalization. Used when a single-layer parameter set acts as a
    /// linear classification head.
    pub fn affine(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        self.weights[0].dot(&inputs) + self.biases[0].view().insert_axis(Axis(1))
    }

    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    fn same_architecture(&self, other: &EncoderParams) -> bool {
        self.layer_dims == other.layer_dims
    }

    /// Writes the parameter snapshot: `u64` layer count, the `u64` layer
    /// dims, then every weight matrix (row-major) followed by its bias, all
    /// little-endian `f64`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.layer_dims.len() as u64).to_le_bytes())?;
        for &d in &self.layer_dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for (weight, bias) in self.weights.iter().zip(&self.biases) {
            for v in weight.iter().chain(bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        };
        let n = next_u64(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::InvalidArchitecture(format!(
                "snapshot declares {n} layer dims"
            )));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            dims.push(next_u64(&mut r)? as usize);
        }
        validate_dims(&dims)?;
        let next_f64 = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut wv = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                wv.push(next_f64(&mut r)?);
            }
            let mut bv = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                bv.push(next_f64(&mut r)?);
            }
            weights.push(
                Array2::from_shape_vec((fan_out, fan_in), wv)
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
            );
            biases.push(Array1::from(bv));
        }
        Ok(Self {
            layer_dims: dims,
            weights,
            biases,
            seed: 0,
        })
    }
}

impl ParamGrads {
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub fn num_parameters(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidArchitecture(format!(
            "layer dims must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

/// Uniform fan-in/fan-out initialization, zero biases.
pub fn init_encoder(layer_dims: &[usize], seed: u64) -> Result<EncoderParams> {
    validate_dims(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
            rng.random_range(-bound..bound)
        }));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(EncoderParams {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
        seed,
    })
}

/// Encodes a `D × B` block into unit-norm `d × B` features.
pub fn forward(params: &EncoderParams, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTape)> {
    if inputs.nrows() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} input rows, got {}",
            params.input_dim(),
            inputs.nrows()
        )));
    }
    if inputs.ncols() == 0 {
        return Err(Error::ShapeMismatch("input block has no columns".into()));
    }
    let last = params.num_layers() - 1;
    let mut pre_activations = Vec::with_capacity(params.num_layers());
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(params.num_layers());
    for (k, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let x = if k == 0 { inputs } else { activations[k - 1].view() };
        let pre = w.dot(&x) + b.view().insert_axis(Axis(1));
        let act = if k == last { pre.clone() } else { pre.mapv(|v| v.max(0.0)) };
        pre_activations.push(pre);
        activations.push(act);
    }
    let raw = &activations[last];
    let b = raw.ncols();
    let mut outputs = Array2::<f64>::zeros(raw.raw_dim());
    let mut norms = Vec::with_capacity(b);
    let mut degenerate = Vec::with_capacity(b);
    for (i, col) in raw.axis_iter(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        norms.push(norm);
        if norm < DEGENERATE_NORM || !norm.is_finite() {
            degenerate.push(true);
            outputs[[0, i]] = 1.0;
        } else {
            degenerate.push(false);
            outputs.column_mut(i).assign(&(&col / norm));
        }
    }
    let tape = ForwardTape {
        inputs: inputs.to_owned(),
        pre_activations,
        activations,
        norms,
        degenerate,
        outputs: outputs.clone(),
    };
    Ok((outputs, tape))
}

/// Forward pass without keeping the tape.
pub fn encode(params: &EncoderParams, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    forward(params, inputs).map(|(z, _)| z)
}

/// Projects each column of `grad_z` onto the tangent space of the unit
/// sphere at the matching output column and divides by the column's
/// pre-normalization norm: `(I − z zᵀ) g / ‖v‖`. Degenerate columns get zero.
pub fn normalization_backward(tape: &ForwardTape, grad_z: ArrayView2<f64>) -> Array2<f64> {
    let mut grad_v = Array2::<f64>::zeros(grad_z.raw_dim());
    for i in 0..grad_z.ncols() {
        if tape.degenerate[i] {
            continue;
        }
        let z = tape.outputs.column(i);
        let g = grad_z.column(i);
        let radial = z.dot(&g);
        let inv_norm = 1.0 / tape.norms[i];
        Zip::from(grad_v.column_mut(i))
            .and(&g)
            .and(&z)
            .for_each(|out, &gk, &zk| *out = (gk - radial * zk) * inv_norm);
    }
    grad_v
}

/// Gradients of a scalar loss with respect to every parameter, given
/// `grad_z = ∂L/∂Z` for the normalized outputs.
pub fn backward(
    params: &EncoderParams,
    tape: &ForwardTape,
    grad_z: ArrayView2<f64>,
) -> Result<ParamGrads> {
    if tape.activations.len() != params.num_layers() {
        return Err(Error::TapeMismatch(format!(
            "tape has {} layers, params have {}",
            tape.activations.len(),
            params.num_layers()
        )));
    }
    for (k, act) in tape.activations.iter().enumerate() {
        if act.nrows() != params.layer_dims[k + 1] {
            return Err(Error::TapeMismatch(format!(
                "layer {k} output rows {} != {}",
                act.nrows(),
                params.layer_dims[k + 1]
            )));
        }
    }
    if grad_z.dim() != tape.outputs.dim() {
        return Err(Error::TapeMismatch(format!(
            "grad shape {:?} != output shape {:?}",
            grad_z.dim(),
            tape.outputs.dim()
        )));
    }
    let n = params.num_layers();
    let mut weights = vec![Array2::zeros((0, 0)); n];
    let mut biases = vec![Array1::zeros(0); n];
    let mut delta = normalization_backward(tape, grad_z);
    for k in (0..n).rev() {
        if k != n - 1 {
            Zip::from(&mut delta)
                .and(&tape.pre_activations[k])
                .for_each(|g, &pre| {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                });
        }
        let x = if k == 0 { tape.inputs.view() } else { tape.activations[k - 1].view() };
        weights[k] = delta.dot(&x.t());
        biases[k] = delta.sum_axis(Axis(1));
        if k > 0 {
            delta = params.weights[k].t().dot(&delta);
        }
    }
    Ok(ParamGrads { weights, biases })
}

impl OptState {
    pub fn new(params: &EncoderParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum_buffers: params.zeros_like(),
            learning_rate,
            momentum,
            weight_decay,
        }
    }
}

/// One SGD-with-momentum step, in place:
/// `buf ← μ·buf + g + λ·w`, `w ← w − η·buf`.
pub fn sgd_step(params: &mut EncoderParams, grads: &ParamGrads, state: &mut OptState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("encoder parameters".into()));
    }
    let shapes_match = grads.weights.len() == params.weights.len()
        && grads.biases.len() == params.biases.len()
        && state.momentum_buffers.weights.len() == params.weights.len()
        && params
            .weights
            .iter()
            .zip(&grads.weights)
            .zip(&state.momentum_buffers.weights)
            .all(|((p, g), m)| p.dim() == g.dim() && p.dim() == m.dim())
        && params
            .biases
            .iter()
            .zip(&grads.biases)
            .zip(&state.momentum_buffers.biases)
            .all(|((p, g), m)| p.dim() == g.dim() && p.dim() == m.dim());
    if !shapes_match {
        return Err(Error::ShapeMismatch("gradient/buffer shapes differ from parameters".into()));
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, g), m) in params
        .weights
        .iter_mut()
        .zip(&grads.weights)
        .zip(state.momentum_buffers.weights.iter_mut())
    {
        Zip::from(p).and(g).and(m).for_each(|p, &g, m| {
            *m = mu * *m + g + wd * *p;
            *p -= lr * *m;
        });
    }
    for ((p, g), m) in params
        .biases
        .iter_mut()
        .zip(&grads.biases)
        .zip(state.momentum_buffers.biases.iter_mut())
    {
        Zip::from(p).and(g).and(m).for_each(|p, &g, m| {
            *m = mu * *m + g + wd * *p;
            *p -= lr * *m;
        });
    }
    Ok(())
}

/// Size-weighted average of parameter sets sharing one architecture.
pub fn aggregate_params(param_list: &[&EncoderParams], sizes: &[usize]) -> Result<EncoderParams> {
    let first = param_list
        .first()
        .ok_or_else(|| Error::ArchitectureMismatch("no parameter sets to aggregate".into()))?;
    if param_list.len() != sizes.len() {
        return Err(Error::ArchitectureMismatch(format!(
            "{} parameter sets but {} sizes",
            param_list.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::ArchitectureMismatch("aggregation sizes must be positive".into()));
    }
    if let Some(bad) = param_list.iter().find(|p| !first.same_architecture(p)) {
        return Err(Error::ArchitectureMismatch(format!(
            "{:?} vs {:?}",
            first.layer_dims, bad.layer_dims
        )));
    }
    let total: usize = sizes.iter().sum();
    let mut out = EncoderParams {
        layer_dims: first.layer_dims.clone(),
        weights: first.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
        biases: first.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        seed: first.seed,
    };
    for (p, &size) in param_list.iter().zip(sizes) {
        let weight = size as f64 / total as f64;
        for (acc, w) in out.weights.iter_mut().zip(&p.weights) {
            acc.scaled_add(weight, w);
        }
        for (acc, b) in out.biases.iter_mut().zip(&p.biases) {
            acc.scaled_add(weight, b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_block(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_encoder(&[4, 8, 2], 1).unwrap();
        let b = init_encoder(&[4, 8, 2], 1).unwrap();
        let c = init_encoder(&[4, 8, 2], 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let bound = (6.0 / 12.0_f64).sqrt();
        assert!(a.weights[0].iter().all(|v| v.abs() <= bound));
        assert_eq!(a.weights[0].dim(), (8, 4));
        assert_eq!(a.num_parameters(), 4 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_encoder(&[10, 0, 2], 3), Err(Error::InvalidArchitecture(_))));
        assert!(matches!(init_encoder(&[10], 3), Err(Error::InvalidArchitecture(_))));
        assert!(matches!(init_encoder(&[], 3), Err(Error::InvalidArchitecture(_))));
    }

    #[test]
    fn forward_normalizes_three_four_five() {
        let mut p = init_encoder(&[2, 2], 0).unwrap();
        p.weights[0] = Array2::eye(2);
        let (z, tape) = forward(&p, array![[3.0], [4.0]].view()).unwrap();
        assert_abs_diff_eq!(z[[0, 0]], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(z[[1, 0]], 0.8, epsilon = 1e-15);
        assert_eq!(tape.norms, vec![5.0]);
    }

    #[test]
    fn forward_zero_final_layer_is_degenerate() {
        let mut p = init_encoder(&[3, 5, 2], 4).unwrap();
        p.weights[1].fill(0.0);
        let (z, tape) = forward(&p, random_block(3, 6, 1).view()).unwrap();
        assert!(tape.degenerate.iter().all(|&d| d));
        for col in z.axis_iter(Axis(1)) {
            assert_eq!(col.to_vec(), vec![1.0, 0.0]);
        }
        let grads = backward(&p, &tape, random_block(2, 6, 2).view()).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn forward_outputs_unit_columns_and_is_deterministic() {
        let p = init_encoder(&[5, 7, 3], 9).unwrap();
        let x = random_block(5, 11, 3);
        let (z1, tape) = forward(&p, x.view()).unwrap();
        let (z2, _) = forward(&p, x.view()).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(tape.pre_activations.len(), 2);
        for col in z1.axis_iter(Axis(1)) {
            assert_abs_diff_eq!(col.dot(&col), 1.0, epsilon = 1e-12);
        }
        assert!(matches!(forward(&p, random_block(4, 2, 0).view()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backward_zero_and_radial_gradients_vanish() {
        let p = init_encoder(&[3, 5, 2], 7).unwrap();
        let (z, tape) = forward(&p, random_block(3, 4, 8).view()).unwrap();
        let zero = backward(&p, &tape, Array2::zeros((2, 4)).view()).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let scales = array![0.5, -2.0, 3.0, 1.0];
        let radial = &z * &scales.insert_axis(Axis(0));
        let g = backward(&p, &tape, radial.view()).unwrap();
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn normalization_gradient_is_tangent() {
        let p = init_encoder(&[4, 6, 3], 1).unwrap();
        let (z, tape) = forward(&p, random_block(4, 9, 5).view()).unwrap();
        let g = random_block(3, 9, 6);
        let proj = normalization_backward(&tape, g.view());
        for i in 0..9 {
            assert!(z.column(i).dot(&proj.column(i)).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_detects_tape_mismatch() {
        let p = init_encoder(&[3, 5, 2], 7).unwrap();
        let (_, tape) = forward(&p, random_block(3, 4, 8).view()).unwrap();
        assert!(matches!(
            backward(&p, &tape, Array2::zeros((2, 3)).view()),
            Err(Error::TapeMismatch(_))
        ));
        let other = init_encoder(&[3, 2], 7).unwrap();
        assert!(matches!(
            backward(&other, &tape, Array2::zeros((2, 4)).view()),
            Err(Error::TapeMismatch(_))
        ));
    }

    /// Probe loss `Σ c ⊙ Z` with fixed random coefficients.
    fn probe_loss(p: &EncoderParams, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
        (encode(p, x.view()).unwrap() * c).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = init_encoder(&[3, 5, 2], 21).unwrap();
        let x = random_block(3, 4, 22);
        let c = random_block(2, 4, 23);
        let (_, tape) = forward(&p, x.view()).unwrap();
        let grads = backward(&p, &tape, c.view()).unwrap();
        let h = 1e-6;
        for k in 0..p.num_layers() {
            for idx in 0..p.weights[k].len() {
                let (r, col) = (idx / p.weights[k].ncols(), idx % p.weights[k].ncols());
                let mut plus = p.clone();
                plus.weights[k][[r, col]] += h;
                let mut minus = p.clone();
                minus.weights[k][[r, col]] -= h;
                let fd = (probe_loss(&plus, &x, &c) - probe_loss(&minus, &x, &c)) / (2.0 * h);
                let an = grads.weights[k][[r, col]];
                assert!((an - fd).abs() / (fd.abs() + 1e-8) < 1e-5 || (an - fd).abs() < 1e-9,
                    "w{k}[{r},{col}]: analytic {an} vs fd {fd}");
            }
            for r in 0..p.biases[k].len() {
                let mut plus = p.clone();
                plus.biases[k][r] += h;
                let mut minus = p.clone();
                minus.biases[k][r] -= h;
                let fd = (probe_loss(&plus, &x, &c) - probe_loss(&minus, &x, &c)) / (2.0 * h);
                let an = grads.biases[k][r];
                assert!((an - fd).abs() / (fd.abs() + 1e-8) < 1e-5 || (an - fd).abs() < 1e-9,
                    "b{k}[{r}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = init_encoder(&[2, 2], 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.weights[0] = array![[1.0, -2.0], [0.5, 0.0]];
        g.biases[0] = array![3.0, -1.0];
        let mut st = OptState::new(&p, 0.1, 0.0, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        let dw = &before.weights[0] - &p.weights[0];
        assert!((&dw - &(&g.weights[0] * 0.1)).iter().all(|v| v.abs() < 1e-15));
        assert!((&before.biases[0] - &p.biases[0] - &g.biases[0] * 0.1).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn sgd_zero_grad_keeps_params() {
        let mut p = init_encoder(&[3, 4, 2], 5).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptState::new(&p, 0.1, 0.9, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut p = init_encoder(&[2, 1], 0).unwrap();
        let mut g = p.zeros_like();
        g.weights[0] = array![[1.0, 2.0]];
        let mut st = OptState::new(&p, 0.1, 0.9, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        let mid = p.clone();
        sgd_step(&mut p, &g, &mut st).unwrap();
        let step = &mid.weights[0] - &p.weights[0];
        assert_abs_diff_eq!(step[[0, 0]], 0.1 * 1.9 * 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(step[[0, 1]], 0.1 * 1.9 * 2.0, epsilon = 1e-14);
    }

    #[test]
    fn sgd_weight_decay_and_non_finite() {
        let mut p = init_encoder(&[1, 1], 0).unwrap();
        p.weights[0][[0, 0]] = 2.0;
        let g = p.zeros_like();
        let mut st = OptState::new(&p, 0.1, 0.0, 0.5);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert_abs_diff_eq!(p.weights[0][[0, 0]], 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-15);

        let mut bad = p.zeros_like();
        bad.biases[0][0] = f64::NAN;
        let snapshot = p.clone();
        assert!(matches!(sgd_step(&mut p, &bad, &mut st), Err(Error::NonFiniteGradient(_))));
        assert_eq!(p, snapshot);
    }

    #[test]
    fn aggregate_examples() {
        let a = init_encoder(&[3, 4, 2], 1).unwrap();
        let b = init_encoder(&[3, 4, 2], 2).unwrap();
        let same = aggregate_params(&[&a, &a], &[5, 9]).unwrap();
        for k in 0..2 {
            assert!((&same.weights[k] - &a.weights[k]).iter().all(|v| v.abs() < 1e-12));
        }
        let mix = aggregate_params(&[&a, &b], &[1, 3]).unwrap();
        for k in 0..2 {
            let expect = &a.weights[k] * 0.25 + &b.weights[k] * 0.75;
            assert!((&mix.weights[k] - &expect).iter().all(|v| v.abs() < 1e-15));
        }
        let copies: Vec<&EncoderParams> = std::iter::repeat_n(&b, 7).collect();
        let same = aggregate_params(&copies, &[3; 7]).unwrap();
        for k in 0..2 {
            assert!((&same.weights[k] - &b.weights[k]).iter().all(|v| v.abs() < 1e-12));
        }
        let c = init_encoder(&[3, 5, 2], 1).unwrap();
        assert!(matches!(aggregate_params(&[&a, &c], &[1, 1]), Err(Error::ArchitectureMismatch(_))));
        assert!(aggregate_params(&[&a], &[0]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let p = init_encoder(&[4, 6, 3], 17).unwrap();
        let mut bytes = Vec::new();
        p.write_snapshot(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 * (1 + 3 + p.num_parameters()));
        let q = EncoderParams::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(q.layer_dims, p.layer_dims);
        assert_eq!(q.weights, p.weights);
        assert_eq!(q.biases, p.biases);
        let x = random_block(4, 3, 1);
        assert_eq!(encode(&p, x.view()).unwrap(), encode(&q, x.view()).unwrap());
        assert!(EncoderParams::read_snapshot(&bytes[..20]).is_err());
    }
}
