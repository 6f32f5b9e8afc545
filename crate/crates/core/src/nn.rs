//! Multi-layer perceptron: ReLU hidden layers, softmax cross-entropy output,
//! inverted dropout, Kaiming initialization and the momentum update used by
//! every protocol.
//!
//! Parameters live in one flat [`ParamVector`] so protocols can treat a model
//! as a plain vector. Layout: for each layer in order, the weight matrix
//! (`fan_in × fan_out`, row-major) followed by the bias (`fan_out`).

use std::ops::{Index, IndexMut, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Architecture of a dense network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input size, hidden sizes..., class count.
    pub layer_sizes: Vec<usize>,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            input_dropout: 0.0,
            hidden_dropout: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_dropout(mut self, input: f64, hidden: f64) -> Result<Self> {
        self.input_dropout = input;
        self.hidden_dropout = hidden;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least 2 layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        for (name, p) in [
            ("input_dropout", self.input_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Index ranges of layer `l`'s weight and bias in the flat vector.
    pub fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let offset: usize = self.layer_sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = offset..offset + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        (w, b)
    }

    /// Dropout probability applied to the input of layer `l`.
    pub fn has_dropout(&self) -> bool {
        self.input_dropout > 0.0 || self.hidden_dropout > 0.0
    }

    fn dropout_for(&self, l: usize) -> f64 {
        if l == 0 {
            self.input_dropout
        } else {
            self.hidden_dropout
        }
    }
}

/// Flattened model parameters (or anything congruent with them: gradients,
/// velocities).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector<T>(pub Vec<T>);

/// Momentum buffer, congruent with a [`ParamVector`].
pub type Velocity<T> = ParamVector<T>;

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Little-endian 8-byte reals in canonical layout order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|x| x.as_f64().to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "parameter blob length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(ParamVector(
            bytes
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        ))
    }
}

impl<T> Index<usize> for ParamVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for ParamVector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

impl<T> From<Vec<T>> for ParamVector<T> {
    fn from(v: Vec<T>) -> Self {
        ParamVector(v)
    }
}

/// Kaiming-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn kaiming_init<T: Scalar>(spec: &MlpSpec, rng: &mut RngStream) -> ParamVector<T> {
    let mut params = ParamVector::zeros(spec.param_count());
    for l in 0..spec.layers() {
        let (w, _) = spec.layer_ranges(l);
        let std = (2.0 / spec.layer_sizes[l] as f64).sqrt();
        for i in w {
            params[i] = T::of(rng.standard_normal() * std);
        }
    }
    params
}

/// Inverted-dropout masks, one per layer input. Entries are `0` or `1/(1-p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T>(pub Vec<Matrix<T>>);

pub fn dropout_masks<T: Scalar>(spec: &MlpSpec, rng: &mut RngStream, batch: usize) -> DropoutMasks<T> {
    let masks = (0..spec.layers())
        .map(|l| {
            let p = spec.dropout_for(l);
            let width = spec.layer_sizes[l];
            if p == 0.0 {
                return Matrix::filled(batch, width, T::one());
            }
            let scale = T::of(1.0 / (1.0 - p));
            let data = (0..batch * width)
                .map(|_| if rng.uniform() < p { T::zero() } else { scale })
                .collect();
            Matrix::from_vec(batch, width, data).unwrap()
        })
        .collect();
    DropoutMasks(masks)
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer, after dropout.
    inputs: Vec<Matrix<T>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Matrix<T>>,
    masks: Option<DropoutMasks<T>>,
}

fn layer_weights<T: Scalar>(spec: &MlpSpec, params: &ParamVector<T>, l: usize) -> (Matrix<T>, Vec<T>) {
    let (w, b) = spec.layer_ranges(l);
    let weight = Matrix::from_vec(spec.layer_sizes[l], spec.layer_sizes[l + 1], params.0[w].to_vec()).unwrap();
    (weight, params.0[b].to_vec())
}

fn check_params<T: Scalar>(spec: &MlpSpec, params: &ParamVector<T>) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Dimension {
            op: "params",
            left: (params.len(), 1),
            right: (spec.param_count(), 1),
        });
    }
    Ok(())
}

/// Forward pass. `masks` must be given in training mode and omitted for
/// evaluation.
pub fn forward<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    x: &Matrix<T>,
    masks: Option<&DropoutMasks<T>>,
) -> Result<(Matrix<T>, ForwardCache<T>)> {
    check_params(spec, params)?;
    if x.cols() != spec.input_size() {
        return Err(Error::Dimension {
            op: "forward input",
            left: x.shape(),
            right: (x.rows(), spec.input_size()),
        });
    }
    if let Some(m) = masks {
        if m.0.len() != spec.layers() {
            return Err(Error::InvalidArgument(format!(
                "expected {} dropout masks, got {}",
                spec.layers(),
                m.0.len()
            )));
        }
    }
    let mut inputs = Vec::with_capacity(spec.layers());
    let mut pre_activations = Vec::with_capacity(spec.layers() - 1);
    let mut a = x.clone();
    for l in 0..spec.layers() {
        if let Some(m) = masks {
            a.hadamard_assign(&m.0[l])?;
        }
        let (w, b) = layer_weights(spec, params, l);
        let mut z = matmul(&a, &w)?;
        z.add_row_assign(&b)?;
        inputs.push(a);
        if l + 1 == spec.layers() {
            let cache = ForwardCache {
                inputs,
                pre_activations,
                masks: masks.cloned(),
            };
            return Ok((z, cache));
        }
        a = z.map(|v| v.max(T::zero()));
        pre_activations.push(z);
    }
    unreachable!("spec has at least one layer")
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_ce<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Dimension {
            op: "softmax_ce",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if batch == 0 {
        return Err(Error::Empty("softmax_ce"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let inv_batch = T::one() / T::from_usize(batch).unwrap();
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(batch, classes);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[y];
        let g = grad.row_mut(r);
        for (c, (gc, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_sum).exp();
            let onehot = if c == y { T::one() } else { T::zero() };
            *gc = (p - onehot) * inv_batch;
        }
    }
    Ok((loss * inv_batch, grad))
}

/// Reverse-mode gradient of the loss that produced `dlogits`.
pub fn backward<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    cache: &ForwardCache<T>,
    dlogits: &Matrix<T>,
) -> Result<ParamVector<T>> {
    check_params(spec, params)?;
    let mut grad = ParamVector::zeros(spec.param_count());
    let mut delta = dlogits.clone();
    for l in (0..spec.layers()).rev() {
        let (w_range, b_range) = spec.layer_ranges(l);
        let dw = matmul_tn(&cache.inputs[l], &delta)?;
        grad.0[w_range].copy_from_slice(dw.as_slice());
        grad.0[b_range].copy_from_slice(&delta.column_sums());
        if l == 0 {
            break;
        }
        let (w, _) = layer_weights(spec, params, l);
        let mut da = matmul_nt(&delta, &w)?;
        if let Some(m) = &cache.masks {
            da.hadamard_assign(&m.0[l])?;
        }
        let z = &cache.pre_activations[l - 1];
        for (d, &zv) in da.as_mut_slice().iter_mut().zip(z.as_slice()) {
            if zv <= T::zero() {
                *d = T::zero();
            }
        }
        delta = da;
    }
    Ok(grad)
}

/// Evaluation-mode loss.
pub fn loss<T: Scalar>(spec: &MlpSpec, params: &ParamVector<T>, x: &Matrix<T>, labels: &[usize]) -> Result<T> {
    let (logits, _) = forward(spec, params, x, None)?;
    Ok(softmax_ce(&logits, labels)?.0)
}

/// Loss and gradient in one pass.
pub fn loss_and_gradient<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    x: &Matrix<T>,
    labels: &[usize],
    masks: Option<&DropoutMasks<T>>,
) -> Result<(T, ParamVector<T>)> {
    let (logits, cache) = forward(spec, params, x, masks)?;
    let (loss, dlogits) = softmax_ce(&logits, labels)?;
    let grad = backward(spec, params, &cache, &dlogits)?;
    Ok((loss, grad))
}

/// Central differences `(f(θ+εe) - f(θ-εe)) / 2ε` for every coordinate.
pub fn central_difference<T: Scalar>(
    params: &ParamVector<T>,
    epsilon: T,
    mut f: impl FnMut(&ParamVector<T>) -> Result<T>,
) -> Result<ParamVector<T>> {
    if epsilon <= T::zero() {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut probe = params.clone();
    let mut grad = ParamVector::zeros(params.len());
    let two = T::one() + T::one();
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = f(&probe)?;
        probe[i] = orig - epsilon;
        let down = f(&probe)?;
        probe[i] = orig;
        grad[i] = (up - down) / (two * epsilon);
    }
    Ok(grad)
}

/// Finite-difference gradient of the evaluation-mode loss (dropout off).
pub fn finite_diff_grad<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    x: &Matrix<T>,
    labels: &[usize],
    epsilon: T,
) -> Result<ParamVector<T>> {
    central_difference(params, epsilon, |p| loss(spec, p, x, labels))
}

/// Largest `|a - b| / max(|a|, |b|)` over coordinates; pairs that are both
/// zero count as agreement.
pub fn max_relative_error<T: Scalar>(a: &ParamVector<T>, b: &ParamVector<T>) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Momentum step, exactly as the training loop prescribes:
/// `v ← µv − ηg`, then `θ ← θ − ηg + µv`.
pub fn nag_update<T: Scalar>(
    params: &mut ParamVector<T>,
    velocity: &mut Velocity<T>,
    gradient: &ParamVector<T>,
    eta: T,
    mu: T,
) {
    assert_eq!(params.len(), velocity.len(), "velocity not congruent with params");
    assert_eq!(params.len(), gradient.len(), "gradient not congruent with params");
    for ((p, v), &g) in params.0.iter_mut().zip(velocity.0.iter_mut()).zip(&gradient.0) {
        let step = eta * g;
        *v = mu * *v - step;
        *p = *p - step + mu * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_input(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2]).is_err());
        assert!(MlpSpec::new(vec![3, 2]).unwrap().with_dropout(1.0, 0.0).is_err());
        let s = MlpSpec::new(vec![6, 5, 3]).unwrap();
        assert_eq!(s.param_count(), 6 * 5 + 5 + 5 * 3 + 3);
        assert_eq!(s.layer_ranges(1), (35..50, 50..53));
    }

    #[test]
    fn kaiming_std_and_zero_bias() {
        let spec = MlpSpec::new(vec![2, 50_000]).unwrap();
        let p: ParamVector<f64> = kaiming_init(&spec, &mut RngStream::from_seed(1));
        let (w, b) = spec.layer_ranges(0);
        let ws = &p.0[w];
        let n = ws.len() as f64;
        let mean = ws.iter().sum::<f64>() / n;
        let var = ws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        // std of the sample std is about sigma / sqrt(2n)
        let sigma_of_std = 1.0 / (2.0 * n).sqrt();
        assert!((var.sqrt() - 1.0).abs() < 3.0 * sigma_of_std, "std {}", var.sqrt());
        assert!(p.0[b].iter().all(|&x| x == 0.0));
        let again: ParamVector<f64> = kaiming_init(&spec, &mut RngStream::from_seed(1));
        assert_eq!(p, again);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let spec = MlpSpec::new(vec![4, 3, 2]).unwrap();
        let x = random_input(&mut RngStream::from_seed(2), 5, 4);
        let (logits, _) = forward(&spec, &ParamVector::zeros(spec.param_count()), &x, None).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_is_affine() {
        let spec = MlpSpec::new(vec![4, 3]).unwrap();
        let mut rng = RngStream::from_seed(3);
        let p: ParamVector<f64> = ParamVector((0..spec.param_count()).map(|_| rng.standard_normal()).collect());
        let x = random_input(&mut rng, 6, 4);
        let (logits, _) = forward(&spec, &p, &x, None).unwrap();
        for r in 0..6 {
            for c in 0..3 {
                let mut want = p[12 + c];
                for k in 0..4 {
                    want += x.get(r, k) * p[k * 3 + c];
                }
                assert!((logits.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_mask_rows_ignore_inputs() {
        let spec = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let mut rng = RngStream::from_seed(4);
        let p: ParamVector<f64> = kaiming_init(&spec, &mut rng);
        let mut masks = dropout_masks::<f64>(&spec, &mut rng, 2);
        masks.0[0].row_mut(0).fill(0.0);
        let x1 = random_input(&mut rng, 2, 4);
        let mut x2 = x1.clone();
        x2.row_mut(0).copy_from_slice(&[9.0, -9.0, 3.0, 1.0]);
        let (l1, _) = forward(&spec, &p, &x1, Some(&masks)).unwrap();
        let (l2, _) = forward(&spec, &p, &x2, Some(&masks)).unwrap();
        assert_eq!(l1.row(0), l2.row(0));
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let spec = MlpSpec::new(vec![4, 3]).unwrap();
        let p = ParamVector::<f64>::zeros(spec.param_count());
        assert!(forward(&spec, &p, &Matrix::zeros(2, 5), None).is_err());
        assert!(forward(&spec, &ParamVector::<f64>::zeros(3), &Matrix::zeros(2, 4), None).is_err());
    }

    #[test]
    fn softmax_ce_cases() {
        let uniform = Matrix::<f64>::zeros(3, 10);
        let (l, g) = softmax_ce(&uniform, &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        for r in 0..3 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
        let logits = Matrix::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap();
        let (l, _) = softmax_ce(&logits, &[0]).unwrap();
        assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!(softmax_ce(&logits, &[2]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        let mut rng = RngStream::from_seed(5);
        let p: ParamVector<f64> = kaiming_init(&spec, &mut rng);
        let x = random_input(&mut rng, 4, 6);
        let (_, cache) = forward(&spec, &p, &x, None).unwrap();
        let g = backward(&spec, &p, &cache, &Matrix::zeros(4, 3)).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_gradient_is_delta_column_sum() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        let mut rng = RngStream::from_seed(6);
        let p: ParamVector<f64> = kaiming_init(&spec, &mut rng);
        let x = random_input(&mut rng, 4, 6);
        let (logits, cache) = forward(&spec, &p, &x, None).unwrap();
        let (_, d) = softmax_ce(&logits, &[0, 1, 2, 1]).unwrap();
        let g = backward(&spec, &p, &cache, &d).unwrap();
        let (_, b) = spec.layer_ranges(1);
        for (c, i) in b.enumerate() {
            let want: f64 = (0..4).map(|r| d.get(r, c)).sum();
            assert!((g[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        for seed in 0..20 {
            let mut rng = RngStream::from_seed(100 + seed);
            let p: ParamVector<f64> = kaiming_init(&spec, &mut rng);
            let x = random_input(&mut rng, 4, 6);
            let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
            let (_, analytic) = loss_and_gradient(&spec, &p, &x, &labels, None).unwrap();
            let numeric = finite_diff_grad(&spec, &p, &x, &labels, 1e-6).unwrap();
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-5, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn dropout_gradient_passes_through_masks() {
        let spec = MlpSpec::new(vec![5, 7, 3]).unwrap().with_dropout(0.2, 0.5).unwrap();
        let mut rng = RngStream::from_seed(8);
        let p: ParamVector<f64> = kaiming_init(&spec, &mut rng);
        let x = random_input(&mut rng, 3, 5);
        let labels = [0, 2, 1];
        let masks = dropout_masks(&spec, &mut rng, 3);
        let (_, analytic) = loss_and_gradient(&spec, &p, &x, &labels, Some(&masks)).unwrap();
        let numeric = central_difference(&p, 1e-6, |q| {
            let (logits, _) = forward(&spec, q, &x, Some(&masks))?;
            Ok(softmax_ce(&logits, &labels)?.0)
        })
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn central_difference_on_quadratic() {
        let p = ParamVector(vec![1.5f64]);
        let g = central_difference(&p, 1e-3, |q| Ok(q[0] * q[0])).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-9);
        assert!(central_difference(&p, 0.0, |q| Ok(q[0])).is_err());
    }

    #[test]
    fn central_difference_is_second_order() {
        // no hidden layer, so the loss is smooth everywhere
        let spec = MlpSpec::new(vec![4, 3]).unwrap();
        let mut rng = RngStream::from_seed(9);
        let p: ParamVector<f64> = kaiming_init(&spec, &mut rng);
        let x = random_input(&mut rng, 5, 4);
        let labels = [0, 1, 2, 0, 1];
        let (_, exact) = loss_and_gradient(&spec, &p, &x, &labels, None).unwrap();
        let err = |eps: f64| {
            let g = finite_diff_grad(&spec, &p, &x, &labels, eps).unwrap();
            g.0.iter().zip(&exact.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err(4e-2) / err(2e-2);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn dropout_mask_statistics() {
        let spec = MlpSpec::new(vec![10, 4]).unwrap();
        let m = dropout_masks::<f64>(&spec, &mut RngStream::from_seed(1), 7);
        assert!(m.0[0].as_slice().iter().all(|&v| v == 1.0));

        let spec = MlpSpec::new(vec![1000, 2]).unwrap().with_dropout(0.5, 0.0).unwrap();
        let m = dropout_masks::<f64>(&spec, &mut RngStream::from_seed(2), 100);
        let entries = m.0[0].as_slice();
        assert!(entries.iter().all(|&v| v == 0.0 || v == 2.0));
        let n = entries.len() as f64;
        let kept = entries.iter().filter(|&&v| v != 0.0).count() as f64 / n;
        assert!((kept - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
    }

    #[test]
    fn inverted_dropout_is_unbiased() {
        let p = 0.2;
        let spec = MlpSpec::new(vec![1000, 2]).unwrap().with_dropout(p, 0.0).unwrap();
        let m = dropout_masks::<f64>(&spec, &mut RngStream::from_seed(3), 100);
        let activation = 0.7;
        let entries = m.0[0].as_slice();
        let n = entries.len() as f64;
        let mean = entries.iter().map(|&v| v * activation).sum::<f64>() / n;
        // per-entry variance: a^2 * p / (1 - p)
        let sd = (activation * activation * p / (1.0 - p) / n).sqrt();
        assert!((mean - activation).abs() < 3.0 * sd);
    }

    #[test]
    fn nag_update_cases() {
        let mut p = ParamVector(vec![1.0f64]);
        let mut v = ParamVector(vec![0.0]);
        nag_update(&mut p, &mut v, &ParamVector(vec![1.0]), 0.1, 0.9);
        assert!((v[0] + 0.1).abs() < 1e-15);
        assert!((p[0] - (1.0 - 0.19)).abs() < 1e-15);

        let mut p = ParamVector(vec![1.0f64]);
        let mut v = ParamVector(vec![1.0]);
        nag_update(&mut p, &mut v, &ParamVector(vec![0.0]), 0.1, 0.9);
        assert!((v[0] - 0.9).abs() < 1e-15);
        assert!((p[0] - 1.81).abs() < 1e-15);
    }

    #[test]
    fn serialization_layout() {
        let p = ParamVector(vec![1.0f64, -2.5]);
        let bytes = p.to_le_bytes();
        assert_eq!(&bytes[..8], &1.0f64.to_le_bytes());
        assert_eq!(ParamVector::<f64>::from_le_bytes(&bytes).unwrap(), p);
        assert!(ParamVector::<f64>::from_le_bytes(&bytes[..7]).is_err());
    }

    proptest! {
        #[test]
        fn momentum_off_is_plain_sgd(theta in prop::collection::vec(-1e3f64..1e3, 1..20), seed in any::<u64>(), eta in 1e-4f64..1.0) {
            let mut rng = RngStream::from_seed(seed);
            let g = ParamVector(theta.iter().map(|_| rng.standard_normal()).collect::<Vec<f64>>());
            let mut p = ParamVector(theta.clone());
            let mut v = ParamVector(theta.iter().map(|_| rng.standard_normal()).collect());
            nag_update(&mut p, &mut v, &g, eta, 0.0);
            for i in 0..theta.len() {
                prop_assert_eq!(p[i].to_bits(), (theta[i] - eta * g[i]).to_bits());
                prop_assert_eq!(v[i], -(eta * g[i]));
            }
        }

        #[test]
        fn param_bytes_round_trip(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..64)) {
            let p = ParamVector(v);
            prop_assert_eq!(ParamVector::<f64>::from_le_bytes(&p.to_le_bytes()).unwrap(), p);
        }

        #[test]
        fn softmax_loss_nonnegative(seed in any::<u64>(), rows in 1usize..6, classes in 2usize..6) {
            let mut rng = RngStream::from_seed(seed);
            let logits = random_input(&mut rng, rows, classes).map(|v| 5.0 * v);
            let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
            let (l, g) = softmax_ce(&logits, &labels).unwrap();
            prop_assert!(l >= 0.0);
            for r in 0..rows {
                prop_assert!(g.row(r).iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}
