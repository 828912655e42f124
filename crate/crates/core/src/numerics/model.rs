use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Minibatch, NumericsError, Vector};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Single affine layer followed by softmax (convex).
    LogisticRegression,
    /// Affine layers with ReLU between them and softmax on top.
    Mlp,
}

/// Location of one weight matrix or bias vector inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub layer: usize,
    pub is_bias: bool,
    pub offset: usize,
    pub len: usize,
}

impl ParamBlock {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Architecture plus the layout of its parameters in one flat vector.
///
/// Layer `l` maps `layer_dims[l]` inputs to `layer_dims[l + 1]` outputs; its
/// weight matrix is stored row-major (`out x in`) and is followed by its bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    kind: ModelKind,
    layer_dims: Vec<usize>,
    layout: Vec<ParamBlock>,
}

impl ModelSpec {
    pub fn logistic(dim: usize, classes: usize) -> Result<Self, NumericsError> {
        Self::build(ModelKind::LogisticRegression, vec![dim, classes])
    }

    /// e.g. `&[784, 500, 500, 10]`.
    pub fn mlp(layer_dims: &[usize]) -> Result<Self, NumericsError> {
        Self::build(ModelKind::Mlp, layer_dims.to_vec())
    }

    fn build(kind: ModelKind, layer_dims: Vec<usize>) -> Result<Self, NumericsError> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidModel(format!("bad layer dims {layer_dims:?}")));
        }
        if kind == ModelKind::LogisticRegression && layer_dims.len() != 2 {
            return Err(NumericsError::InvalidModel("logistic regression has exactly one layer".into()));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(NumericsError::InvalidModel("need at least two classes".into()));
        }
        let mut layout = Vec::with_capacity(2 * (layer_dims.len() - 1));
        let mut offset = 0;
        for (layer, pair) in layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layout.push(ParamBlock { layer, is_bias: false, offset, len: fan_in * fan_out });
            offset += fan_in * fan_out;
            layout.push(ParamBlock { layer, is_bias: true, offset, len: fan_out });
            offset += fan_out;
        }
        Ok(ModelSpec { kind, layer_dims, layout })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn param_layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layout.last().map(|b| b.offset + b.len).unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Logistic regression starts at zero. MLP weights are drawn from
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`, biases are zero.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Vector<S> {
        let mut params = vec![S::zero(); self.num_params()];
        if self.kind == ModelKind::Mlp {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for block in self.layout.iter().filter(|b| !b.is_bias) {
                let fan_in = self.layer_dims[block.layer];
                let fan_out = self.layer_dims[block.layer + 1];
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for p in &mut params[block.range()] {
                    *p = S::lit(rng.random_range(-limit..limit));
                }
            }
        }
        Vector::new(params).expect("finite init")
    }

    fn check<S: Scalar>(&self, params: &[S], data: &Dataset<S>) -> Result<(), NumericsError> {
        if params.len() != self.num_params() {
            return Err(NumericsError::LengthMismatch { expected: self.num_params(), got: params.len() });
        }
        if data.dim() != self.input_dim() {
            return Err(NumericsError::LengthMismatch { expected: self.input_dim(), got: data.dim() });
        }
        if data.num_classes() > self.num_classes() {
            return Err(NumericsError::InvalidModel(format!(
                "dataset has {} classes, model outputs {}",
                data.num_classes(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn layer_params<'a, S>(&self, params: &'a [S], layer: usize) -> (&'a [S], &'a [S]) {
        let w = &self.layout[2 * layer];
        let b = &self.layout[2 * layer + 1];
        (&params[w.range()], &params[b.range()])
    }

    /// Per-layer activations for one sample; `acts[0]` is the input and the
    /// last entry holds the output logits.
    fn activations<S: Scalar>(&self, params: &[S], input: &[S]) -> Vec<Vec<S>> {
        let layers = self.num_layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        for layer in 0..layers {
            let (w, b) = self.layer_params(params, layer);
            let fan_in = self.layer_dims[layer];
            let prev = &acts[layer];
            let mut out: Vec<S> = b.to_vec();
            for (o, z) in out.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *z += dot(row, prev);
            }
            if layer + 1 < layers {
                for z in &mut out {
                    if *z < S::zero() {
                        *z = S::zero();
                    }
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Runs the forward pass and keeps what the backward pass needs.
    pub fn forward<S: Scalar>(
        &self,
        params: &[S],
        data: &Dataset<S>,
        batch: &Minibatch,
    ) -> Result<ForwardPass<S>, NumericsError> {
        self.check(params, data)?;
        batch.validate(data.num_samples())?;
        let mut total = S::zero();
        let mut samples = Vec::with_capacity(batch.len());
        for &i in batch.indices() {
            let mut acts = self.activations(params, data.row(i));
            let logits = acts.pop().unwrap();
            let (loss, probs) = softmax_cross_entropy(&logits, data.label(i));
            total += loss;
            samples.push(SampleCache { acts, probs, label: data.label(i) });
        }
        Ok(ForwardPass { loss: total / S::from_usize_lossy(batch.len()), samples })
    }

    /// Gradient of the mean batch loss from a completed forward pass.
    pub fn backward<S: Scalar>(&self, params: &[S], pass: &ForwardPass<S>) -> Result<Vector<S>, NumericsError> {
        if params.len() != self.num_params() {
            return Err(NumericsError::LengthMismatch { expected: self.num_params(), got: params.len() });
        }
        let mut grad = vec![S::zero(); self.num_params()];
        let inv_batch = S::one() / S::from_usize_lossy(pass.samples.len());
        for sample in &pass.samples {
            let mut delta: Vec<S> = sample.probs.iter().map(|&p| p * inv_batch).collect();
            delta[sample.label] -= inv_batch;
            for layer in (0..self.num_layers()).rev() {
                let fan_in = self.layer_dims[layer];
                let input = &sample.acts[layer];
                let w_block = self.layout[2 * layer];
                let b_block = self.layout[2 * layer + 1];
                for (o, &d) in delta.iter().enumerate() {
                    if d == S::zero() {
                        continue;
                    }
                    let gw = &mut grad[w_block.offset + o * fan_in..w_block.offset + (o + 1) * fan_in];
                    for (g, &x) in gw.iter_mut().zip(input) {
                        *g += d * x;
                    }
                    grad[b_block.offset + o] += d;
                }
                if layer > 0 {
                    let (w, _) = self.layer_params(params, layer);
                    let mut prev = vec![S::zero(); fan_in];
                    for (o, &d) in delta.iter().enumerate() {
                        if d == S::zero() {
                            continue;
                        }
                        for (p, &wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *p += wi * d;
                        }
                    }
                    // ReLU: zero where the activation was clamped
                    for (p, &a) in prev.iter_mut().zip(input) {
                        if a <= S::zero() {
                            *p = S::zero();
                        }
                    }
                    delta = prev;
                }
            }
        }
        Vector::new(grad)
    }

    pub fn logits<S: Scalar>(&self, params: &[S], input: &[S]) -> Vec<S> {
        self.activations(params, input).pop().unwrap()
    }
}

struct SampleCache<S> {
    acts: Vec<Vec<S>>,
    probs: Vec<S>,
    label: usize,
}

/// Cached forward pass over one minibatch.
pub struct ForwardPass<S> {
    loss: S,
    samples: Vec<SampleCache<S>>,
}

impl<S: Scalar> ForwardPass<S> {
    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self) -> S {
        self.loss
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn softmax_cross_entropy<S: Scalar>(logits: &[S], label: usize) -> (S, Vec<S>) {
    let max = logits.iter().fold(S::neg_infinity(), |m, &z| m.max(z));
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    let loss = (max + sum.ln() - logits[label]).max(S::zero());
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy of `model` over `batch`.
pub fn forward_loss<S: Scalar>(
    params: &[S],
    model: &ModelSpec,
    data: &Dataset<S>,
    batch: &Minibatch,
) -> Result<S, NumericsError> {
    Ok(model.forward(params, data, batch)?.loss())
}

/// Gradient of [`forward_loss`] with respect to `params`.
pub fn backward_grad<S: Scalar>(
    params: &[S],
    model: &ModelSpec,
    data: &Dataset<S>,
    batch: &Minibatch,
) -> Result<Vector<S>, NumericsError> {
    let pass = model.forward(params, data, batch)?;
    model.backward(params, &pass)
}

/// Mean loss over the entire dataset.
pub fn full_loss<S: Scalar>(params: &[S], model: &ModelSpec, data: &Dataset<S>) -> Result<S, NumericsError> {
    let all = Minibatch::new((0..data.num_samples()).collect());
    forward_loss(params, model, data, &all)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate_accuracy<S: Scalar>(params: &[S], model: &ModelSpec, data: &Dataset<S>) -> Result<f64, NumericsError> {
    model.check(params, data)?;
    let correct = (0..data.num_samples())
        .filter(|&i| argmax(&model.logits(params, data.row(i))) == data.label(i))
        .count();
    Ok(correct as f64 / data.num_samples() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let m = ModelSpec::mlp(&[784, 500, 500, 10]).unwrap();
        let mut next = 0;
        for b in m.param_layout() {
            assert_eq!(b.offset, next);
            next += b.len;
        }
        assert_eq!(next, m.num_params());
        assert_eq!(m.num_params(), 784 * 500 + 500 + 500 * 500 + 500 + 500 * 10 + 10);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(ModelSpec::mlp(&[4]).is_err());
        assert!(ModelSpec::mlp(&[4, 0, 2]).is_err());
        assert!(ModelSpec::logistic(4, 1).is_err());
    }

    #[test]
    fn zero_params_give_ln2() {
        let m = ModelSpec::logistic(3, 2).unwrap();
        let data = Dataset::new(vec![0.3f64, -1.0, 2.0, 1.0, 1.0, 1.0], vec![0, 1], 3, 2).unwrap();
        let w = vec![0.0; m.num_params()];
        let loss = forward_loss(&w, &m, &data, &Minibatch::new(vec![0, 1])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_softmax_gives_zero_loss() {
        let m = ModelSpec::logistic(1, 2).unwrap();
        let data = Dataset::new(vec![1.0f64], vec![1], 1, 2).unwrap();
        // weights: class0 -> -50, class1 -> +50; biases 0
        let w = vec![-50.0, 50.0, 0.0, 0.0];
        let loss = forward_loss(&w, &m, &data, &Minibatch::new(vec![0])).unwrap();
        assert!(loss >= 0.0 && loss < 1e-40);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let m = ModelSpec::logistic(3, 2).unwrap();
        let data = Dataset::new(vec![0.0f32; 4], vec![0, 1], 2, 2).unwrap();
        let w = vec![0.0; m.num_params()];
        assert!(forward_loss(&w, &m, &data, &Minibatch::new(vec![0])).is_err());
        let data3 = Dataset::new(vec![0.0f32; 6], vec![0, 1], 3, 2).unwrap();
        assert!(forward_loss(&w[..5], &m, &data3, &Minibatch::new(vec![0])).is_err());
        assert!(forward_loss(&w, &m, &data3, &Minibatch::new(vec![2])).is_err());
        assert!(evaluate_accuracy(&w, &m, &data).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32, 0.0]), 0);
    }

    #[test]
    fn constant_predictor_accuracy() {
        let m = ModelSpec::logistic(1, 2).unwrap();
        let data = Dataset::new(vec![1.0f32, 2.0, 3.0, 4.0], vec![0, 1, 1, 0], 1, 2).unwrap();
        let w = vec![0.0; m.num_params()];
        assert_eq!(evaluate_accuracy(&w, &m, &data).unwrap(), 0.5);
        let data = Dataset::new(vec![1.0f32, 2.0, 3.0, 4.0], vec![0, 1, 1, 1], 1, 2).unwrap();
        assert_eq!(evaluate_accuracy(&w, &m, &data).unwrap(), 0.25);
    }

    #[test]
    fn separating_params_are_perfect() {
        let m = ModelSpec::logistic(1, 2).unwrap();
        let data = Dataset::new(vec![-2.0f32, -1.0, 1.0, 2.0], vec![0, 0, 1, 1], 1, 2).unwrap();
        let w = vec![-1.0, 1.0, 0.0, 0.0];
        assert_eq!(evaluate_accuracy(&w, &m, &data).unwrap(), 1.0);
    }

    #[test]
    fn mlp_init_within_glorot_bounds() {
        let m = ModelSpec::mlp(&[4, 6, 2]).unwrap();
        let w: Vector<f64> = m.init_params(1);
        let limit = (6.0f64 / 10.0).sqrt();
        for v in &w[m.param_layout()[0].range()] {
            assert!(v.abs() <= limit);
        }
        assert!(w[m.param_layout()[1].range()].iter().all(|b| *b == 0.0));
        assert_eq!(w, m.init_params(1));
    }
}
