use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::NumericsError;
use crate::Scalar;

/// Row-major feature matrix with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    features: Vec<S>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(features: Vec<S>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self, NumericsError> {
        if labels.is_empty() {
            return Err(NumericsError::InvalidDataset("dataset has no samples".into()));
        }
        if dim == 0 || num_classes == 0 {
            return Err(NumericsError::InvalidDataset("dim and num_classes must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(NumericsError::LengthMismatch { expected: labels.len() * dim, got: features.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(NumericsError::InvalidLabel { index, label, num_classes });
        }
        super::vector::check_finite(&features)?;
        Ok(Dataset { features, labels, dim, num_classes })
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            features: self.features.iter().map(|v| T::from(*v).expect("finite cast")).collect(),
            labels: self.labels.clone(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    /// Indices `i` with `i % workers == rank`.
    pub fn shard_indices(&self, rank: usize, workers: usize) -> Vec<usize> {
        (rank..self.num_samples()).step_by(workers.max(1)).collect()
    }
}

/// Sample indices into a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Minibatch {
    indices: Vec<usize>,
}

impl Minibatch {
    pub fn new(indices: Vec<usize>) -> Self {
        Minibatch { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub(crate) fn validate(&self, num_samples: usize) -> Result<(), NumericsError> {
        if self.indices.is_empty() {
            return Err(NumericsError::BatchSize { size: 0, available: num_samples });
        }
        match self.indices.iter().find(|&&i| i >= num_samples) {
            Some(&index) => Err(NumericsError::IndexOutOfBounds { index, len: num_samples }),
            None => Ok(()),
        }
    }
}

/// Draws `size` distinct sample indices from the whole dataset.
pub fn sample_minibatch<S: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset<S>,
    size: usize,
    rng: &mut R,
) -> Result<Minibatch, NumericsError> {
    let n = dataset.num_samples();
    if size == 0 || size > n {
        return Err(NumericsError::BatchSize { size, available: n });
    }
    Ok(Minibatch::new(rand::seq::index::sample(rng, n, size).into_vec()))
}

/// Draws `size` distinct entries of `pool` (a worker's shard).
pub fn sample_minibatch_from<R: Rng + ?Sized>(
    pool: &[usize],
    size: usize,
    rng: &mut R,
) -> Result<Minibatch, NumericsError> {
    if size == 0 || size > pool.len() {
        return Err(NumericsError::BatchSize { size, available: pool.len() });
    }
    let picks = rand::seq::index::sample(rng, pool.len(), size);
    Ok(Minibatch::new(picks.iter().map(|i| pool[i]).collect()))
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub samples: usize,
    /// Distance between class centers in units of the per-feature standard deviation.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { dim: 64, classes: 2, samples: 10_000, separation: 3.0, seed: 42 }
    }
}

/// Gaussian blobs with unit per-feature variance.
///
/// Class centers are random directions scaled so that two centers sit
/// `separation` apart (exactly for two classes, in expectation otherwise).
/// Labels are balanced and randomly ordered.
pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<Dataset<f32>, NumericsError> {
    if spec.dim == 0 || spec.classes < 2 || spec.samples < spec.classes {
        return Err(NumericsError::InvalidDataset(format!(
            "synthetic blobs need dim >= 1, classes >= 2, samples >= classes (got {:?})",
            spec
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = if spec.classes == 2 {
        let u = random_unit(&mut rng, spec.dim);
        let half = spec.separation / 2.0;
        vec![u.iter().map(|x| x * half).collect(), u.iter().map(|x| -x * half).collect()]
    } else {
        let radius = spec.separation / std::f64::consts::SQRT_2;
        (0..spec.classes)
            .map(|_| random_unit(&mut rng, spec.dim).into_iter().map(|x| x * radius).collect())
            .collect()
    };

    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);

    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    for &label in &labels {
        for d in 0..spec.dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push((centers[label][d] + noise) as f32);
        }
    }
    Dataset::new(features, labels, spec.dim, spec.classes)
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
