use std::ops::Deref;

use super::NumericsError;
use crate::Scalar;

/// Non-empty vector of finite reals.
///
/// Holds parameters `w` as well as local and aggregated gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector<S>(Vec<S>);

impl<S: Scalar> Vector<S> {
    pub fn new(values: Vec<S>) -> Result<Self, NumericsError> {
        if values.is_empty() {
            return Err(NumericsError::Empty);
        }
        check_finite(&values)?;
        Ok(Vector(values))
    }

    /// # Panics
    /// If `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "Vector::zeros requires len > 0");
        Vector(vec![S::zero(); len])
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<S> {
        self.0
    }

    pub fn cast<T: Scalar>(&self) -> Vector<T> {
        Vector(self.0.iter().map(|v| T::from(*v).expect("finite cast")).collect())
    }
}

impl<S> Deref for Vector<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.0
    }
}

impl<S: Scalar> TryFrom<Vec<S>> for Vector<S> {
    type Error = NumericsError;

    fn try_from(v: Vec<S>) -> Result<Self, Self::Error> {
        Vector::new(v)
    }
}

pub(crate) fn check_finite<S: Scalar>(values: &[S]) -> Result<(), NumericsError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NumericsError::NonFinite { index }),
        None => Ok(()),
    }
}

/// `params - lr * grad`, elementwise.
pub fn sgd_update<S: Scalar>(params: &Vector<S>, grad: &[S], lr: S) -> Result<Vector<S>, NumericsError> {
    if grad.len() != params.len() {
        return Err(NumericsError::LengthMismatch { expected: params.len(), got: grad.len() });
    }
    if !(lr > S::zero() && lr.is_finite()) {
        return Err(NumericsError::InvalidLearningRate(lr.to_f64().unwrap_or(f64::NAN)));
    }
    let out: Vec<S> = params.iter().zip(grad).map(|(&w, &g)| w - lr * g).collect();
    check_finite(&out)?;
    Ok(Vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_params() {
        let w = Vector::new(vec![1.0f32, 2.0]).unwrap();
        let out = sgd_update(&w, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn single_step() {
        let w = Vector::new(vec![1.0f32]).unwrap();
        let out = sgd_update(&w, &[2.0], 0.5).unwrap();
        assert_eq!(out.as_slice(), &[0.0]);
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lr = 0.037f32;
        let mut expected = Vec::with_capacity(1000);
        for i in 0..1000 {
            expected.push(w[i] - lr * g[i]);
        }
        let out = sgd_update(&Vector::new(w).unwrap(), &g, lr).unwrap();
        assert_eq!(out.as_slice(), expected.as_slice());
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Vector::new(vec![1.0f32, 2.0]).unwrap();
        assert!(matches!(sgd_update(&w, &[1.0], 0.1), Err(NumericsError::LengthMismatch { .. })));
        assert!(matches!(sgd_update(&w, &[1.0, 1.0], 0.0), Err(NumericsError::InvalidLearningRate(_))));
        assert!(matches!(sgd_update(&w, &[f32::MAX, 0.0], -f32::MAX).is_err(), true));
        assert_eq!(Vector::<f32>::new(vec![]), Err(NumericsError::Empty));
        assert_eq!(Vector::new(vec![1.0, f64::NAN]), Err(NumericsError::NonFinite { index: 1 }));
    }

    #[test]
    fn overflow_is_reported() {
        let w = Vector::new(vec![f32::MAX]).unwrap();
        assert_eq!(sgd_update(&w, &[-f32::MAX], 1.0), Err(NumericsError::NonFinite { index: 0 }));
    }
}
