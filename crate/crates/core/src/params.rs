//! Parameter containers shared by the trainable components.

use ndarray::Array2;
use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;

/// A fixed, ordered list of weight matrices.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Array2<f64>>;
    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Put every tensor on the tape, as trainable leaves or as constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// U(−1/√fan_in, 1/√fan_in), the usual default for affine layers.
pub fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

pub fn to_f64(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

/// Column of ones/zeros broadcast to `cols`, for re-zeroing padded rows.
pub fn mask_matrix(mask: &[bool], cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((mask.len(), cols), |(i, _)| if mask[i] { 1.0 } else { 0.0 })
}
