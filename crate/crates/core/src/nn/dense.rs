use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::{Parameterized, Tensor};
use crate::error::{check_dim, Result};

/// Fully connected layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let mut layer = Self::zeros(input, output);
        for w in layer.weight.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *w = std * e;
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("dense input width", self.input_dim(), x.ncols())?;
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        for mut row in y.rows_mut() {
            row.assign(&ndarray::aview1(self.bias.data()));
        }
        general_mat_mul(1.0, &x, &self.weight.view2().t(), 1.0, &mut y);
        Ok(y)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    /// Adds `dL/dW` and `dL/db` into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut Dense,
    ) -> Result<Array2<f64>> {
        check_dim("dense input width", self.input_dim(), x.ncols())?;
        check_dim("dense output gradient width", self.output_dim(), dy.ncols())?;
        check_dim("dense batch size", x.nrows(), dy.nrows())?;
        let mut dw = Array2::zeros((self.output_dim(), self.input_dim()));
        general_mat_mul(1.0, &dy.t(), &x, 0.0, &mut dw);
        for (g, d) in grad.weight.data_mut().iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, d) in grad.bias.data_mut().iter_mut().zip(db.iter()) {
            *g += d;
        }
        let mut dx = Array2::zeros((x.nrows(), self.input_dim()));
        general_mat_mul(1.0, &dy, &self.weight.view2(), 0.0, &mut dx);
        Ok(dx)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }
}

impl Parameterized for Dense {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut layer = Dense::zeros(3, 3);
        for i in 0..3 {
            layer.weight.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(
            layer.apply(&[1.5, -2.0, 0.25]).unwrap(),
            vec![1.5, -2.0, 0.25]
        );
    }

    #[test]
    fn hand_computed_matvec() {
        let layer = Dense {
            weight: Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        assert_eq!(layer.apply(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let layer = Dense::zeros(3, 2);
        assert!(layer.apply(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = Dense::random(4, 3, 0.7, &mut rng);
        for b in layer.bias.data_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let x = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        // L = 0.5 * |y - target|²
        let loss = |l: &Dense, x: &Array2<f64>| {
            let y = l.forward(x.view()).unwrap();
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let y = layer.forward(x.view()).unwrap();
        let dy = &y - &target;
        let mut grad = layer.zeros_like();
        let dx = layer.backward(x.view(), dy.view(), &mut grad).unwrap();

        let params = layer.flatten();
        let report = gradient_check(&params, &grad.flatten(), 1e-4, |p| {
            let mut l = layer.clone();
            l.load_flat(p).unwrap();
            loss(&l, &x)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");

        let xs: Vec<f64> = x.iter().copied().collect();
        let report = gradient_check(&xs, dx.as_slice().unwrap(), 1e-4, |p| {
            let xp = Array2::from_shape_vec((2, 4), p.to_vec()).unwrap();
            loss(&layer, &xp)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
