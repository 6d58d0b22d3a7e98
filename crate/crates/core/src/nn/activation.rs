use ndarray::{Array, ArrayView, Dimension, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub fn relu_apply<D: Dimension>(x: ArrayView<'_, f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the pre-activation; the subgradient at 0 is 0.
pub fn relu_grad<D: Dimension>(
    pre: ArrayView<'_, f64, D>,
    dy: ArrayView<'_, f64, D>,
) -> Array<f64, D> {
    Zip::from(&pre)
        .and(&dy)
        .map_collect(|&p, &d| if p > 0.0 { d } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Dropout output and its optional scale mask.
pub type DropoutOutput<D> = (Array<f64, D>, Option<Array<f64, D>>);

/// Inverted dropout. Returns the output and the per-unit scale mask (0 or
/// `1/(1−ratio)`), or `None` when the pass is the identity.
pub fn dropout_apply<D: Dimension, R: Rng + ?Sized>(
    x: ArrayView<'_, f64, D>,
    ratio: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<DropoutOutput<D>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!(
            "dropout ratio {ratio} outside [0, 1)"
        )));
    }
    if mode == DropoutMode::Eval || ratio == 0.0 {
        return Ok((x.to_owned(), None));
    }
    let keep = 1.0 / (1.0 - ratio);
    let mask = x.mapv(|_| {
        if rng.random::<f64>() < ratio {
            0.0
        } else {
            keep
        }
    });
    Ok((&x * &mask, Some(mask)))
}

pub fn dropout_backward<D: Dimension>(
    dy: ArrayView<'_, f64, D>,
    mask: Option<&Array<f64, D>>,
) -> Array<f64, D> {
    match mask {
        Some(m) => &dy * m,
        None => dy.to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use ndarray::{arr1, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let y = relu_apply(arr1(&[-1.0, 3.0, 0.0]).view());
        assert_eq!(y, arr1(&[0.0, 3.0, 0.0]));
        let g = relu_grad(
            arr1(&[-1.0, 3.0, 0.0]).view(),
            arr1(&[5.0, 5.0, 5.0]).view(),
        );
        assert_eq!(g, arr1(&[0.0, 5.0, 0.0]));
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..40)
            .map(|_| {
                let v: f64 = rng.random_range(-2.0..2.0);
                if v.abs() < 1e-3 {
                    0.5
                } else {
                    v
                }
            })
            .collect();
        let w: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv = Array1::from(w.clone());
        let analytic = relu_grad(Array1::from(x.clone()).view(), wv.view());
        let report = gradient_check(&x, analytic.as_slice().unwrap(), 1e-5, |p| {
            relu_apply(Array1::from(p.to_vec()).view()).dot(&wv)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = arr1(&[1.0, -2.0, 3.0]);
        let (y, m) = dropout_apply(x.view(), 0.0, DropoutMode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(m.is_none());
        let (y, _) = dropout_apply(x.view(), 0.6, DropoutMode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(dropout_apply(x.view(), 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array1::<f64>::ones(100_000);
        let (y, mask) = dropout_apply(x.view(), 0.6, DropoutMode::Train, &mut rng).unwrap();
        let survivors = y.iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((0.39..=0.41).contains(&survivors), "{survivors}");
        assert!(y.iter().all(|&v| v == 0.0 || (v - 2.5).abs() < 1e-12));
        let back = dropout_backward(x.view(), mask.as_ref());
        assert_eq!(back, y);
    }
}
