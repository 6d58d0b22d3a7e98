use ndarray::{Array4, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{Parameterized, Tensor};
use crate::error::{check_dim, Error, Result};

/// 2-D cross-correlation over `(batch, channel, height, width)` inputs with
/// zero padding. Kernels are stored `out_ch × in_ch × k × k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel size {kernel} must be odd"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        Ok(Self {
            kernels: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_channels, out_channels, kernel, stride, padding)?;
        for w in layer.kernels.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *w = std * e;
        }
        Ok(layer)
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel_size();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &ArrayView4<'_, f64>) -> Result<Geometry> {
        let (_, c, h, w) = x.dim();
        check_dim("conv input channels", self.in_channels(), c)?;
        let k = self.kernel_size();
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} smaller than kernel {k}"
            )));
        }
        let (oh, ow) = self.output_size(h, w);
        Ok(Geometry {
            cin: c,
            cout: self.out_channels(),
            k,
            h,
            w,
            oh,
            ow,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn tap(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    fn forward_sample(&self, g: &Geometry, x: &[f64], y: &mut [f64]) {
        let kern = self.kernels.data();
        let bias = self.bias.data();
        let k = g.k;
        for oc in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias[oc];
                    for ic in 0..g.cin {
                        let xc = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                        let kc = &kern[(oc * g.cin + ic) * k * k..(oc * g.cin + ic + 1) * k * k];
                        for ky in 0..k {
                            let Some(iy) = self.tap(oy, ky, g.h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = self.tap(ox, kx, g.w) else {
                                    continue;
                                };
                                acc += kc[ky * k + kx] * xc[iy * g.w + ix];
                            }
                        }
                    }
                    y[(oc * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        let g = self.geometry(&x)?;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let b = x.dim().0;
        let in_len = g.cin * g.h * g.w;
        let out_len = g.cout * g.oh * g.ow;
        let mut y = vec![0.0; b * out_len];
        for (xi, yi) in xs.chunks_exact(in_len).zip(y.chunks_exact_mut(out_len)) {
            self.forward_sample(&g, xi, yi);
        }
        Ok(Array4::from_shape_vec((b, g.cout, g.oh, g.ow), y).expect("output shape"))
    }

    /// Per-sample kernel/bias gradients and input gradient.
    fn backward_sample(
        &self,
        g: &Geometry,
        x: &[f64],
        dy: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = g.k;
        let kern = self.kernels.data();
        let mut dk = vec![0.0; self.kernels.len()];
        let mut db = vec![0.0; g.cout];
        let mut dx = vec![0.0; x.len()];
        for oc in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = dy[(oc * g.oh + oy) * g.ow + ox];
                    db[oc] += d;
                    if d == 0.0 {
                        continue;
                    }
                    for ic in 0..g.cin {
                        let base = (oc * g.cin + ic) * k * k;
                        let xoff = ic * g.h * g.w;
                        for ky in 0..k {
                            let Some(iy) = self.tap(oy, ky, g.h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = self.tap(ox, kx, g.w) else {
                                    continue;
                                };
                                let xi = xoff + iy * g.w + ix;
                                dk[base + ky * k + kx] += d * x[xi];
                                dx[xi] += d * kern[base + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        (dk, db, dx)
    }

    /// Adds kernel/bias gradients into `grad` and returns `dL/dx`. Per-sample
    /// gradients are reduced in sample order, so `parallel` does not change
    /// the result.
    pub fn backward(
        &self,
        x: ArrayView4<'_, f64>,
        dy: ArrayView4<'_, f64>,
        grad: &mut Conv2d,
        parallel: bool,
    ) -> Result<Array4<f64>> {
        let g = self.geometry(&x)?;
        let b = x.dim().0;
        if dy.dim() != (b, g.cout, g.oh, g.ow) {
            return Err(Error::InvalidConfig(format!(
                "conv output gradient has shape {:?}, expected {:?}",
                dy.dim(),
                (b, g.cout, g.oh, g.ow)
            )));
        }
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        let in_len = g.cin * g.h * g.w;
        let out_len = g.cout * g.oh * g.ow;
        let per_sample: Vec<_> = if parallel {
            (0..b)
                .into_par_iter()
                .map(|i| {
                    self.backward_sample(
                        &g,
                        &xs[i * in_len..(i + 1) * in_len],
                        &dys[i * out_len..(i + 1) * out_len],
                    )
                })
                .collect()
        } else {
            (0..b)
                .map(|i| {
                    self.backward_sample(
                        &g,
                        &xs[i * in_len..(i + 1) * in_len],
                        &dys[i * out_len..(i + 1) * out_len],
                    )
                })
                .collect()
        };
        let mut dx = Vec::with_capacity(b * in_len);
        for (dk, db, dxi) in per_sample {
            for (a, v) in grad.kernels.data_mut().iter_mut().zip(dk) {
                *a += v;
            }
            for (a, v) in grad.bias.data_mut().iter_mut().zip(db) {
                *a += v;
            }
            dx.extend(dxi);
        }
        Ok(Array4::from_shape_vec((b, g.cin, g.h, g.w), dx).expect("input shape"))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernels: Tensor::zeros_like(&self.kernels),
            bias: Tensor::zeros_like(&self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl Parameterized for Conv2d {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.kernels, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernels, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple loop over (oc, oy, ox) × (ic, ky, kx) with explicit
    /// padding checks.
    fn naive(layer: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (b, cin, h, w) = x.dim();
        let k = layer.kernel_size();
        let (s, p) = (layer.stride as isize, layer.padding as isize);
        let oh = (h as isize + 2 * p - k as isize) / s + 1;
        let ow = (w as isize + 2 * p - k as isize) / s + 1;
        let kv = layer.kernels.view4();
        let mut y = Array4::zeros((b, layer.out_channels(), oh as usize, ow as usize));
        for n in 0..b {
            for oc in 0..layer.out_channels() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.bias.data()[oc];
                        for ic in 0..cin {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let iy = oy * s - p + ky;
                                    let ix = ox * s - p + kx;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += kv[[oc, ic, ky as usize, kx as usize]]
                                        * x[[n, ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                        y[[n, oc, oy as usize, ox as usize]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let layer = Conv2d::zeros(2, 3, 3, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = layer
            .forward(random_input(&mut rng, (2, 2, 5, 5)).view())
            .unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_tap_kernel_is_identity() {
        let mut layer = Conv2d::zeros(1, 1, 3, 1, 1).unwrap();
        layer.kernels.data_mut()[4] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, (1, 1, 6, 7));
        assert_eq!(layer.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let mut layer = Conv2d::random(2, 3, 3, stride, pad, 0.5, &mut rng).unwrap();
            for b in layer.bias.data_mut() {
                *b = rng.random_range(-1.0..1.0);
            }
            let x = random_input(&mut rng, (2, 2, 7, 6));
            let got = layer.forward(x.view()).unwrap();
            let want = naive(&layer, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Conv2d::zeros(1, 1, 2, 1, 0).is_err());
        assert!(Conv2d::zeros(1, 1, 3, 0, 0).is_err());
        let layer = Conv2d::zeros(2, 1, 3, 1, 0).unwrap();
        assert!(layer.forward(Array4::zeros((1, 1, 4, 4)).view()).is_err());
        assert!(layer.forward(Array4::zeros((1, 2, 2, 4)).view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = Conv2d::random(2, 3, 3, 2, 1, 0.5, &mut rng).unwrap();
        for b in layer.bias.data_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let x = random_input(&mut rng, (2, 2, 6, 6));
        let y0 = layer.forward(x.view()).unwrap();
        let target = random_input(&mut rng, y0.dim());
        let loss = |l: &Conv2d, x: &Array4<f64>| {
            let y = l.forward(x.view()).unwrap();
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let dy = &y0 - &target;
        let mut grad = layer.zeros_like();
        let dx = layer
            .backward(x.view(), dy.view(), &mut grad, false)
            .unwrap();

        let mut grad_par = layer.zeros_like();
        let dx_par = layer
            .backward(x.view(), dy.view(), &mut grad_par, true)
            .unwrap();
        assert_eq!(grad, grad_par);
        assert_eq!(dx, dx_par);

        let report = gradient_check(&layer.flatten(), &grad.flatten(), 1e-4, |p| {
            let mut l = layer.clone();
            l.load_flat(p).unwrap();
            loss(&l, &x)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");

        let xs: Vec<f64> = x.iter().copied().collect();
        let report = gradient_check(&xs, dx.as_slice().unwrap(), 1e-4, |p| {
            let xp = Array4::from_shape_vec(x.dim(), p.to_vec()).unwrap();
            loss(&layer, &xp)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
