//! Network architecture: an MLP encoder over shape vectors, a single affine
//! decoder layer (the learned basis), and a CNN that maps images into the
//! same latent space.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::image::GrayImage;
use crate::nn::{
    dropout_apply, dropout_backward, relu_apply, relu_grad, Conv2d, Dense, DropoutMode,
    Parameterized, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Length of the vectorized shape, `3n` for point clouds.
    pub shape_dim: usize,
    pub latent_dim: usize,
    /// Hidden widths of the encoder, each followed by ReLU. Empty means a
    /// purely linear encoder.
    pub encoder_hidden: Vec<usize>,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Width of the hidden fully connected layer (`Fc4`); dropout follows it.
    pub fc_hidden: usize,
}

impl NetworkSpec {
    /// Desk-scale defaults: latent 16, encoder `[512, 128]`, three 3×3
    /// stride-2 convolutions with 8/16/32 channels, `Fc4` of width 128.
    pub fn desk(shape_dim: usize, image_size: usize) -> Self {
        Self {
            shape_dim,
            latent_dim: 16,
            encoder_hidden: vec![512, 128],
            image_size,
            conv_channels: vec![8, 16, 32],
            conv_kernel: 3,
            conv_stride: 2,
            fc_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape_dim == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig(
                "shape_dim and latent_dim must be >= 1".into(),
            ));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidConfig(
                "the CNN needs at least one convolution".into(),
            ));
        }
        if self.conv_kernel.is_multiple_of(2) || self.conv_stride == 0 {
            return Err(Error::InvalidConfig(
                "conv kernel must be odd and stride >= 1".into(),
            ));
        }
        if self.encoder_hidden.contains(&0) || self.fc_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        let (c, h, w) = self.conv_output();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} collapses to nothing",
                self.image_size
            )));
        }
        Ok(())
    }

    fn conv_padding(&self) -> usize {
        self.conv_kernel / 2
    }

    /// `(channels, height, width)` after the last convolution.
    pub fn conv_output(&self) -> (usize, usize, usize) {
        let mut size = self.image_size;
        for _ in &self.conv_channels {
            let padded = size + 2 * self.conv_padding();
            if padded < self.conv_kernel {
                return (0, 0, 0);
            }
            size = (padded - self.conv_kernel) / self.conv_stride + 1;
        }
        (*self.conv_channels.last().unwrap_or(&0), size, size)
    }
}

/// Dense layers with ReLU between them and a linear last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub(crate) struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(h.view())?;
            let next = if i < last {
                relu_apply(pre.view())
            } else {
                pre.clone()
            };
            cache.inputs.push(std::mem::replace(&mut h, next));
            cache.pre.push(pre);
        }
        Ok((h, cache))
    }

    pub(crate) fn backward(
        &self,
        cache: &MlpCache,
        dout: ArrayView2<'_, f64>,
        grad: &mut Mlp,
    ) -> Result<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut d = dout.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d = relu_grad(cache.pre[i].view(), d.view());
            }
            d = self.layers[i].backward(cache.inputs[i].view(), d.view(), &mut grad.layers[i])?;
        }
        Ok(d)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }
}

impl Parameterized for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

/// Convolutions (ReLU after each), flatten, `Fc4` (ReLU, then dropout), and a
/// linear head (`Fc5`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRegressor {
    pub convs: Vec<Conv2d>,
    pub fc: Dense,
    pub head: Dense,
}

pub(crate) struct RegressorCache {
    conv_inputs: Vec<Array4<f64>>,
    conv_pre: Vec<Array4<f64>>,
    flat: Array2<f64>,
    fc_pre: Array2<f64>,
    dropped_in: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl ImageRegressor {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, outputs: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.conv_kernel;
        let mut convs = Vec::with_capacity(spec.conv_channels.len());
        let mut cin = 1;
        for &cout in &spec.conv_channels {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            convs.push(Conv2d::random(
                cin,
                cout,
                k,
                spec.conv_stride,
                spec.conv_padding(),
                std,
                rng,
            )?);
            cin = cout;
        }
        let (c, h, w) = spec.conv_output();
        let flat = c * h * w;
        let fc = Dense::random(flat, spec.fc_hidden, (2.0 / flat as f64).sqrt(), rng);
        let head = Dense::random(
            spec.fc_hidden,
            outputs,
            0.1 / (spec.fc_hidden as f64).sqrt(),
            rng,
        );
        Ok(Self { convs, fc, head })
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub(crate) fn forward_cached<R: Rng + ?Sized>(
        &self,
        images: ArrayView4<'_, f64>,
        dropout: f64,
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, RegressorCache)> {
        let b = images.dim().0;
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut conv_pre = Vec::with_capacity(self.convs.len());
        let mut h = images.to_owned();
        for (i, conv) in self.convs.iter().enumerate() {
            let pre = conv.forward(h.view())?;
            if pre.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    layer: i,
                    name: "conv",
                });
            }
            let next = relu_apply(pre.view());
            conv_inputs.push(std::mem::replace(&mut h, next));
            conv_pre.push(pre);
        }
        let width = h.len() / b.max(1);
        let flat = h
            .into_shape_with_order((b, width))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let nconv = self.convs.len();
        let fc_pre = self.fc.forward(flat.view())?;
        if fc_pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: nconv,
                name: "fc4",
            });
        }
        let dropped_in = relu_apply(fc_pre.view());
        let (dropped, mask) = dropout_apply(dropped_in.view(), dropout, mode, rng)?;
        let out = self.head.forward(dropped.view())?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: nconv + 1,
                name: "fc5",
            });
        }
        Ok((
            out,
            RegressorCache {
                conv_inputs,
                conv_pre,
                flat,
                fc_pre,
                dropped_in: dropped,
                mask,
            },
        ))
    }

    /// Eval-mode prediction (dropout off).
    pub fn predict(&self, images: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
        // eval mode never draws from the rng
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(self
            .forward_cached(images, 0.0, DropoutMode::Eval, &mut unused)?
            .0)
    }

    pub(crate) fn backward(
        &self,
        cache: &RegressorCache,
        dout: ArrayView2<'_, f64>,
        grad: &mut ImageRegressor,
        parallel: bool,
    ) -> Result<()> {
        let d = self
            .head
            .backward(cache.dropped_in.view(), dout, &mut grad.head)?;
        let d = dropout_backward(d.view(), cache.mask.as_ref());
        let d = relu_grad(cache.fc_pre.view(), d.view());
        let d = self
            .fc
            .backward(cache.flat.view(), d.view(), &mut grad.fc)?;
        let last_in = cache.conv_pre.last().expect("at least one conv");
        let mut d = d
            .into_shape_with_order(last_in.dim())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for i in (0..self.convs.len()).rev() {
            d = relu_grad(cache.conv_pre[i].view(), d.view());
            d = self.convs[i].backward(
                cache.conv_inputs[i].view(),
                d.view(),
                &mut grad.convs[i],
                parallel,
            )?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            fc: self.fc.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

impl Parameterized for ImageRegressor {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t: Vec<&Tensor> = self.convs.iter().flat_map(|c| c.tensors()).collect();
        t.extend(self.fc.tensors());
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t: Vec<&mut Tensor> = self
            .convs
            .iter_mut()
            .flat_map(|c| c.tensors_mut())
            .collect();
        t.extend(self.fc.tensors_mut());
        t.extend(self.head.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j1: f64,
    pub j2: f64,
    pub total: f64,
}

/// Encoder, affine decoder, and CNN trained together. All shape vectors seen
/// here are in normalized units (see [`ShapeNormalizer`]).
#[derive(Debug, Clone, PartialEq)]
pub struct JointNetwork {
    pub encoder: Mlp,
    pub decoder: Dense,
    pub cnn: ImageRegressor,
}

impl JointNetwork {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.shape_dim];
        widths.extend(&spec.encoder_hidden);
        widths.push(spec.latent_dim);
        let n_enc = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i + 1 < n_enc { 2.0 } else { 1.0 };
                Dense::random(w[0], w[1], (gain / w[0] as f64).sqrt(), rng)
            })
            .collect();
        let decoder = Dense::random(spec.latent_dim, spec.shape_dim, 0.01, rng);
        let cnn = ImageRegressor::new(spec, spec.latent_dim, rng)?;
        Ok(Self {
            encoder: Mlp { layers },
            decoder,
            cnn,
        })
    }

    pub fn encode(&self, shapes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoder.forward(shapes)
    }

    pub fn decode(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.decoder.forward(z)
    }

    /// Mean over the batch of `J1 + λ·J2`, where `J1` is the mean squared
    /// reconstruction error per coordinate and `J2` the mean squared
    /// difference between encoder code and CNN output per latent entry.
    /// Returns the gradient with respect to every parameter.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_loss<R: Rng + ?Sized>(
        &self,
        shapes: ArrayView2<'_, f64>,
        images: ArrayView4<'_, f64>,
        lambda: f64,
        dropout: f64,
        mode: DropoutMode,
        parallel: bool,
        rng: &mut R,
    ) -> Result<(LossBreakdown, JointNetwork)> {
        let b = shapes.nrows();
        check_dim("batch alignment", b, images.dim().0)?;
        if b == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let (z, enc_cache) = self.encoder.forward_cached(shapes)?;
        let x_hat = self.decoder.forward(z.view())?;
        let (y, cnn_cache) = self.cnn.forward_cached(images, dropout, mode, rng)?;

        let dim = shapes.ncols() as f64;
        let lat = z.ncols() as f64;
        let bf = b as f64;
        let resid = &x_hat - &shapes;
        let diff = &z - &y;
        let j1 = resid.iter().map(|r| r * r).sum::<f64>() / (dim * bf);
        let j2 = diff.iter().map(|r| r * r).sum::<f64>() / (lat * bf);
        let loss = LossBreakdown {
            j1,
            j2,
            total: j1 + lambda * j2,
        };

        let mut grad = self.zeros_like();
        let d_xhat = resid * (2.0 / (dim * bf));
        let mut dz = self
            .decoder
            .backward(z.view(), d_xhat.view(), &mut grad.decoder)?;
        if lambda != 0.0 {
            let dz2 = diff * (2.0 * lambda / (lat * bf));
            dz += &dz2;
            let dy = -dz2;
            self.cnn
                .backward(&cnn_cache, dy.view(), &mut grad.cnn, parallel)?;
        }
        self.encoder
            .backward(&enc_cache, dz.view(), &mut grad.encoder)?;
        Ok((loss, grad))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            cnn: self.cnn.zeros_like(),
        }
    }
}

impl Parameterized for JointNetwork {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t.extend(self.cnn.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t.extend(self.cnn.tensors_mut());
        t
    }
}

/// Centers shapes on the training mean and divides by one global RMS scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeNormalizer {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl ShapeNormalizer {
    pub fn fit(shapes: ArrayView2<'_, f64>) -> Result<Self> {
        if shapes.nrows() == 0 {
            return Err(Error::InvalidConfig("cannot normalize an empty set".into()));
        }
        let mean = shapes.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let mut ss = 0.0;
        for row in shapes.rows() {
            for (v, m) in row.iter().zip(&mean) {
                ss += (v - m) * (v - m);
            }
        }
        let rms = (ss / shapes.len() as f64).sqrt();
        Ok(Self {
            mean,
            scale: if rms > 0.0 && rms.is_finite() {
                rms
            } else {
                1.0
            },
        })
    }

    pub fn normalize(&self, shapes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("shape vector length", self.mean.len(), shapes.ncols())?;
        let mut out = shapes.to_owned();
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v = (*v - m) / self.scale;
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, shapes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("shape vector length", self.mean.len(), shapes.ncols())?;
        let mut out = shapes.to_owned();
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v = m + self.scale * *v;
            }
        }
        Ok(out)
    }
}

/// Stacks images into a `(batch, 1, size, size)` array.
pub fn images_to_array(images: &[&GrayImage], size: usize) -> Result<Array4<f64>> {
    let mut out = Array4::zeros((images.len(), 1, size, size));
    for (i, img) in images.iter().enumerate() {
        check_dim("image width", size, img.width())?;
        check_dim("image height", size, img.height())?;
        out.slice_mut(s![i, 0, .., ..])
            .assign(&ArrayView2::from_shape((size, size), img.pixels()).expect("square image"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            shape_dim: 9,
            latent_dim: 3,
            encoder_hidden: vec![6],
            image_size: 8,
            conv_channels: vec![2, 3],
            conv_kernel: 3,
            conv_stride: 2,
            fc_hidden: 5,
        }
    }

    fn tiny_batch(rng: &mut ChaCha8Rng, b: usize) -> (Array2<f64>, Array4<f64>) {
        let x = Array2::from_shape_fn((b, 9), |_| rng.random_range(-1.0..1.0));
        let imgs = Array4::from_shape_fn((b, 1, 8, 8), |_| rng.random_range(0.0..1.0));
        (x, imgs)
    }

    #[test]
    fn desk_spec_shapes() {
        let spec = NetworkSpec::desk(4563, 32);
        assert_eq!(spec.conv_output(), (32, 4, 4));
        spec.validate().unwrap();
        let bad = NetworkSpec {
            image_size: 0,
            ..tiny_spec()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decoupled_loss_leaves_cnn_gradient_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = JointNetwork::new(&tiny_spec(), &mut rng).unwrap();
        let (x, imgs) = tiny_batch(&mut rng, 4);
        let (loss, grad) = net
            .joint_loss(
                x.view(),
                imgs.view(),
                0.0,
                0.6,
                DropoutMode::Train,
                false,
                &mut rng,
            )
            .unwrap();
        assert!(loss.j2 > 0.0);
        assert_eq!(loss.total, loss.j1);
        assert!(grad.cnn.flatten().iter().all(|&g| g == 0.0));
        assert!(grad.encoder.flatten().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn perfect_identity_setup_has_zero_loss() {
        let spec = NetworkSpec {
            shape_dim: 3,
            latent_dim: 3,
            encoder_hidden: vec![],
            ..tiny_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = JointNetwork::new(&spec, &mut rng).unwrap();
        net.encoder.layers[0] = Dense::zeros(3, 3);
        net.decoder = Dense::zeros(3, 3);
        for i in 0..3 {
            net.encoder.layers[0].weight.data_mut()[i * 4] = 1.0;
            net.decoder.weight.data_mut()[i * 4] = 1.0;
        }
        let x = ndarray::arr2(&[[0.5, -1.0, 2.0]]);
        net.cnn.head = Dense::zeros(spec.fc_hidden, 3);
        net.cnn
            .head
            .bias
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let imgs = Array4::zeros((1, 1, 8, 8));
        let (loss, _) = net
            .joint_loss(
                x.view(),
                imgs.view(),
                1.0,
                0.0,
                DropoutMode::Eval,
                false,
                &mut rng,
            )
            .unwrap();
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn full_stack_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = JointNetwork::new(&tiny_spec(), &mut rng).unwrap();
        let (x, imgs) = tiny_batch(&mut rng, 2);
        let mut frozen = ChaCha8Rng::seed_from_u64(0);
        let (_, grad) = net
            .joint_loss(
                x.view(),
                imgs.view(),
                0.7,
                0.0,
                DropoutMode::Train,
                false,
                &mut frozen,
            )
            .unwrap();
        let report = gradient_check(&net.flatten(), &grad.flatten(), 1e-6, |p| {
            let mut n = net.clone();
            n.load_flat(p).unwrap();
            n.joint_loss(
                x.view(),
                imgs.view(),
                0.7,
                0.0,
                DropoutMode::Train,
                false,
                &mut frozen,
            )
            .unwrap()
            .0
            .total
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn normalizer_round_trip() {
        let x = ndarray::arr2(&[[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]);
        let norm = ShapeNormalizer::fit(x.view()).unwrap();
        assert_eq!(norm.mean, vec![2.0, 2.0, 2.0]);
        let back = norm
            .denormalize(norm.normalize(x.view()).unwrap().view())
            .unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = ndarray::arr2(&[[1.0, 1.0, 1.0]]);
        assert_eq!(ShapeNormalizer::fit(flat.view()).unwrap().scale, 1.0);
    }
}
