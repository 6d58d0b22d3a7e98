//! Simultaneous training of the autoencoder and the image regressor.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::image::GrayImage;
use crate::model::{images_to_array, JointNetwork, LossBreakdown, NetworkSpec, ShapeNormalizer};
use crate::nn::{AdamConfig, AdamState, DropoutMode, Parameterized};
use crate::shape::{synthesize_shape, LatentCode, PointCloud, ShapeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the coupling term `J2`.
    pub lambda_couple: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Dropout after `Fc4`, training only.
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `F32` rounds every parameter to single precision after each update and
    /// stores the checkpoint as `f32`.
    pub precision: Precision,
    /// Strictly sequential computation. When false, per-sample convolution
    /// gradients are computed in parallel (still reduced in sample order).
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            lambda_couple: 1.0,
            epochs: 10,
            seed: 0,
            weight_decay: 0.0005,
            dropout: 0.6,
            beta1: 0.9,
            beta2: 0.999,
            precision: Precision::F64,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be > 0".into()));
        }
        if !(self.lambda_couple >= 0.0 && self.lambda_couple.is_finite()) {
            return Err(Error::InvalidConfig("lambda_couple must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Paired shape vectors (model units) and images.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub shapes: Array2<f64>,
    pub images: Array4<f64>,
    /// Identifies the data source; stored in checkpoints.
    pub source_hash: String,
}

impl TrainingSet {
    pub fn new(shapes: Array2<f64>, images: Array4<f64>, source_hash: String) -> Result<Self> {
        check_dim("training pairs", shapes.nrows(), images.dim().0)?;
        if shapes.nrows() == 0 {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        if images.dim().1 != 1 || images.dim().2 != images.dim().3 {
            return Err(Error::InvalidConfig(
                "images must be single-channel squares".into(),
            ));
        }
        Ok(Self {
            shapes,
            images,
            source_hash,
        })
    }

    pub fn from_pairs(pairs: &[(&PointCloud, &GrayImage)], source_hash: String) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidConfig("training set is empty".into()))?;
        let dim = first.0.as_flat().len();
        let size = first.1.width();
        let mut shapes = Array2::zeros((pairs.len(), dim));
        for (i, (cloud, _)) in pairs.iter().enumerate() {
            check_dim("shape vector length", dim, cloud.as_flat().len())?;
            shapes.row_mut(i).assign(&ndarray::aview1(cloud.as_flat()));
        }
        let images: Vec<&GrayImage> = pairs.iter().map(|p| p.1).collect();
        Self::new(shapes, images_to_array(&images, size)?, source_hash)
    }

    pub fn len(&self) -> usize {
        self.shapes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape_dim(&self) -> usize {
        self.shapes.ncols()
    }

    pub fn image_size(&self) -> usize {
        self.images.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub j1: f64,
    pub j2: f64,
    pub total: f64,
}

/// Mean squared coordinate difference, `Σ (x_i − x̂_i)² / len`.
pub fn loss_j1(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_dim("J1 operand length", x.len(), x_hat.len())?;
    if x.is_empty() {
        return Err(Error::InvalidConfig("J1 of empty vectors".into()));
    }
    Ok(x.iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// Mean squared latent difference, `Σ (z_i − y_i)² / d`.
pub fn loss_j2(z: &LatentCode, y: &LatentCode) -> Result<f64> {
    check_dim("J2 operand length", z.len(), y.len())?;
    loss_j1(z.as_slice(), y.as_slice())
}

/// A trained network with its normalization and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub network: JointNetwork,
    pub normalizer: ShapeNormalizer,
    pub source_hash: String,
    pub initial_loss: LossBreakdown,
    pub history: Vec<EpochLog>,
    basis: ShapeModel,
}

impl TrainedModel {
    pub fn new(
        spec: NetworkSpec,
        config: TrainConfig,
        network: JointNetwork,
        normalizer: ShapeNormalizer,
        source_hash: String,
        initial_loss: LossBreakdown,
        history: Vec<EpochLog>,
    ) -> Result<Self> {
        let basis = learned_basis(&network, &normalizer)?;
        Ok(Self {
            spec,
            config,
            network,
            normalizer,
            source_hash,
            initial_loss,
            history,
            basis,
        })
    }

    pub fn final_loss(&self) -> Option<EpochLog> {
        self.history.last().copied()
    }

    /// The decoder as a linear shape model (mean = bias, basis = weights, in
    /// model units).
    pub fn shape_model(&self) -> &ShapeModel {
        &self.basis
    }

    /// Affine decode of a latent code into model units.
    pub fn decode(&self, z: &LatentCode) -> Result<PointCloud> {
        synthesize_shape(&self.basis, z)
    }

    /// Decode through the network layer and the normalizer rather than the
    /// extracted basis; agrees with [`decode`](Self::decode) up to rounding.
    pub fn decode_via_network(&self, z: &LatentCode) -> Result<PointCloud> {
        check_dim("latent code length", self.spec.latent_dim, z.len())?;
        let zz = ArrayView2::from_shape((1, z.len()), z.as_slice()).expect("row");
        let out = self
            .normalizer
            .denormalize(self.network.decode(zz)?.view())?;
        PointCloud::from_flat(out.into_raw_vec_and_offset().0)
    }

    pub fn encode(&self, shape: &PointCloud) -> Result<LatentCode> {
        let flat = shape.as_flat();
        let x = ArrayView2::from_shape((1, flat.len()), flat).expect("row");
        let z = self.network.encode(self.normalizer.normalize(x)?.view())?;
        Ok(LatentCode(z.into_raw_vec_and_offset().0))
    }

    /// Eval-mode CNN outputs for a `(batch, 1, size, size)` stack.
    pub fn predict_latents(&self, images: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
        self.network.cnn.predict(images)
    }
}

fn learned_basis(network: &JointNetwork, norm: &ShapeNormalizer) -> Result<ShapeModel> {
    let w = network.decoder.weight.view2();
    let b = network.decoder.bias.data();
    let mean = norm
        .mean
        .iter()
        .zip(b)
        .map(|(m, bi)| m + norm.scale * bi)
        .collect();
    let basis = (0..w.ncols())
        .map(|j| w.column(j).iter().map(|v| norm.scale * v).collect())
        .collect();
    ShapeModel::new(mean, basis, vec![1.0; w.ncols()])
}

/// Decoder bias becomes the mean shape and decoder weight columns the basis.
pub fn extract_shape_model(trained: &TrainedModel) -> ShapeModel {
    trained.basis.clone()
}

fn round_f32(net: &mut impl Parameterized) {
    for t in net.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Mean losses over the whole set in eval mode (no dropout), in batches.
pub fn evaluate_losses(
    network: &JointNetwork,
    normalized: ArrayView2<'_, f64>,
    images: ArrayView4<'_, f64>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let n = normalized.nrows();
    let mut acc = LossBreakdown::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let chunk = 128;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let (l, _) = network.joint_loss(
            normalized.slice(s![start..end, ..]),
            images.slice(s![start..end, .., .., ..]),
            lambda,
            0.0,
            DropoutMode::Eval,
            false,
            &mut rng,
        )?;
        let w = (end - start) as f64 / n as f64;
        acc.j1 += w * l.j1;
        acc.j2 += w * l.j2;
        acc.total += w * l.total;
    }
    Ok(acc)
}

pub fn train_joint(
    data: &TrainingSet,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    train_joint_with(data, spec, cfg, |_| {})
}

/// Shuffled mini-batch Adam on the joint loss. `on_epoch` sees each epoch's
/// mean training losses.
pub fn train_joint_with(
    data: &TrainingSet,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedModel> {
    let fit = fit_network(data, spec, cfg, on_epoch)?;
    TrainedModel::new(
        spec.clone(),
        cfg.clone(),
        fit.network,
        fit.normalizer,
        data.source_hash.clone(),
        fit.initial_loss,
        fit.history,
    )
}

/// Raw result of the optimization loop, for data that is not a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedNetwork {
    pub network: JointNetwork,
    pub normalizer: ShapeNormalizer,
    pub initial_loss: LossBreakdown,
    pub history: Vec<EpochLog>,
}

/// The training loop behind [`train_joint`]; `data.shapes` may have any width.
pub fn fit_network(
    data: &TrainingSet,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FittedNetwork> {
    cfg.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    check_dim(
        "network shape_dim vs data",
        spec.shape_dim,
        data.shape_dim(),
    )?;
    check_dim(
        "network image_size vs data",
        spec.image_size,
        data.image_size(),
    )?;

    let mut normalizer = ShapeNormalizer::fit(data.shapes.view())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut network = JointNetwork::new(spec, &mut init_rng)?;
    if cfg.precision == Precision::F32 {
        for m in &mut normalizer.mean {
            *m = *m as f32 as f64;
        }
        normalizer.scale = normalizer.scale as f32 as f64;
        round_f32(&mut network);
    }
    let shapes = normalizer.normalize(data.shapes.view())?;
    let images = data.images.view();
    let initial_loss = evaluate_losses(&network, shapes.view(), images, cfg.lambda_couple)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(cfg.adam(), &network.tensors())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let dim = data.shape_dim();
    let size = data.image_size();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (batch_id, ids) in order.chunks(cfg.batch_size).enumerate() {
            let mut xb = Array2::zeros((ids.len(), dim));
            let mut ib = Array4::zeros((ids.len(), 1, size, size));
            for (row, &id) in ids.iter().enumerate() {
                xb.row_mut(row).assign(&shapes.row(id));
                ib.slice_mut(s![row, .., .., ..])
                    .assign(&images.slice(s![id, .., .., ..]));
            }
            let (loss, grad) = network.joint_loss(
                xb.view(),
                ib.view(),
                cfg.lambda_couple,
                cfg.dropout,
                DropoutMode::Train,
                !cfg.deterministic,
                &mut rng,
            )?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_id,
                });
            }
            adam.step(&mut network.tensors_mut(), &grad.tensors())?;
            if cfg.precision == Precision::F32 {
                round_f32(&mut network);
            }
            let w = ids.len() as f64;
            sums.j1 += w * loss.j1;
            sums.j2 += w * loss.j2;
            sums.total += w * loss.total;
        }
        let n = data.len() as f64;
        let log = EpochLog {
            epoch,
            j1: sums.j1 / n,
            j2: sums.j2 / n,
            total: sums.total / n,
        };
        log::debug!(
            "epoch {epoch}: j1 {:.6} j2 {:.6} total {:.6}",
            log.j1,
            log.j2,
            log.total
        );
        on_epoch(&log);
        history.push(log);
    }

    Ok(FittedNetwork {
        network,
        normalizer,
        initial_loss,
        history,
    })
}

/// Eval-mode losses of `model` on `data` (normalized with the model's statistics).
pub fn model_losses(model: &TrainedModel, data: &TrainingSet) -> Result<LossBreakdown> {
    let shapes = model.normalizer.normalize(data.shapes.view())?;
    evaluate_losses(
        &model.network,
        shapes.view(),
        data.images.view(),
        model.config.lambda_couple,
    )
}
