//! Direct regression baseline: the same CNN trained to output ground-truth
//! coefficients, decoded through the ground-truth basis.

use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_stack, GroundTruth, SampleRecord};
use crate::error::{check_dim, Error, Result};
use crate::eval::report::{evaluate_pairs, EvalReport, EvalSummary};
use crate::image::GrayImage;
use crate::io_util::{create_dir, write_atomic};
use crate::model::{ImageRegressor, NetworkSpec};
use crate::nn::{AdamConfig, AdamState, DropoutMode, Parameterized};
use crate::shape::{synthesize_shape, LatentCode, PointCloud};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectRegressor {
    pub cnn: ImageRegressor,
    pub initial_loss: f64,
    /// Mean training coefficient loss per epoch.
    pub history: Vec<f64>,
}

fn targets(records: &[SampleRecord]) -> Result<Array2<f64>> {
    let d = records.first().map_or(0, |r| r.z_true.len());
    let mut t = Array2::zeros((records.len(), d));
    for (i, r) in records.iter().enumerate() {
        check_dim("coefficient count", d, r.z_true.len())?;
        t.row_mut(i).assign(&ndarray::aview1(r.z_true.as_slice()));
    }
    Ok(t)
}

/// Mean over samples of `Σ (y − z)² / d`.
pub fn coefficient_loss(
    cnn: &ImageRegressor,
    images: ArrayView4<'_, f64>,
    z: ArrayView2<'_, f64>,
) -> Result<f64> {
    let y = cnn.predict(images)?;
    check_dim("coefficient targets", y.len(), z.len())?;
    Ok((&y - &z).mapv(|v| v * v).sum() / y.len().max(1) as f64)
}

/// Trains `spec`'s CNN to regress `z_true` with the joint trainer's optimizer
/// settings (batch size, lr, decay, dropout, epochs, seed).
pub fn train_direct_regression(
    records: &[SampleRecord],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<DirectRegressor> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let z = targets(records)?;
    let images = image_stack(records)?;
    check_dim("baseline image size", spec.image_size, images.dim().2)?;
    let d = z.ncols();
    let mut cnn = ImageRegressor::new(spec, d, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let initial_loss = coefficient_loss(&cnn, images.view(), z.view())?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        &cnn.tensors(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let size = spec.image_size;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (batch, ids) in order.chunks(cfg.batch_size).enumerate() {
            let mut ib = Array4::zeros((ids.len(), 1, size, size));
            let mut zb = Array2::zeros((ids.len(), d));
            for (row, &id) in ids.iter().enumerate() {
                ib.slice_mut(s![row, .., .., ..])
                    .assign(&images.slice(s![id, .., .., ..]));
                zb.row_mut(row).assign(&z.row(id));
            }
            let (y, cache) =
                cnn.forward_cached(ib.view(), cfg.dropout, DropoutMode::Train, &mut rng)?;
            let diff = &y - &zb;
            let denom = (ids.len() * d) as f64;
            let loss = diff.mapv(|v| v * v).sum() / denom;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let dout = diff.mapv(|v| 2.0 * v / denom);
            let mut grad = cnn.zeros_like();
            cnn.backward(&cache, dout.view(), &mut grad, !cfg.deterministic)?;
            adam.step(&mut cnn.tensors_mut(), &grad.tensors())?;
            sum += loss * ids.len() as f64;
        }
        let mean = sum / records.len() as f64;
        log::info!("baseline epoch {epoch}: coefficient loss {mean:.6}");
        history.push(mean);
    }
    Ok(DirectRegressor {
        cnn,
        initial_loss,
        history,
    })
}

impl DirectRegressor {
    pub fn predict(&self, image: &GrayImage) -> Result<LatentCode> {
        let x = ArrayView4::from_shape((1, 1, image.height(), image.width()), image.pixels())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(LatentCode(self.cnn.predict(x)?.into_raw_vec_and_offset().0))
    }

    pub fn reconstruct(&self, gt: &GroundTruth, image: &GrayImage) -> Result<PointCloud> {
        synthesize_shape(&gt.model, &self.predict(image)?)
    }

    pub fn loss_on(&self, records: &[SampleRecord]) -> Result<f64> {
        coefficient_loss(
            &self.cnn,
            image_stack(records)?.view(),
            targets(records)?.view(),
        )
    }
}

pub fn evaluate_baseline(
    reg: &DirectRegressor,
    gt: &GroundTruth,
    records: &[SampleRecord],
) -> Result<EvalReport> {
    let recon = records
        .iter()
        .map(|r| reg.reconstruct(gt, &r.image))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = records
        .iter()
        .zip(&recon)
        .map(|(r, c)| (r.id, c, &r.shape))
        .collect();
    evaluate_pairs(&pairs, &gt.mesh)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub joint: EvalSummary,
    pub direct: EvalSummary,
}

#[derive(Serialize)]
struct ComparisonRow {
    id: usize,
    joint_mse: f64,
    direct_mse: f64,
    joint_angle_deg: f64,
    direct_angle_deg: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    bin_lo_deg: f64,
    bin_hi_deg: f64,
    joint_count: usize,
    direct_count: usize,
}

/// Side-by-side report: `baseline_samples.csv`, `baseline_histogram.csv`,
/// `baseline_summary.json`. No winner is declared.
pub fn write_comparison(
    joint: &EvalReport,
    direct: &EvalReport,
    out_dir: &Path,
) -> Result<Comparison> {
    check_dim(
        "compared sample count",
        joint.samples.len(),
        direct.samples.len(),
    )?;
    create_dir(out_dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (a, b) in joint.samples.iter().zip(&direct.samples) {
        if a.id != b.id {
            return Err(Error::InvalidConfig(format!(
                "sample ids differ: {} vs {}",
                a.id, b.id
            )));
        }
        w.serialize(ComparisonRow {
            id: a.id,
            joint_mse: a.mean_mse,
            direct_mse: b.mean_mse,
            joint_angle_deg: a.mean_normal_angle_deg,
            direct_angle_deg: b.mean_normal_angle_deg,
        })?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("CSV", e.to_string()))?;
    write_atomic(&out_dir.join("baseline_samples.csv"), &bytes)?;

    let bins = joint.summary.angle_histogram.len();
    let width = 180.0 / bins as f64;
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..bins {
        w.serialize(HistogramRow {
            bin_lo_deg: i as f64 * width,
            bin_hi_deg: (i + 1) as f64 * width,
            joint_count: joint.summary.angle_histogram[i],
            direct_count: direct.summary.angle_histogram.get(i).copied().unwrap_or(0),
        })?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("CSV", e.to_string()))?;
    write_atomic(&out_dir.join("baseline_histogram.csv"), &bytes)?;

    let cmp = Comparison {
        joint: joint.summary.clone(),
        direct: direct.summary.clone(),
    };
    write_atomic(
        &out_dir.join("baseline_summary.json"),
        &serde_json::to_vec_pretty(&cmp)?,
    )?;
    Ok(cmp)
}
