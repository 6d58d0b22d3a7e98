//! Corpus evaluation: align, measure, aggregate, and write CSV/JSON/heatmaps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, SampleRecord};
use crate::error::{check_dim, Error, Result};
use crate::eval::metrics::{per_vertex_mse, scale_map_01, VertexErrorMap};
use crate::eval::normals::{
    normal_angle_distribution, quantile, NormalAngleDistribution, DEFAULT_ANGLE_BINS,
};
use crate::eval::procrustes::procrustes_align;
use crate::image::GrayImage;
use crate::io_util::{create_dir, write_atomic};
use crate::reconstruct::reconstruct;
use crate::render::{Pose, Viewport};
use crate::shape::{synthesize_shape, LatentCode, PointCloud, TriangleMesh};
use crate::train::TrainedModel;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: usize,
    pub mean_mse: f64,
    pub mean_normal_angle_deg: f64,
    pub p95_angle: f64,
    /// Squared errors after alignment, with the 0–1 scaled copy.
    pub errors: VertexErrorMap,
    pub angles: NormalAngleDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub corpus_mean_mse: f64,
    pub mean_normal_angle_deg: f64,
    pub median_normal_angle_deg: f64,
    pub p95_normal_angle_deg: f64,
    /// Pooled over every vertex of every sample.
    pub angle_histogram: Vec<usize>,
    /// Corpus mean MSE of predicting the training mean shape for every input.
    pub mean_shape_baseline_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub summary: EvalSummary,
}

/// Aligns `prediction` to `truth` and measures per-vertex errors and normal
/// angles over `topology`'s triangles.
pub fn evaluate_sample(
    id: usize,
    prediction: &PointCloud,
    truth: &PointCloud,
    topology: &TriangleMesh,
) -> Result<SampleEval> {
    let (_, aligned) = procrustes_align(prediction, truth)?;
    let errors = scale_map_01(&per_vertex_mse(&aligned, truth)?);
    let angles = normal_angle_distribution(
        &topology.with_cloud(aligned)?,
        &topology.with_cloud(truth.clone())?,
        DEFAULT_ANGLE_BINS,
    )?;
    Ok(SampleEval {
        id,
        mean_mse: errors.mean(),
        mean_normal_angle_deg: angles.mean,
        p95_angle: angles.p95,
        errors,
        angles,
    })
}

fn summarize(samples: &[SampleEval]) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("nothing to evaluate".into()));
    }
    let k = samples.len() as f64;
    let corpus_mean_mse = samples.iter().map(|s| s.mean_mse).sum::<f64>() / k;
    let mut pooled: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.angles.angles_deg.iter().copied())
        .collect();
    let mean_normal_angle_deg = pooled.iter().sum::<f64>() / pooled.len() as f64;
    pooled.sort_by(f64::total_cmp);
    let mut angle_histogram = vec![0; samples[0].angles.histogram.len()];
    for s in samples {
        for (h, c) in angle_histogram.iter_mut().zip(&s.angles.histogram) {
            *h += c;
        }
    }
    Ok(EvalSummary {
        count: samples.len(),
        corpus_mean_mse,
        mean_normal_angle_deg,
        median_normal_angle_deg: quantile(&pooled, 0.5),
        p95_normal_angle_deg: quantile(&pooled, 0.95),
        angle_histogram,
        mean_shape_baseline_mse: None,
    })
}

/// Evaluates `(id, prediction, truth)` triples. Samples are processed in
/// parallel; aggregation runs in input order.
pub fn evaluate_pairs(
    pairs: &[(usize, &PointCloud, &PointCloud)],
    topology: &TriangleMesh,
) -> Result<EvalReport> {
    let samples = pairs
        .par_iter()
        .map(|&(id, pred, truth)| evaluate_sample(id, pred, truth, topology))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&samples)?;
    Ok(EvalReport { samples, summary })
}

/// Corpus mean MSE of always predicting `mean`.
pub fn mean_shape_baseline(mean: &PointCloud, records: &[SampleRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("nothing to evaluate".into()));
    }
    let per = records
        .par_iter()
        .map(|r| {
            let (_, aligned) = procrustes_align(mean, &r.shape)?;
            Ok(per_vertex_mse(&aligned, &r.shape)?.mean())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Reconstructs every record from its image and scores it against the stored
/// shape; the mean-shape baseline is computed alongside.
pub fn evaluate_model(
    trained: &TrainedModel,
    records: &[SampleRecord],
    topology: &TriangleMesh,
) -> Result<EvalReport> {
    let recon = records
        .par_iter()
        .map(|r| reconstruct(r.id, &r.image, trained).map(|x| x.cloud))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = records
        .iter()
        .zip(&recon)
        .map(|(r, c)| (r.id, c, &r.shape))
        .collect();
    let mut report = evaluate_pairs(&pairs, topology)?;
    let mean = PointCloud::from_flat(trained.normalizer.mean.clone())?;
    report.summary.mean_shape_baseline_mse = Some(mean_shape_baseline(&mean, records)?);
    Ok(report)
}

/// Per-vertex values splatted at `layout`'s xy positions (max per pixel).
pub fn error_heatmap(
    layout: &PointCloud,
    values: &[f64],
    viewport: &Viewport,
    resolution: usize,
) -> Result<GrayImage> {
    check_dim("heatmap value count", layout.len(), values.len())?;
    let mut img = GrayImage::new(resolution, resolution);
    let (w, h) = (
        viewport.x_max - viewport.x_min,
        viewport.y_max - viewport.y_min,
    );
    let res = resolution as f64;
    for (p, &v) in layout.points().zip(values) {
        let col = ((p[0] - viewport.x_min) * res / w).floor();
        let row = ((viewport.y_max - p[1]) * res / h).floor();
        if !(0.0..res).contains(&col) || !(0.0..res).contains(&row) {
            continue;
        }
        let (row, col) = (row as usize, col as usize);
        for r in row.saturating_sub(1)..(row + 2).min(resolution) {
            for c in col.saturating_sub(1)..(col + 2).min(resolution) {
                if v > img.get(r, c) {
                    img.set(r, c, v);
                }
            }
        }
    }
    Ok(img)
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    id: usize,
    mean_mse: f64,
    mean_normal_angle_deg: f64,
    p95_angle: f64,
}

#[derive(Serialize, Deserialize)]
pub struct VertexRow {
    pub id: usize,
    pub vertex: usize,
    pub sq_error: f64,
    pub scaled: f64,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::format("CSV", e.to_string()))
}

/// Writes `{tag}_samples.csv`, `{tag}_vertices.csv`, `{tag}_summary.json` and
/// `images/NNNNN_err.pgm` heatmaps laid out on `gt`'s base mesh.
pub fn write_report(
    report: &EvalReport,
    gt: &GroundTruth,
    out_dir: &Path,
    tag: &str,
) -> Result<()> {
    create_dir(&out_dir.join("images"))?;
    write_atomic(
        &out_dir.join(format!("{tag}_samples.csv")),
        &csv_bytes(report.samples.iter().map(|s| SampleRow {
            id: s.id,
            mean_mse: s.mean_mse,
            mean_normal_angle_deg: s.mean_normal_angle_deg,
            p95_angle: s.p95_angle,
        }))?,
    )?;
    write_atomic(
        &out_dir.join(format!("{tag}_vertices.csv")),
        &csv_bytes(report.samples.iter().flat_map(|s| {
            let scaled = s.errors.scaled.as_deref().unwrap_or(&[]);
            s.errors
                .values
                .iter()
                .enumerate()
                .map(move |(v, &e)| VertexRow {
                    id: s.id,
                    vertex: v,
                    sq_error: e,
                    scaled: scaled.get(v).copied().unwrap_or(0.0),
                })
        }))?,
    )?;
    write_atomic(
        &out_dir.join(format!("{tag}_summary.json")),
        &serde_json::to_vec_pretty(&report.summary)?,
    )?;
    let res = 2 * gt.render.resolution;
    for s in &report.samples {
        let scaled = s.errors.scaled.as_deref().unwrap_or(&s.errors.values);
        let img = error_heatmap(gt.mesh.cloud(), scaled, &gt.render.viewport, res)?;
        img.write_pgm(&out_dir.join("images").join(format!("{:05}_err.pgm", s.id)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub angle_deg: f64,
    pub mean_mse: f64,
}

/// Renders the identity `z` at each yaw, reconstructs, aligns and measures.
pub fn pose_sweep(
    trained: &TrainedModel,
    gt: &GroundTruth,
    z: &LatentCode,
    angles: &[f64],
) -> Result<Vec<SweepPoint>> {
    let truth = synthesize_shape(&gt.model, z)?;
    angles
        .iter()
        .map(|&a| {
            let img = gt.render(&truth, Pose::new(a)?)?;
            let rec = reconstruct(0, &img, trained)?;
            let s = evaluate_sample(0, &rec.cloud, &truth, &gt.mesh)?;
            Ok(SweepPoint {
                angle_deg: a,
                mean_mse: s.mean_mse,
            })
        })
        .collect()
}

pub fn write_pose_sweep(path: &Path, points: &[SweepPoint]) -> Result<()> {
    write_atomic(path, &csv_bytes(points)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_samples, DatasetConfig};
    use crate::model::NetworkSpec;
    use crate::shape::GroundTruthConfig;
    use crate::train::{train_joint, TrainConfig};

    fn setup() -> (GroundTruth, Vec<SampleRecord>) {
        let gt = GroundTruth::build(&GroundTruthConfig {
            n_grid: 10,
            d_true: 3,
            ..Default::default()
        })
        .unwrap();
        let cfg = DatasetConfig {
            count: 12,
            seed: 4,
            ..Default::default()
        };
        let recs = generate_samples(&gt, &cfg).unwrap();
        (gt, recs)
    }

    fn tiny_model(recs: &[SampleRecord]) -> TrainedModel {
        let data = crate::dataset::training_set(recs, String::new()).unwrap();
        let spec = NetworkSpec {
            encoder_hidden: vec![8],
            conv_channels: vec![2, 4],
            fc_hidden: 8,
            latent_dim: 3,
            ..NetworkSpec::desk(data.shape_dim(), 32)
        };
        train_joint(
            &data,
            &spec,
            &TrainConfig {
                epochs: 1,
                batch_size: 6,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn oracle_pipeline_has_zero_error() {
        let (gt, recs) = setup();
        let pairs: Vec<_> = recs.iter().map(|r| (r.id, &r.shape, &r.shape)).collect();
        let rep = evaluate_pairs(&pairs, &gt.mesh).unwrap();
        assert!(rep.summary.corpus_mean_mse < 1e-18);
        assert!(rep.summary.mean_normal_angle_deg < 1e-5);
        assert_eq!(rep.summary.angle_histogram[0], 12 * 100);
    }

    #[test]
    fn summary_is_the_mean_of_samples() {
        let (gt, recs) = setup();
        let m = tiny_model(&recs[..8]);
        let rep = evaluate_model(&m, &recs[8..], &gt.mesh).unwrap();
        let mean = rep.samples.iter().map(|s| s.mean_mse).sum::<f64>() / 4.0;
        assert!((rep.summary.corpus_mean_mse - mean).abs() < 1e-12);
        assert_eq!(rep.summary.angle_histogram.iter().sum::<usize>(), 4 * 100);

        // standalone mean-shape baseline: explicit loops over aligned vertices
        let mean_shape = PointCloud::from_flat(m.normalizer.mean.clone()).unwrap();
        let mut total = 0.0;
        for r in &recs[8..] {
            let (t, _) = procrustes_align(&mean_shape, &r.shape).unwrap();
            let mut acc = 0.0;
            for i in 0..r.shape.len() {
                let p = t.apply_point(mean_shape.point(i));
                let q = r.shape.point(i);
                acc += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            }
            total += acc / r.shape.len() as f64;
        }
        let expect = total / 4.0;
        assert!((rep.summary.mean_shape_baseline_mse.unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn written_csv_recomputes_aggregates() {
        let (gt, recs) = setup();
        let m = tiny_model(&recs[..8]);
        let rep = evaluate_model(&m, &recs[8..], &gt.mesh).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&rep, &gt, dir.path(), "test").unwrap();
        let mut rdr = csv::Reader::from_path(dir.path().join("test_vertices.csv")).unwrap();
        let rows: Vec<VertexRow> = rdr.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4 * 100);
        let mut per_sample = std::collections::BTreeMap::<usize, (f64, usize)>::new();
        for r in &rows {
            let e = per_sample.entry(r.id).or_default();
            e.0 += r.sq_error;
            e.1 += 1;
        }
        let means: Vec<f64> = per_sample.values().map(|(s, n)| s / *n as f64).collect();
        let corpus = means.iter().sum::<f64>() / means.len() as f64;
        assert!((corpus - rep.summary.corpus_mean_mse).abs() < 1e-9);
        let summary: EvalSummary =
            serde_json::from_slice(&std::fs::read(dir.path().join("test_summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary, rep.summary);
        let samples = std::fs::read_to_string(dir.path().join("test_samples.csv")).unwrap();
        assert!(samples.starts_with("id,mean_mse,mean_normal_angle_deg,p95_angle\n"));
        let heat = GrayImage::read_pgm(&dir.path().join("images/00008_err.pgm")).unwrap();
        assert_eq!(heat.width(), 64);
        assert!(heat.pixels().contains(&1.0));
    }

    #[test]
    fn sweep_matches_single_sample_evaluation() {
        let (gt, recs) = setup();
        let m = tiny_model(&recs[..8]);
        assert!(pose_sweep(&m, &gt, &recs[9].z_true, &[])
            .unwrap()
            .is_empty());
        let curve = pose_sweep(&m, &gt, &recs[9].z_true, &[0.0, 30.0, 30.0, -60.0]).unwrap();
        assert_eq!(curve.len(), 4);
        assert_eq!(curve[1].mean_mse, curve[2].mean_mse);
        for p in &curve {
            let shape = synthesize_shape(&gt.model, &recs[9].z_true).unwrap();
            let pose = Pose::new(p.angle_deg).unwrap();
            let rec = SampleRecord {
                id: 9,
                z_true: recs[9].z_true.clone(),
                image: gt.render(&shape, pose).unwrap(),
                shape,
                pose,
            };
            let single = evaluate_model(&m, &[rec], &gt.mesh).unwrap();
            assert_eq!(single.summary.corpus_mean_mse, p.mean_mse);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.csv");
        write_pose_sweep(&p, &curve).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("angle_deg,mean_mse\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
