//! Synthetic corpus: sampled coefficients, shapes, poses and rendered images.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! manifest.json    counts, split sizes, format version
//! generator.json   ground-truth model config, render config, max yaw
//! shapes.f32       count × 3n little-endian f32
//! coeffs.f32       count × d_true little-endian f32
//! poses.csv        id,yaw_deg
//! images/NNNNN.pgm
//! ```
//!
//! Ids `0..split_train` form the training split, the rest the test split.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io_util::{create_dir, read_file};
use crate::model::images_to_array;
use crate::render::{render_posed, Pose, RenderConfig};
use crate::shape::{
    build_ground_truth_model, sample_coefficients, synthesize_shape, GroundTruthConfig, LatentCode,
    PointCloud, ShapeModel, TriangleMesh,
};
use crate::train::TrainingSet;

pub const FORMAT_VERSION: u32 = 1;

/// The procedural shape model together with how its samples are rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: GroundTruthConfig,
    pub model: ShapeModel,
    pub mesh: TriangleMesh,
    pub render: RenderConfig,
}

impl GroundTruth {
    pub fn build(config: &GroundTruthConfig) -> Result<Self> {
        let (model, mesh) = build_ground_truth_model(config)?;
        let render = RenderConfig::for_mesh(&mesh);
        Ok(Self {
            config: config.clone(),
            model,
            mesh,
            render,
        })
    }

    pub fn render(&self, shape: &PointCloud, pose: Pose) -> Result<GrayImage> {
        render_posed(shape, pose, &self.mesh, &self.render)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    /// Fraction of samples rendered at a random yaw; the rest are frontal.
    pub pose_fraction: f64,
    /// Posed yaws are uniform in `[-max_yaw, max_yaw]` degrees.
    pub max_yaw: f64,
    pub seed: u64,
    /// Fraction held out as the test split (at least one sample each side).
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            pose_fraction: 0.2,
            max_yaw: 90.0,
            seed: 1,
            test_fraction: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::InvalidConfig("count must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.pose_fraction) {
            return Err(Error::InvalidConfig(format!(
                "pose_fraction {} outside [0, 1]",
                self.pose_fraction
            )));
        }
        if !(0.0..=90.0).contains(&self.max_yaw) {
            return Err(Error::InvalidConfig(format!(
                "max_yaw {} outside [0, 90]",
                self.max_yaw
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "test_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn posed_count(&self) -> usize {
        (self.pose_fraction * self.count as f64).round() as usize
    }

    pub fn split(&self) -> (usize, usize) {
        let test =
            ((self.test_fraction * self.count as f64).round() as usize).clamp(1, self.count - 1);
        (self.count - test, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub d_true: usize,
    /// Vertices per shape.
    pub n: usize,
    pub resolution: usize,
    pub pose_fraction: f64,
    /// Samples rendered at a drawn yaw, `round(pose_fraction · count)`.
    pub posed: usize,
    pub seed: u64,
    pub split_train: usize,
    pub split_test: usize,
    pub version: u32,
}

/// Everything needed to rebuild the generating model and renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub ground_truth: GroundTruthConfig,
    pub render: RenderConfig,
    pub max_yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub z_true: LatentCode,
    /// Unposed shape.
    pub shape: PointCloud,
    pub pose: Pose,
    pub image: GrayImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Serialize, Deserialize)]
struct PoseRow {
    id: usize,
    yaw_deg: f64,
}

/// Draws coefficients and poses and renders every sample in memory.
///
/// Coefficients are rounded to `f32` before synthesis so the stored
/// coefficients regenerate the stored images exactly.
pub fn generate_samples(gt: &GroundTruth, cfg: &DatasetConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let codes = sample_coefficients(&gt.model, cfg.count, cfg.seed)?;
    let mut yaws = vec![0.0; cfg.count];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut ids: Vec<usize> = (0..cfg.count).collect();
    ids.shuffle(&mut rng);
    for &id in &ids[..cfg.posed_count()] {
        yaws[id] = if cfg.max_yaw > 0.0 {
            rng.random_range(-cfg.max_yaw..=cfg.max_yaw)
        } else {
            0.0
        };
    }
    codes
        .into_par_iter()
        .zip(yaws)
        .enumerate()
        .map(|(id, (z, yaw))| {
            let z = LatentCode(z.0.iter().map(|&v| v as f32 as f64).collect());
            let shape = synthesize_shape(&gt.model, &z)?;
            let pose = Pose::new(yaw)?;
            let image = gt.render(&shape, pose)?;
            Ok(SampleRecord {
                id,
                z_true: z,
                shape,
                pose,
                image,
            })
        })
        .collect()
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn image_file_name(id: usize) -> String {
    format!("{id:05}.pgm")
}

fn write_files(
    dir: &Path,
    gt: &GroundTruth,
    cfg: &DatasetConfig,
    records: &[SampleRecord],
) -> Result<DatasetManifest> {
    let (split_train, split_test) = cfg.split();
    let manifest = DatasetManifest {
        count: records.len(),
        d_true: gt.model.d(),
        n: gt.model.n(),
        resolution: gt.render.resolution,
        pose_fraction: cfg.pose_fraction,
        posed: cfg.posed_count(),
        seed: cfg.seed,
        split_train,
        split_test,
        version: FORMAT_VERSION,
    };
    let info = GeneratorInfo {
        ground_truth: gt.config.clone(),
        render: gt.render.clone(),
        max_yaw: cfg.max_yaw,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write("manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    write("generator.json", &serde_json::to_vec_pretty(&info)?)?;
    write(
        "shapes.f32",
        &f32_bytes(records.iter().flat_map(|r| r.shape.as_flat())),
    )?;
    write(
        "coeffs.f32",
        &f32_bytes(records.iter().flat_map(|r| r.z_true.as_slice())),
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(PoseRow {
            id: r.id,
            yaw_deg: r.pose.yaw_deg(),
        })?;
    }
    write(
        "poses.csv",
        &w.into_inner()
            .map_err(|e| Error::format("CSV", e.to_string()))?,
    )?;
    let images = dir.join("images");
    create_dir(&images)?;
    for r in records {
        let p = images.join(image_file_name(r.id));
        std::fs::write(&p, r.image.encode_pgm()).map_err(|e| Error::io(p, e))?;
    }
    Ok(manifest)
}

/// Generates the corpus and writes it to `out`.
///
/// Files are assembled in a temporary sibling directory which is renamed into
/// place at the end, so a failure leaves nothing behind. An existing dataset
/// at `out` is replaced; any other non-empty directory is refused.
pub fn generate_dataset(
    gt: &GroundTruth,
    cfg: &DatasetConfig,
    out: &Path,
) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    cfg.validate()?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if out.exists() {
        let is_empty = std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_none();
        if !is_empty && !out.join("manifest.json").exists() {
            return Err(Error::InvalidConfig(format!(
                "{} exists and is not a dataset directory",
                out.display()
            )));
        }
    }
    create_dir(&parent)?;
    let staging = tempfile::Builder::new()
        .prefix(".isrm-dataset-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let records = generate_samples(gt, cfg)?;
    let manifest = write_files(staging.path(), gt, cfg, &records)?;
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    std::fs::rename(staging.path(), out).map_err(|e| Error::io(out, e))?;
    // the staging path no longer exists; dropping the guard is a no-op
    let _ = staging.keep();
    Ok((manifest, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub generator: GeneratorInfo,
    pub records: Vec<SampleRecord>,
    /// Hex SHA-256 of `manifest.json`.
    pub source_hash: String,
}

fn read_f32(path: &Path, expected_values: usize) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    let expected = expected_values * 4;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_bytes = read_file(&dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "dataset",
            found: manifest.version,
            supported: FORMAT_VERSION,
        });
    }
    if manifest.count == 0 {
        return Err(Error::InvalidConfig("dataset manifest has count 0".into()));
    }
    if manifest.split_train + manifest.split_test != manifest.count {
        return Err(Error::InvalidConfig(
            "manifest split sizes do not sum to count".into(),
        ));
    }
    if !(0.0..=1.0).contains(&manifest.pose_fraction) || manifest.posed > manifest.count {
        return Err(Error::InvalidConfig(
            "manifest pose_fraction outside [0, 1]".into(),
        ));
    }
    let generator: GeneratorInfo =
        serde_json::from_slice(&read_file(&dir.join("generator.json"))?)?;
    let (count, dim, d) = (manifest.count, 3 * manifest.n, manifest.d_true);
    let shapes = read_f32(&dir.join("shapes.f32"), count * dim)?;
    let coeffs = read_f32(&dir.join("coeffs.f32"), count * d)?;
    let poses_path = dir.join("poses.csv");
    let pose_bytes = read_file(&poses_path)?;
    let rows: Vec<PoseRow> = csv::Reader::from_reader(pose_bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    if rows.len() != count {
        return Err(Error::format(
            "poses.csv",
            format!("{} rows, manifest count {count}", rows.len()),
        ));
    }
    let records = rows
        .into_par_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.id != i {
                return Err(Error::format(
                    "poses.csv",
                    format!("row {i} has id {}", row.id),
                ));
            }
            let image = GrayImage::read_pgm(&dir.join("images").join(image_file_name(i)))?;
            if image.width() != manifest.resolution || image.height() != manifest.resolution {
                return Err(Error::DimensionMismatch {
                    context: "dataset image size",
                    expected: manifest.resolution,
                    actual: image.width(),
                });
            }
            Ok(SampleRecord {
                id: i,
                z_true: LatentCode(coeffs[i * d..(i + 1) * d].to_vec()),
                shape: PointCloud::from_flat(shapes[i * dim..(i + 1) * dim].to_vec())?,
                pose: Pose::new(row.yaw_deg)?,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        generator,
        records,
        source_hash: Sha256::digest(&manifest_bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
    })
}

impl Dataset {
    pub fn iter(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter()
    }

    pub fn is_train(&self, id: usize) -> bool {
        id < self.manifest.split_train
    }

    pub fn split(&self, split: Split) -> &[SampleRecord] {
        let t = self.manifest.split_train;
        match split {
            Split::Train => &self.records[..t],
            Split::Test => &self.records[t..],
            Split::All => &self.records,
        }
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let mut gt = GroundTruth::build(&self.generator.ground_truth)?;
        gt.render = self.generator.render.clone();
        Ok(gt)
    }

    pub fn training_set(&self, split: Split) -> Result<TrainingSet> {
        training_set(self.split(split), self.source_hash.clone())
    }
}

pub fn training_set(records: &[SampleRecord], source_hash: String) -> Result<TrainingSet> {
    let pairs: Vec<(&PointCloud, &GrayImage)> =
        records.iter().map(|r| (&r.shape, &r.image)).collect();
    TrainingSet::from_pairs(&pairs, source_hash)
}

/// `(batch, 1, s, s)` array of the records' images.
pub fn image_stack(records: &[SampleRecord]) -> Result<ndarray::Array4<f64>> {
    let size = records.first().map_or(0, |r| r.image.width());
    let imgs: Vec<&GrayImage> = records.iter().map(|r| &r.image).collect();
    images_to_array(&imgs, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gt() -> GroundTruth {
        GroundTruth::build(&GroundTruthConfig {
            n_grid: 12,
            d_true: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg(count: usize, pose_fraction: f64) -> DatasetConfig {
        DatasetConfig {
            count,
            pose_fraction,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn posed_fraction_is_exact() {
        let recs = generate_samples(&small_gt(), &cfg(10, 0.2)).unwrap();
        let posed = recs.iter().filter(|r| r.pose.yaw_deg() != 0.0).count();
        assert_eq!(posed, 2);
        assert!(recs.iter().all(|r| r.pose.yaw_deg().abs() <= 90.0));
        let recs = generate_samples(&small_gt(), &cfg(10, 0.0)).unwrap();
        assert!(recs.iter().all(|r| r.pose.yaw_deg() == 0.0));
    }

    #[test]
    fn rejects_bad_configs() {
        let gt = small_gt();
        assert!(generate_samples(&gt, &cfg(1, 0.2)).is_err());
        assert!(generate_samples(&gt, &cfg(10, 1.5)).is_err());
        assert!(generate_samples(
            &gt,
            &DatasetConfig {
                max_yaw: 120.0,
                ..cfg(10, 0.2)
            }
        )
        .is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        for count in [2, 3, 10, 2000] {
            let (tr, te) = cfg(count, 0.2).split();
            assert_eq!(tr + te, count);
            assert!(tr >= 1 && te >= 1);
        }
        assert_eq!(cfg(2000, 0.2).split(), (1800, 200));
    }

    #[test]
    fn generate_load_round_trip() {
        let gt = small_gt();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let (manifest, mem) = generate_dataset(&gt, &cfg(6, 0.5), &out).unwrap();
        assert_eq!(manifest.n, 144);
        assert_eq!(manifest.posed, 3);
        let ds = load_dataset(&out).unwrap();
        assert_eq!(ds.manifest, manifest);
        for (a, b) in mem.iter().zip(&ds.records) {
            assert_eq!(a.z_true, b.z_true);
            assert_eq!(a.pose, b.pose);
            assert_eq!(a.image.quantized(), b.image);
            for (x, y) in a.shape.as_flat().iter().zip(b.shape.as_flat()) {
                assert!((x - y).abs() <= f32::EPSILON as f64 * x.abs().max(1.0));
            }
        }
        // stored coefficients regenerate stored images exactly
        let gt2 = ds.ground_truth().unwrap();
        for r in &ds.records {
            let shape = synthesize_shape(&gt2.model, &r.z_true).unwrap();
            let img = gt2.render(&shape, r.pose).unwrap();
            assert_eq!(img, mem[r.id].image);
            assert_eq!(img.quantized(), r.image);
        }
        assert_eq!(
            ds.split(Split::Train).len() + ds.split(Split::Test).len(),
            6
        );
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let gt = small_gt();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_dataset(&gt, &cfg(5, 0.4), &a).unwrap();
        generate_dataset(&gt, &cfg(5, 0.4), &b).unwrap();
        for name in [
            "manifest.json",
            "generator.json",
            "shapes.f32",
            "coeffs.f32",
            "poses.csv",
            "images/00003.pgm",
        ] {
            assert_eq!(
                std::fs::read(a.join(name)).unwrap(),
                std::fs::read(b.join(name)).unwrap(),
                "{name}"
            );
        }
        // overwriting an existing dataset works and leaves no staging dirs
        generate_dataset(&gt, &cfg(5, 0.4), &a).unwrap();
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 2);
    }

    #[test]
    fn load_errors_are_distinct() {
        let gt = small_gt();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        generate_dataset(&gt, &cfg(4, 0.0), &out).unwrap();

        let shapes = out.join("shapes.f32");
        let bytes = std::fs::read(&shapes).unwrap();
        std::fs::write(&shapes, &bytes[..bytes.len() - 10]).unwrap();
        match load_dataset(&out) {
            Err(Error::LengthMismatch {
                expected, actual, ..
            }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 10);
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&shapes, &bytes).unwrap();

        std::fs::remove_file(out.join("images/00002.pgm")).unwrap();
        assert!(matches!(load_dataset(&out), Err(Error::MissingFile(_))));

        let m = out.join("manifest.json");
        let text = std::fs::read_to_string(&m).unwrap();
        std::fs::write(&m, text.replace("\"version\": 1", "\"version\": 7")).unwrap();
        assert!(matches!(
            load_dataset(&out),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
        std::fs::write(&m, text.replace("\"count\": 4", "\"count\": 0")).unwrap();
        assert!(matches!(load_dataset(&out), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            load_dataset(&dir.path().join("none")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn refuses_foreign_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert!(generate_dataset(&small_gt(), &cfg(3, 0.0), dir.path()).is_err());
        assert!(dir.path().join("notes.txt").exists());
    }
}
