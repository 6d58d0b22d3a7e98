//! Image → latent → shape.

use std::path::{Path, PathBuf};

use ndarray::ArrayView4;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::image::GrayImage;
use crate::io_util::{create_dir, write_atomic};
use crate::ply;
use crate::shape::{LatentCode, PointCloud};
use crate::train::TrainedModel;

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub id: usize,
    /// CNN output.
    pub y: LatentCode,
    /// `decode(y)` in model units.
    pub cloud: PointCloud,
}

/// Runs the CNN in eval mode and decodes its output through the learned basis.
pub fn reconstruct(
    id: usize,
    image: &GrayImage,
    trained: &TrainedModel,
) -> Result<ReconstructionResult> {
    let size = trained.spec.image_size;
    check_dim("image width", size, image.width())?;
    check_dim("image height", size, image.height())?;
    let x = ArrayView4::from_shape((1, 1, size, size), image.pixels()).expect("validated dims");
    let y = trained.predict_latents(x)?;
    let y = LatentCode(y.into_raw_vec_and_offset().0);
    let cloud = trained.decode(&y)?;
    Ok(ReconstructionResult { id, y, cloud })
}

/// Order-preserving; each item is computed exactly as [`reconstruct`] would.
pub fn reconstruct_batch(
    images: &[(usize, &GrayImage)],
    trained: &TrainedModel,
) -> Result<Vec<ReconstructionResult>> {
    images
        .par_iter()
        .map(|&(id, img)| reconstruct(id, img, trained))
        .collect()
}

pub fn ply_file_name(id: usize) -> String {
    format!("{id:05}.ply")
}

/// Writes `NNNNN.ply` per result (with `faces` when given) and
/// `latents.csv` (`id,y0,…`). Returns the PLY paths in input order.
pub fn export_results(
    results: &[ReconstructionResult],
    faces: Option<&[[usize; 3]]>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut paths = Vec::with_capacity(results.len());
    for r in results {
        let p = out_dir.join(ply_file_name(r.id));
        match faces {
            Some(f) => write_atomic(&p, ply::encode(&r.cloud, f).as_bytes())?,
            None => ply::write_cloud(&p, &r.cloud)?,
        }
        paths.push(p);
    }
    let d = results.first().map_or(0, |r| r.y.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![r.id.to_string()];
        row.extend(r.y.as_slice().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("CSV", e.to_string()))?;
    write_atomic(&out_dir.join("latents.csv"), &bytes)?;
    Ok(paths)
}
