use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::shape::PointCloud;

/// Per-vertex squared distances, optionally with a copy rescaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexErrorMap {
    pub values: Vec<f64>,
    pub scaled: Option<Vec<f64>>,
}

impl VertexErrorMap {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Squared Euclidean distance between corresponding vertices.
pub fn per_vertex_mse(a: &PointCloud, b: &PointCloud) -> Result<VertexErrorMap> {
    check_dim("per-vertex MSE vertex count", a.len(), b.len())?;
    let values = a
        .points()
        .zip(b.points())
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum())
        .collect();
    Ok(VertexErrorMap {
        values,
        scaled: None,
    })
}

/// Adds `(v − min) / (max − min)`; a constant map scales to all zeros.
pub fn scale_map_01(map: &VertexErrorMap) -> VertexErrorMap {
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let scaled = map
        .values
        .iter()
        .map(|&v| if range > 0.0 { (v - min) / range } else { 0.0 })
        .collect();
    VertexErrorMap {
        values: map.values.clone(),
        scaled: Some(scaled),
    }
}
