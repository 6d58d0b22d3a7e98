//! Yaw rotation and orthographic point-splat rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normals::vertex_normals;
use crate::image::GrayImage;
use crate::shape::{PointCloud, TriangleMesh};

/// Head yaw about the vertical (y) axis, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    yaw_deg: f64,
}

impl Pose {
    pub const FRONTAL: Pose = Pose { yaw_deg: 0.0 };

    pub fn new(yaw_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&yaw_deg) {
            return Err(Error::InvalidConfig(format!(
                "yaw {yaw_deg} outside [-90, 90] degrees"
            )));
        }
        Ok(Self { yaw_deg })
    }

    pub fn yaw_deg(&self) -> f64 {
        self.yaw_deg
    }
}

/// Rotates the cloud about its centroid:
/// `x' = x cosθ + z sinθ, y' = y, z' = −x sinθ + z cosθ`.
pub fn rotate_yaw(cloud: &PointCloud, pose: Pose) -> PointCloud {
    rotate_yaw_about(cloud, pose, cloud.centroid())
}

pub(crate) fn rotate_yaw_about(cloud: &PointCloud, pose: Pose, c: [f64; 3]) -> PointCloud {
    if pose.yaw_deg == 0.0 {
        return cloud.clone();
    }
    let (s, co) = pose.yaw_deg.to_radians().sin_cos();
    cloud.map_points(|p| {
        let x = p[0] - c[0];
        let z = p[2] - c[2];
        [c[0] + x * co + z * s, p[1], c[2] - x * s + z * co]
    })
}

/// Axis-aligned model-space window mapped onto the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Viewport {
    /// Square window around the cloud's xy bounds with a relative margin.
    pub fn around(cloud: &PointCloud, margin: f64) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in cloud.points() {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let half = 0.5 * (x1 - x0).max(y1 - y0) * (1.0 + margin);
        let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        Self {
            x_min: cx - half,
            x_max: cx + half,
            y_min: cy - half,
            y_max: cy + half,
        }
    }

    fn is_degenerate(&self) -> bool {
        !(self.x_max - self.x_min > 0.0 && self.y_max - self.y_min > 0.0)
            || ![self.x_min, self.x_max, self.y_min, self.y_max]
                .iter()
                .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub resolution: usize,
    pub viewport: Viewport,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub splat_radius: usize,
}

impl RenderConfig {
    /// Defaults with the viewport fixed to `mesh` bounds plus a 10% margin.
    pub fn for_mesh(mesh: &TriangleMesh) -> Self {
        Self {
            resolution: 32,
            viewport: Viewport::around(mesh.cloud(), 0.1),
            light_dir: [0.0, 0.0, 1.0],
            ambient: 0.2,
            splat_radius: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::InvalidConfig("resolution must be >= 8".into()));
        }
        let l = self.light_dir;
        let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "light_dir norm {norm} is not 1"
            )));
        }
        if !(0.0..1.0).contains(&self.ambient) {
            return Err(Error::InvalidConfig("ambient must be in [0, 1)".into()));
        }
        if self.viewport.is_degenerate() {
            return Err(Error::Degenerate("viewport has zero extent".into()));
        }
        Ok(())
    }
}

/// Orthographic render looking along −z. Each vertex splats a square of side
/// `2·splat_radius + 1`; the z-buffer keeps the largest z; shading is
/// `ambient + (1 − ambient)·max(0, n·light)`. Uncovered pixels are 0.
pub fn render_orthographic(mesh: &TriangleMesh, cfg: &RenderConfig) -> Result<GrayImage> {
    cfg.validate()?;
    if mesh.vertex_count() == 0 {
        return Err(Error::Degenerate("empty mesh".into()));
    }
    let res = cfg.resolution;
    let vp = cfg.viewport;
    let normals = vertex_normals(mesh);
    let mut depth = vec![f64::NEG_INFINITY; res * res];
    let mut img = GrayImage::new(res, res);
    let r = cfg.splat_radius as isize;
    let sx = res as f64 / (vp.x_max - vp.x_min);
    let sy = res as f64 / (vp.y_max - vp.y_min);

    for (p, n) in mesh.cloud().points().zip(&normals) {
        let col = ((p[0] - vp.x_min) * sx).floor();
        let row = ((vp.y_max - p[1]) * sy).floor();
        if !(0.0..res as f64).contains(&col) || !(0.0..res as f64).contains(&row) {
            continue;
        }
        let lambert = n[0] * cfg.light_dir[0] + n[1] * cfg.light_dir[1] + n[2] * cfg.light_dir[2];
        let shade = (cfg.ambient + (1.0 - cfg.ambient) * lambert.max(0.0)).clamp(0.0, 1.0);
        let (col, row) = (col as isize, row as isize);
        for rr in (row - r).max(0)..=(row + r).min(res as isize - 1) {
            for cc in (col - r).max(0)..=(col + r).min(res as isize - 1) {
                let idx = rr as usize * res + cc as usize;
                if p[2] > depth[idx] {
                    depth[idx] = p[2];
                    img.set(rr as usize, cc as usize, shade);
                }
            }
        }
    }
    Ok(img)
}

/// Renders `cloud` posed at `pose`, using the triangulation of `topology`.
pub fn render_posed(
    cloud: &PointCloud,
    pose: Pose,
    topology: &TriangleMesh,
    cfg: &RenderConfig,
) -> Result<GrayImage> {
    let mesh = topology.with_cloud(rotate_yaw(cloud, pose))?;
    render_orthographic(&mesh, cfg)
}
