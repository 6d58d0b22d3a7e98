//! Closed-form similarity alignment of two corresponding point sets.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::shape::PointCloud;

/// `x ↦ scale · R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    /// Row-major, orthonormal with determinant +1.
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        scale: 1.0,
        translation: [0.0; 3],
    };

    fn matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.matrix() * Vector3::from(p) * self.scale + Vector3::from(self.translation);
        [q.x, q.y, q.z]
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.apply_point(p))
    }
}

fn centered(cloud: &PointCloud) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let c = Vector3::from(cloud.centroid());
    (c, cloud.points().map(|p| Vector3::from(p) - c).collect())
}

/// Finds the similarity transform minimizing `Σ |s R src_i + t − dst_i|²`
/// and returns it with the aligned source.
///
/// Rotations are restricted to `det R = +1`; a reflected source is aligned as
/// well as a proper rotation allows.
pub fn procrustes_align(
    source: &PointCloud,
    target: &PointCloud,
) -> Result<(SimilarityTransform, PointCloud)> {
    check_dim("procrustes vertex count", target.len(), source.len())?;
    if source.len() < 3 {
        return Err(Error::Degenerate(
            "procrustes needs at least 3 points".into(),
        ));
    }
    let (cs, xs) = centered(source);
    let (ct, xt) = centered(target);

    let mut target_cov = Matrix3::zeros();
    for q in &xt {
        target_cov += q * q.transpose();
    }
    let sv = target_cov.symmetric_eigenvalues();
    let mut ev = [sv[0].max(0.0), sv[1].max(0.0), sv[2].max(0.0)];
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0].is_nan() || ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate(
            "target points are collinear or coincident".into(),
        ));
    }
    let src_ss: f64 = xs.iter().map(|p| p.norm_squared()).sum();
    if src_ss.is_nan() || src_ss <= 0.0 {
        return Err(Error::Degenerate("source points all coincide".into()));
    }

    // cross-covariance Σ t_i s_iᵀ
    let mut h = Matrix3::zeros();
    for (p, q) in xs.iter().zip(&xt) {
        h += q * p.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / src_ss;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Degenerate(format!("procrustes scale {scale}")));
    }
    let t = ct - r * cs * scale;
    let transform = SimilarityTransform {
        rotation: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        scale,
        translation: [t.x, t.y, t.z],
    };
    let aligned = transform.apply(source);
    Ok((transform, aligned))
}

/// Root mean squared point distance.
pub fn rms_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_dim("rms vertex count", a.len(), b.len())?;
    let ss: f64 = a
        .as_flat()
        .iter()
        .zip(b.as_flat())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((ss / a.len().max(1) as f64).sqrt())
}

/// A random proper rotation built from a uniformly sampled unit quaternion.
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    use rand_distr::{Distribution, StandardNormal};
    let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(rng)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        q[0] / n,
        q[1] / n,
        q[2] / n,
        q[3] / n,
    ));
    let m = uq.to_rotation_matrix().into_inner();
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}
