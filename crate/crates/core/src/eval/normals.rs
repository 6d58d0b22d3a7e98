//! Triangle and vertex normals, and angles between normals.

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::shape::{PointCloud, TriangleMesh};

/// Unnormalized face normal `(P2 − P1) × (P3 − P1)`.
pub fn face_normal(p1: [f64; 3], p2: [f64; 3], p3: [f64; 3]) -> [f64; 3] {
    let v = [p2[0] - p1[0], p2[1] - p1[1], p2[2] - p1[2]];
    let w = [p3[0] - p1[0], p3[1] - p1[1], p3[2] - p1[2]];
    [
        v[1] * w[2] - v[2] * w[1],
        v[2] * w[0] - v[0] * w[2],
        v[0] * w[1] - v[1] * w[0],
    ]
}

/// Per-vertex unit normals: the normalized sum of the unnormalized normals of
/// every incident triangle. Vertices whose sum vanishes get `(0, 0, 1)`.
pub fn vertex_normals(mesh: &TriangleMesh) -> Vec<[f64; 3]> {
    let cloud = mesh.cloud();
    let mut acc = vec![[0.0f64; 3]; cloud.len()];
    for f in mesh.faces() {
        let n = face_normal(cloud.point(f[0]), cloud.point(f[1]), cloud.point(f[2]));
        for &v in f {
            for k in 0..3 {
                acc[v][k] += n[k];
            }
        }
    }
    let mut degenerate = 0usize;
    let out = acc
        .into_iter()
        .map(|n| {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 0.0 && len.is_finite() {
                [n[0] / len, n[1] / len, n[2] / len]
            } else {
                degenerate += 1;
                [0.0, 0.0, 1.0]
            }
        })
        .collect();
    if degenerate > 0 {
        log::warn!("{degenerate} vertices have a vanishing normal sum; using (0, 0, 1)");
    }
    out
}

/// Angle between two nonzero vectors in degrees, `[0, 180]`.
///
/// Computed as `atan2(|n1 × n2|, n1 · n2)`, which equals the arccos of the
/// normalized dot product but stays accurate near 0 and 180.
pub fn normal_angle(n1: [f64; 3], n2: [f64; 3]) -> Result<f64> {
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm(n1) == 0.0 || norm(n2) == 0.0 {
        return Err(Error::Degenerate("zero-length normal".into()));
    }
    let dot = n1[0] * n2[0] + n1[1] * n2[1] + n1[2] * n2[2];
    let cross = [
        n1[1] * n2[2] - n1[2] * n2[1],
        n1[2] * n2[0] - n1[0] * n2[2],
        n1[0] * n2[1] - n1[1] * n2[0],
    ];
    Ok(norm(cross).atan2(dot).to_degrees())
}

pub const DEFAULT_ANGLE_BINS: usize = 36;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalAngleDistribution {
    pub angles_deg: Vec<f64>,
    /// Equal-width bins over `[0, 180]`; the last bin is closed.
    pub histogram: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl NormalAngleDistribution {
    pub fn from_angles(angles_deg: Vec<f64>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidConfig(
                "histogram needs at least one bin".into(),
            ));
        }
        if angles_deg.is_empty() {
            return Err(Error::Degenerate("no angles".into()));
        }
        let mut histogram = vec![0usize; bins];
        for &a in &angles_deg {
            let b = ((a / 180.0) * bins as f64).floor() as usize;
            histogram[b.min(bins - 1)] += 1;
        }
        let mean = angles_deg.iter().sum::<f64>() / angles_deg.len() as f64;
        let mut sorted = angles_deg.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean,
            median: quantile(&sorted, 0.5),
            p95: quantile(&sorted, 0.95),
            angles_deg,
            histogram,
        })
    }
}

/// Linear-interpolated quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn same_triangles(a: &[[usize; 3]], b: &[[usize; 3]]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let (mut x, mut y) = (*x, *y);
            x.sort_unstable();
            y.sort_unstable();
            x == y
        })
}

/// Per-vertex angles between corresponding vertex normals of two meshes with
/// the same triangles (winding may differ).
pub fn normal_angle_distribution(
    recon: &TriangleMesh,
    truth: &TriangleMesh,
    bins: usize,
) -> Result<NormalAngleDistribution> {
    check_dim(
        "mesh vertex count",
        truth.vertex_count(),
        recon.vertex_count(),
    )?;
    if !same_triangles(recon.faces(), truth.faces()) {
        return Err(Error::InvalidConfig(
            "meshes do not share a triangulation".into(),
        ));
    }
    let a = vertex_normals(recon);
    let b = vertex_normals(truth);
    let angles = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| normal_angle(x, y))
        .collect::<Result<Vec<_>>>()?;
    NormalAngleDistribution::from_angles(angles, bins)
}

/// Unit sphere from a subdivided icosahedron, faces wound outward.
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut pts: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let unit = |p: [f64; 3]| {
        let l = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        [p[0] / l, p[1] / l, p[2] / l]
    };
    for p in &mut pts {
        *p = unit(*p);
    }
    for _ in 0..subdivisions {
        let mut mid = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut m = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                m[k] = *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let (p, q) = (pts[a], pts[b]);
                    pts.push(unit([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                    pts.len() - 1
                });
            }
            next.push([f[0], m[0], m[2]]);
            next.push([f[1], m[1], m[0]]);
            next.push([f[2], m[2], m[1]]);
            next.push(m);
        }
        faces = next;
    }
    let cloud = PointCloud::from_points(&pts).expect("finite points");
    TriangleMesh::new(cloud, faces).expect("valid icosphere")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mesh(points: &[[f64; 3]], faces: Vec<[usize; 3]>) -> TriangleMesh {
        TriangleMesh::new(PointCloud::from_points(points).unwrap(), faces).unwrap()
    }

    #[test]
    fn single_triangle_points_up() {
        let m = mesh(
            &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        );
        for n in vertex_normals(&m) {
            assert_eq!(n, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn flat_quad_follows_winding() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let up = mesh(&pts, vec![[0, 1, 2], [0, 2, 3]]);
        for n in vertex_normals(&up) {
            assert_eq!(n, [0.0, 0.0, 1.0]);
        }
        let down = mesh(&pts, vec![[0, 2, 1], [0, 3, 2]]);
        for n in vertex_normals(&down) {
            assert_eq!(n, [0.0, 0.0, -1.0]);
        }
    }

    #[test]
    fn angle_identities() {
        assert_eq!(normal_angle([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            normal_angle([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]).unwrap(),
            180.0
        );
        assert!((normal_angle([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap() - 90.0).abs() < 1e-9);
        // non-unit inputs normalize first
        assert!(
            normal_angle([3.0, 0.0, 0.0], [7.0, 0.0, 0.0])
                .unwrap()
                .abs()
                < 1e-9
        );
        assert!(normal_angle([0.0; 3], [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn angle_never_leaves_domain() {
        // nearly parallel vectors whose normalized dot rounds above 1
        let a = [0.1, 0.2, 0.3];
        let b = [0.1 * (1.0 + 1e-16), 0.2, 0.3];
        let ang = normal_angle(a, b).unwrap();
        assert!((0.0..=180.0).contains(&ang));
    }

    #[test]
    fn distribution_of_identical_and_flipped_meshes() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.2],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.1],
        ];
        let a = mesh(&pts, vec![[0, 1, 2], [0, 2, 3]]);
        let same = normal_angle_distribution(&a, &a, DEFAULT_ANGLE_BINS).unwrap();
        assert!(same.angles_deg.iter().all(|&x| x == 0.0));
        assert_eq!(same.histogram[0], 4);
        assert_eq!(same.histogram.iter().sum::<usize>(), 4);

        let flipped = mesh(&pts, vec![[0, 2, 1], [0, 3, 2]]);
        let d = normal_angle_distribution(&a, &flipped, DEFAULT_ANGLE_BINS).unwrap();
        assert!(d.angles_deg.iter().all(|&x| (x - 180.0).abs() < 1e-9));
        assert_eq!(d.histogram[35], 4);

        let other = mesh(&pts, vec![[0, 1, 3], [1, 2, 3]]);
        assert!(normal_angle_distribution(&a, &other, DEFAULT_ANGLE_BINS).is_err());
    }

    #[test]
    fn histogram_puts_180_in_last_bin() {
        let d = NormalAngleDistribution::from_angles(vec![0.0, 4.9, 5.0, 180.0], 36).unwrap();
        assert_eq!(d.histogram[0], 2);
        assert_eq!(d.histogram[1], 1);
        assert_eq!(d.histogram[35], 1);
        assert!((d.median - 4.95).abs() < 1e-12);
    }

    #[test]
    fn sphere_normals_are_radial() {
        let m = icosphere(3);
        for (i, n) in vertex_normals(&m).into_iter().enumerate() {
            assert!(normal_angle(n, m.cloud().point(i)).unwrap() < 5.0);
        }
    }

    #[test]
    fn perturbed_mesh_matches_loop_oracle() {
        let truth = icosphere(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noisy = truth.cloud().map_points(|p| {
            [
                p[0] + rng.random_range(-0.02..0.02),
                p[1] + rng.random_range(-0.02..0.02),
                p[2] + rng.random_range(-0.02..0.02),
            ]
        });
        let recon = truth.with_cloud(noisy).unwrap();
        let dist = normal_angle_distribution(&recon, &truth, DEFAULT_ANGLE_BINS).unwrap();

        let oracle_normal = |m: &TriangleMesh, v: usize| {
            let mut s = [0.0; 3];
            for f in m.faces() {
                if !f.contains(&v) {
                    continue;
                }
                let (a, b, c) = (
                    m.cloud().point(f[0]),
                    m.cloud().point(f[1]),
                    m.cloud().point(f[2]),
                );
                let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                s[0] += e1[1] * e2[2] - e1[2] * e2[1];
                s[1] += e1[2] * e2[0] - e1[0] * e2[2];
                s[2] += e1[0] * e2[1] - e1[1] * e2[0];
            }
            s
        };
        let mut total = 0.0;
        for v in 0..truth.vertex_count() {
            let (a, b) = (oracle_normal(&recon, v), oracle_normal(&truth, v));
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let la = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let lb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            total += (dot / (la * lb)).clamp(-1.0, 1.0).acos().to_degrees();
        }
        let expect = total / truth.vertex_count() as f64;
        assert!(dist.mean > 0.1);
        assert!(
            (dist.mean - expect).abs() < 1e-9,
            "{} vs {expect}",
            dist.mean
        );
    }
}
