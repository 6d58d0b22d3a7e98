//! Linear shape spaces: `shape = mean + basis · z`.
//!
//! Also hosts the procedural ground-truth morphable model used to generate
//! synthetic training data: a face-like heightfield mesh plus a set of smooth
//! displacement fields built from Gaussian bumps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A point set stored in vectorized order `(x1, y1, z1, ..., xn, yn, zn)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn from_flat(coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(3) {
            return Err(Error::InvalidConfig(format!(
                "vectorized point cloud length {} is not a multiple of 3",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("point cloud coordinate {i}")));
        }
        Ok(Self { coords })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        Self::from_flat(points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let c = &self.coords[3 * i..3 * i + 3];
        [c[0], c[1], c[2]]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = [f64; 3]> + '_ {
        self.coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for p in self.points() {
            for k in 0..3 {
                acc[k] += p[k];
            }
        }
        let n = self.len().max(1) as f64;
        acc.map(|a| a / n)
    }

    /// Applies `f` to every point, keeping the order.
    pub fn map_points(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> PointCloud {
        let coords = self.points().flat_map(&mut f).collect();
        PointCloud { coords }
    }
}

/// A point cloud with a fixed triangulation. Faces are counterclockwise when
/// viewed from outside the surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    cloud: PointCloud,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(cloud: PointCloud, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = cloud.len();
        let mut used = vec![false; n];
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidConfig(format!(
                    "face {fi} references a vertex outside 0..{n}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Degenerate(format!("face {fi} repeats a vertex")));
            }
            for &v in f {
                used[v] = true;
            }
        }
        if let Some(v) = used.iter().position(|u| !u) {
            return Err(Error::InvalidConfig(format!(
                "vertex {v} belongs to no face"
            )));
        }
        Ok(Self { cloud, faces })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.cloud.len()
    }

    /// Same topology, new vertex positions.
    pub fn with_cloud(&self, cloud: PointCloud) -> Result<Self> {
        check_dim("mesh vertex count", self.cloud.len(), cloud.len())?;
        Ok(Self {
            cloud,
            faces: self.faces.clone(),
        })
    }
}

/// Shape coefficients in a `d`-dimensional latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Prior standard deviation per coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSchedule {
    /// `sigma_i = scale / i` for `i = 1..=d`.
    Harmonic {
        scale: f64,
    },
    Constant(f64),
    Explicit(Vec<f64>),
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        SigmaSchedule::Harmonic { scale: 1.0 }
    }
}

impl SigmaSchedule {
    pub fn sigmas(&self, d: usize) -> Result<Vec<f64>> {
        let s = match self {
            SigmaSchedule::Harmonic { scale } => (1..=d).map(|i| scale / i as f64).collect(),
            SigmaSchedule::Constant(c) => vec![*c; d],
            SigmaSchedule::Explicit(v) => {
                check_dim("explicit sigma schedule", d, v.len())?;
                v.clone()
            }
        };
        if s.iter().any(|x: &f64| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidConfig(
                "sigma schedule must be finite and non-negative".into(),
            ));
        }
        Ok(s)
    }
}

/// Mean shape plus a `3n × d` basis, stored column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    mean: Vec<f64>,
    basis: Vec<Vec<f64>>,
    sigma: Vec<f64>,
}

impl ShapeModel {
    /// `basis` holds the `d` columns, each of length `3n`. `sigma` is the
    /// coefficient prior used by [`sample_coefficients`].
    pub fn new(mean: Vec<f64>, basis: Vec<Vec<f64>>, sigma: Vec<f64>) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::InvalidConfig("shape model needs d >= 1".into()));
        }
        if !mean.len().is_multiple_of(3) || mean.len() < 9 {
            return Err(Error::InvalidConfig(format!(
                "mean length {} must be 3n with n >= 3",
                mean.len()
            )));
        }
        for (i, col) in basis.iter().enumerate() {
            check_dim("basis column length", mean.len(), col.len())?;
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("basis column {i}")));
            }
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean shape".into()));
        }
        check_dim("sigma schedule length", basis.len(), sigma.len())?;
        Ok(Self { mean, basis, sigma })
    }

    pub fn d(&self) -> usize {
        self.basis.len()
    }

    pub fn n(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.basis[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Little-endian dump of `(n, d, mean, basis columns, sigma)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.mean.len() * (self.d() + 1)));
        out.extend_from_slice(&(self.n() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d() as u64).to_le_bytes());
        for v in self
            .mean
            .iter()
            .chain(self.basis.iter().flatten())
            .chain(&self.sigma)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// `mean + Σ_i basis_i · z_i`, accumulated column by column.
pub fn synthesize_shape(model: &ShapeModel, z: &LatentCode) -> Result<PointCloud> {
    check_dim("latent code length", model.d(), z.len())?;
    let mut out = model.mean.clone();
    for (col, &zi) in model.basis.iter().zip(z.as_slice()) {
        for (o, &b) in out.iter_mut().zip(col) {
            *o += b * zi;
        }
    }
    PointCloud::from_flat(out)
}

/// Draws `count` codes with entry `i ~ Normal(0, sigma_i²)`.
pub fn sample_coefficients(model: &ShapeModel, count: usize, seed: u64) -> Result<Vec<LatentCode>> {
    if count == 0 {
        return Err(Error::InvalidConfig("count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            LatentCode(
                model
                    .sigma
                    .iter()
                    .map(|&s| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        s * e
                    })
                    .collect(),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    /// Vertices per side of the square grid; `n = n_grid²`.
    pub n_grid: usize,
    pub d_true: usize,
    pub sigma: SigmaSchedule,
    pub seed: u64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            n_grid: 39,
            d_true: 10,
            sigma: SigmaSchedule::default(),
            seed: 7,
        }
    }
}

// Face geometry in millimeters.
const HALF_WIDTH: f64 = 70.0;
const HALF_HEIGHT: f64 = 95.0;
const GRID_EXTENT: f64 = 1.15;
const DOME_DEPTH: f64 = 45.0;
const BUMPS_PER_FIELD: usize = 3;

struct Bump {
    center: [f64; 2],
    radii: [f64; 2],
    amplitude: f64,
}

impl Bump {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        self.amplitude * (-0.5 * (dx * dx + dy * dy)).exp()
    }
}

fn face_height(x: f64, y: f64) -> f64 {
    let u = x / HALF_WIDTH;
    let v = y / HALF_HEIGHT;
    let rho2 = u * u + v * v;
    let features = [
        // nose
        Bump {
            center: [0.0, -5.0],
            radii: [9.0, 22.0],
            amplitude: 24.0,
        },
        // brows
        Bump {
            center: [-28.0, 32.0],
            radii: [14.0, 7.0],
            amplitude: 7.0,
        },
        Bump {
            center: [28.0, 32.0],
            radii: [14.0, 7.0],
            amplitude: 7.0,
        },
        // eye sockets
        Bump {
            center: [-28.0, 15.0],
            radii: [12.0, 8.0],
            amplitude: -9.0,
        },
        Bump {
            center: [28.0, 15.0],
            radii: [12.0, 8.0],
            amplitude: -9.0,
        },
        // lips and chin
        Bump {
            center: [0.0, -45.0],
            radii: [18.0, 6.0],
            amplitude: 5.0,
        },
        Bump {
            center: [0.0, -75.0],
            radii: [20.0, 10.0],
            amplitude: 9.0,
        },
    ];
    DOME_DEPTH * (1.0 - rho2) + features.iter().map(|b| b.eval(x, y)).sum::<f64>()
}

/// Regular triangulation of an `n_grid × n_grid` vertex grid, row-major with
/// `x` growing along a row and `y` growing across rows. Faces point toward +z.
pub fn grid_faces(n_grid: usize) -> Vec<[usize; 3]> {
    let mut faces = Vec::with_capacity(2 * (n_grid - 1) * (n_grid - 1));
    for r in 0..n_grid - 1 {
        for c in 0..n_grid - 1 {
            let v00 = r * n_grid + c;
            let v01 = v00 + 1;
            let v10 = v00 + n_grid;
            let v11 = v10 + 1;
            faces.push([v00, v01, v11]);
            faces.push([v00, v11, v10]);
        }
    }
    faces
}

/// Builds the procedural ground-truth model: a face-like heightfield as the
/// mean and `d_true` smooth displacement fields as basis columns.
pub fn build_ground_truth_model(cfg: &GroundTruthConfig) -> Result<(ShapeModel, TriangleMesh)> {
    if cfg.d_true == 0 {
        return Err(Error::InvalidConfig("d_true must be >= 1".into()));
    }
    if cfg.n_grid < 8 {
        return Err(Error::InvalidConfig("n_grid must be >= 8".into()));
    }
    let g = cfg.n_grid;
    let step = |i: usize| -1.0 + 2.0 * i as f64 / (g - 1) as f64;
    let mut mean = Vec::with_capacity(3 * g * g);
    for r in 0..g {
        let y = step(r) * GRID_EXTENT * HALF_HEIGHT;
        for c in 0..g {
            let x = step(c) * GRID_EXTENT * HALF_WIDTH;
            mean.extend_from_slice(&[x, y, face_height(x, y)]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amp = Normal::new(0.0, 6.0).expect("valid normal");
    let mut basis = Vec::with_capacity(cfg.d_true);
    for _ in 0..cfg.d_true {
        let mut col = vec![0.0; mean.len()];
        for _ in 0..BUMPS_PER_FIELD {
            // centers inside the elliptical face region
            let (cu, cv) = loop {
                let u: f64 = rng.random_range(-0.9..0.9);
                let v: f64 = rng.random_range(-0.9..0.9);
                if u * u + v * v < 0.81 {
                    break (u, v);
                }
            };
            let center = [cu * HALF_WIDTH, cv * HALF_HEIGHT];
            let radius: f64 = rng.random_range(15.0..40.0);
            let dir: [f64; 3] = [
                amp.sample(&mut rng) * 0.5,
                amp.sample(&mut rng) * 0.5,
                amp.sample(&mut rng),
            ];
            for (p, out) in mean.chunks_exact(3).zip(col.chunks_exact_mut(3)) {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let w = (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
                for k in 0..3 {
                    out[k] += dir[k] * w;
                }
            }
        }
        basis.push(col);
    }

    let sigma = cfg.sigma.sigmas(cfg.d_true)?;
    let cloud = PointCloud::from_flat(mean.clone())?;
    let mesh = TriangleMesh::new(cloud, grid_faces(g))?;
    Ok((ShapeModel::new(mean, basis, sigma)?, mesh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(n: usize, d: usize, seed: u64) -> ShapeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let basis = (0..d)
            .map(|_| (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        ShapeModel::new(mean, basis, vec![1.0; d]).unwrap()
    }

    #[test]
    fn zero_code_gives_mean_bitwise() {
        let m = random_model(10, 4, 1);
        let out = synthesize_shape(&m, &LatentCode::zeros(4)).unwrap();
        assert_eq!(out.as_flat(), m.mean());
    }

    #[test]
    fn identity_column_moves_one_coordinate() {
        let mean: Vec<f64> = (0..9).map(|i| i as f64 * 0.5).collect();
        let mut col = vec![0.0; 9];
        col[0] = 1.0;
        let m = ShapeModel::new(mean.clone(), vec![col], vec![1.0]).unwrap();
        let out = synthesize_shape(&m, &LatentCode(vec![2.5])).unwrap();
        assert_eq!(out.as_flat()[0], mean[0] + 2.5);
        assert_eq!(&out.as_flat()[1..], &mean[1..]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let m = random_model(10, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = synthesize_shape(&m, &LatentCode(z.clone())).unwrap();
        for v in 0..10 {
            for k in 0..3 {
                let row = 3 * v + k;
                let mut acc = m.mean()[row];
                for (j, zj) in z.iter().enumerate() {
                    acc += m.column(j)[row] * zj;
                }
                let got = out.as_flat()[row];
                assert!((got - acc).abs() <= 1e-12 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn wrong_code_length_reports_dims() {
        let m = random_model(4, 3, 4);
        match synthesize_shape(&m, &LatentCode::zeros(2)) {
            Err(Error::DimensionMismatch {
                expected: 3,
                actual: 2,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ground_truth_is_deterministic() {
        let cfg = GroundTruthConfig {
            n_grid: 12,
            d_true: 5,
            ..Default::default()
        };
        let (a, ma) = build_ground_truth_model(&cfg).unwrap();
        let (b, mb) = build_ground_truth_model(&cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ma, mb);
    }

    #[test]
    fn grid_of_16_has_256_vertices() {
        let cfg = GroundTruthConfig {
            n_grid: 16,
            d_true: 3,
            ..Default::default()
        };
        let (m, mesh) = build_ground_truth_model(&cfg).unwrap();
        assert_eq!(m.n(), 256);
        assert_eq!(mesh.vertex_count(), 256);
        assert_eq!(mesh.faces().len(), 2 * 15 * 15);
    }

    #[test]
    fn ground_truth_basis_has_full_rank() {
        let cfg = GroundTruthConfig {
            n_grid: 16,
            d_true: 10,
            ..Default::default()
        };
        let (m, _) = build_ground_truth_model(&cfg).unwrap();
        let mat = nalgebra::DMatrix::from_fn(3 * m.n(), m.d(), |r, c| m.column(c)[r]);
        let sv = mat.singular_values();
        let smax = sv.max();
        let rank = sv.iter().filter(|&&s| s > 1e-8 * smax).count();
        assert_eq!(rank, 10);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_d = GroundTruthConfig {
            d_true: 0,
            ..Default::default()
        };
        assert!(build_ground_truth_model(&bad_d).is_err());
        let bad_grid = GroundTruthConfig {
            n_grid: 7,
            ..Default::default()
        };
        assert!(build_ground_truth_model(&bad_grid).is_err());
        let m = random_model(4, 2, 0);
        assert!(sample_coefficients(&m, 0, 1).is_err());
    }

    #[test]
    fn coefficient_sampling() {
        let cfg = GroundTruthConfig {
            n_grid: 8,
            d_true: 4,
            ..Default::default()
        };
        let (m, _) = build_ground_truth_model(&cfg).unwrap();
        assert_eq!(m.sigma(), &[1.0, 0.5, 1.0 / 3.0, 0.25]);
        let a = sample_coefficients(&m, 5, 11).unwrap();
        let b = sample_coefficients(&m, 5, 11).unwrap();
        assert_eq!(a, b);
        let one = sample_coefficients(&m, 1, 11).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 4);

        let many = sample_coefficients(&m, 10_000, 5).unwrap();
        let mean = many.iter().map(|z| z.0[0]).sum::<f64>() / 10_000.0;
        let var = many.iter().map(|z| (z.0[0] - mean).powi(2)).sum::<f64>() / 9_999.0;
        let std = var.sqrt();
        assert!((0.97..=1.03).contains(&std), "std {std}");
    }

    #[test]
    fn mesh_validation() {
        let cloud =
            PointCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0; 3]])
                .unwrap();
        assert!(TriangleMesh::new(cloud.clone(), vec![[0, 1, 2]]).is_err());
        assert!(TriangleMesh::new(cloud.clone(), vec![[0, 1, 2], [1, 1, 3]]).is_err());
        assert!(TriangleMesh::new(cloud.clone(), vec![[0, 1, 2], [1, 4, 3]]).is_err());
        assert!(TriangleMesh::new(cloud, vec![[0, 1, 2], [1, 3, 2]]).is_ok());
        assert!(PointCloud::from_flat(vec![1.0, 2.0]).is_err());
        assert!(PointCloud::from_flat(vec![1.0, f64::NAN, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn synthesis_is_affine(seed in 0u64..1000) {
            let m = random_model(6, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let z1: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z2: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let zs: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
            let s1 = synthesize_shape(&m, &LatentCode(z1)).unwrap();
            let s2 = synthesize_shape(&m, &LatentCode(z2)).unwrap();
            let s12 = synthesize_shape(&m, &LatentCode(zs)).unwrap();
            for i in 0..m.mean().len() {
                let mu = m.mean()[i];
                let lhs = s12.as_flat()[i] - mu;
                let rhs = (s1.as_flat()[i] - mu) + (s2.as_flat()[i] - mu);
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }
        }

        #[test]
        fn vectorization_round_trips(coords in proptest::collection::vec(-1e3f64..1e3, 0..30)) {
            let n = coords.len() / 3 * 3;
            let flat = coords[..n].to_vec();
            let cloud = PointCloud::from_flat(flat.clone()).unwrap();
            let pts: Vec<[f64; 3]> = cloud.points().collect();
            let back = PointCloud::from_points(&pts).unwrap();
            prop_assert_eq!(back.into_flat(), flat);
        }
    }
}
