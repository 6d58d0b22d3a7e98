//! Fast self-checks: layer and full-stack gradients, the linear-autoencoder
//! subspace property, Procrustes recovery and normal identities.

use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::eval::normals::{icosphere, normal_angle, vertex_normals};
use crate::eval::procrustes::{
    procrustes_align, random_rotation, rms_distance, SimilarityTransform,
};
use crate::model::{JointNetwork, NetworkSpec};
use crate::nn::{
    dropout_apply, dropout_backward, gradient_check, relu_apply, relu_grad, Conv2d, Dense,
    DropoutMode, GradCheckReport, Parameterized,
};
use crate::shape::{PointCloud, TriangleMesh};
use crate::train::{fit_network, Precision, TrainConfig, TrainingSet};

/// Relative-error bound for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const PCA_ANGLE_LIMIT_DEG: f64 = 5.0;
pub const PROCRUSTES_RMS_LIMIT: f64 = 1e-8;

/// Deliberate defects for exercising the battery itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales the dense layer's weight gradient by 1.01.
    DenseBackward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `L = Σ R ⊙ f(x)` against central differences over the layer parameters.
pub fn check_dense(fault: Fault) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layer = Dense::random(6, 4, 0.5, &mut rng);
    let x = random_matrix(&mut rng, 3, 6);
    let r = random_matrix(&mut rng, 3, 4);
    let mut grad = layer.zeros_like();
    layer.backward(x.view(), r.view(), &mut grad)?;
    if fault == Fault::DenseBackward {
        grad.weight.data_mut().iter_mut().for_each(|g| *g *= 1.01);
    }
    gradient_check(&layer.flatten(), &grad.flatten(), 1e-6, |p| {
        let mut l = layer.clone();
        l.load_flat(p).expect("same size");
        (&l.forward(x.view()).expect("dims") * &r).sum()
    })
}

pub fn check_conv() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layer = Conv2d::random(2, 3, 3, 2, 1, 0.4, &mut rng)?;
    let x = Array4::from_shape_fn((2, 2, 7, 7), |_| rng.random_range(-1.0..1.0));
    let y = layer.forward(x.view())?;
    let r = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
    let mut grad = layer.zeros_like();
    layer.backward(x.view(), r.view(), &mut grad, false)?;
    gradient_check(&layer.flatten(), &grad.flatten(), 1e-6, |p| {
        let mut l = layer.clone();
        l.load_flat(p).expect("same size");
        (&l.forward(x.view()).expect("dims") * &r).sum()
    })
}

/// ReLU and (fixed-mask) dropout gradients with respect to their inputs.
pub fn check_activations() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // keep inputs away from the kink
    let x = Array2::from_shape_fn((4, 5), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let r = random_matrix(&mut rng, 4, 5);
    let (_, mask) = dropout_apply(
        x.view(),
        0.4,
        DropoutMode::Train,
        &mut ChaCha8Rng::seed_from_u64(1),
    )?;
    let loss = |xs: &Array2<f64>| {
        let h = relu_apply(xs.view());
        let (d, _) = dropout_apply(
            h.view(),
            0.4,
            DropoutMode::Train,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .expect("valid ratio");
        (&d * &r).sum()
    };
    let dx = relu_grad(x.view(), dropout_backward(r.view(), mask.as_ref()).view());
    let flat: Vec<f64> = x.iter().copied().collect();
    gradient_check(&flat, &dx.iter().copied().collect::<Vec<_>>(), 1e-6, |p| {
        loss(&Array2::from_shape_vec((4, 5), p.to_vec()).expect("shape"))
    })
}

/// Full joint loss on a two-sample batch, dropout off.
pub fn check_joint_loss() -> Result<GradCheckReport> {
    let spec = NetworkSpec {
        shape_dim: 9,
        latent_dim: 3,
        encoder_hidden: vec![5],
        image_size: 6,
        conv_channels: vec![2, 3],
        conv_kernel: 3,
        conv_stride: 2,
        fc_hidden: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let net = JointNetwork::new(&spec, &mut rng)?;
    let x = random_matrix(&mut rng, 2, 9);
    let imgs = Array4::from_shape_fn((2, 1, 6, 6), |_| rng.random_range(0.0..1.0));
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (_, grad) = net.joint_loss(
        x.view(),
        imgs.view(),
        0.7,
        0.0,
        DropoutMode::Eval,
        false,
        &mut unused,
    )?;
    gradient_check(&net.flatten(), &grad.flatten(), 1e-6, |p| {
        let mut n = net.clone();
        n.load_flat(p).expect("same size");
        n.joint_loss(
            x.view(),
            imgs.view(),
            0.7,
            0.0,
            DropoutMode::Eval,
            false,
            &mut unused,
        )
        .expect("dims")
        .0
        .total
    })
}

/// Largest principal angle (degrees) between two column spaces.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    s.min().clamp(-1.0, 1.0).acos().to_degrees()
}

/// Trains a linear autoencoder (no coupling) on exactly rank-`rank` data and
/// returns the largest principal angle between the decoder's column space and
/// the top principal subspace.
pub fn pca_subspace_angle(samples: usize, dim: usize, rank: usize, epochs: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let basis: DMatrix<f64> = DMatrix::from_fn(dim, rank, |_, _| StandardNormal.sample(&mut rng));
    let offset: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut shapes = Array2::zeros((samples, dim));
    for i in 0..samples {
        let z: Vec<f64> = (0..rank)
            .map(|j| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (rank - j) as f64 * e
            })
            .collect();
        for r in 0..dim {
            shapes[[i, r]] = offset[r] + (0..rank).map(|j| basis[(r, j)] * z[j]).sum::<f64>();
        }
    }
    let spec = NetworkSpec {
        shape_dim: dim,
        latent_dim: rank,
        encoder_hidden: vec![],
        image_size: 4,
        conv_channels: vec![1],
        conv_kernel: 3,
        conv_stride: 2,
        fc_hidden: 1,
    };
    let cfg = TrainConfig {
        batch_size: 50,
        lr: 1e-2,
        lambda_couple: 0.0,
        epochs,
        seed: 16,
        weight_decay: 0.0,
        dropout: 0.0,
        precision: Precision::F64,
        ..Default::default()
    };
    let data = TrainingSet::new(
        shapes.clone(),
        Array4::zeros((samples, 1, 4, 4)),
        String::new(),
    )?;
    let fit = fit_network(&data, &spec, &cfg, |_| {})?;
    let w = fit.network.decoder.weight.data();
    let learned = DMatrix::from_row_slice(dim, rank, w);

    let mean = shapes.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = DMatrix::from_fn(samples, dim, |i, j| shapes[[i, j]] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = DMatrix::from_fn(dim, rank, |r, c| v_t[(order[c], r)]);
    Ok(largest_principal_angle(&learned, &top))
}

/// Worst post-alignment RMS over `trials` exactly transformed copies.
pub fn procrustes_recovery(trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                [
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-40.0..40.0),
                ]
            })
            .collect();
        let target = PointCloud::from_points(&pts)?;
        let t = SimilarityTransform {
            rotation: random_rotation(&mut rng),
            scale: rng.random_range(0.5..2.0),
            translation: [
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ],
        };
        let (_, aligned) = procrustes_align(&t.apply(&target), &target)?;
        worst = worst.max(rms_distance(&aligned, &target)?);
    }
    Ok(worst)
}

/// Triangle, quad and sphere normals plus 0/90/180 angle identities.
pub fn normal_identities() -> Result<std::result::Result<(), String>> {
    let tri = TriangleMesh::new(
        PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])?,
        vec![[0, 1, 2]],
    )?;
    if vertex_normals(&tri).iter().any(|n| *n != [0.0, 0.0, 1.0]) {
        return Ok(Err("single triangle normal is not +z".into()));
    }
    let quad_pts = PointCloud::from_points(&[
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
    ])?;
    let up = TriangleMesh::new(quad_pts.clone(), vec![[0, 1, 2], [0, 2, 3]])?;
    let down = TriangleMesh::new(quad_pts, vec![[0, 2, 1], [0, 3, 2]])?;
    if vertex_normals(&up).iter().any(|n| *n != [0.0, 0.0, 1.0])
        || vertex_normals(&down).iter().any(|n| *n != [0.0, 0.0, -1.0])
    {
        return Ok(Err("quad normals do not follow winding".into()));
    }
    let sphere = icosphere(3);
    let mut worst: f64 = 0.0;
    for (i, n) in vertex_normals(&sphere).into_iter().enumerate() {
        worst = worst.max(normal_angle(n, sphere.cloud().point(i))?);
    }
    if worst >= 5.0 {
        return Ok(Err(format!("sphere normal {worst:.3} deg off radial")));
    }
    let ids = [
        normal_angle([0.3, -0.2, 0.9], [0.3, -0.2, 0.9])?,
        normal_angle([1.0, 0.0, 0.0], [0.0, 0.0, 2.0])? - 90.0,
        normal_angle([0.3, -0.2, 0.9], [-0.3, 0.2, -0.9])? - 180.0,
    ];
    if ids.iter().any(|e| e.abs() > 1e-9) {
        return Ok(Err(format!("angle identities off by {ids:?}")));
    }
    Ok(Ok(()))
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn grad_outcome(r: GradCheckReport) -> (bool, String) {
    (
        r.max_rel_error < GRAD_TOLERANCE,
        format!(
            "max rel err {:.2e} over {} params (worst #{})",
            r.max_rel_error, r.checked, r.worst_index
        ),
    )
}

/// Runs every check in order.
pub fn run_battery(fault: Fault) -> Vec<CheckOutcome> {
    vec![
        timed("gradient: dense", || check_dense(fault).map(grad_outcome)),
        timed("gradient: conv", || check_conv().map(grad_outcome)),
        timed("gradient: relu+dropout", || {
            check_activations().map(grad_outcome)
        }),
        timed("gradient: joint loss", || {
            check_joint_loss().map(grad_outcome)
        }),
        timed("linear autoencoder spans PCA subspace", || {
            let a = pca_subspace_angle(500, 50, 5, PCA_EPOCHS)?;
            Ok((
                a < PCA_ANGLE_LIMIT_DEG,
                format!("largest principal angle {a:.4} deg"),
            ))
        }),
        timed("procrustes recovery", || {
            let rms = procrustes_recovery(100)?;
            Ok((
                rms < PROCRUSTES_RMS_LIMIT,
                format!("worst rms {rms:.2e} over 100 trials"),
            ))
        }),
        timed("normal identities", || {
            Ok(match normal_identities()? {
                Ok(()) => (true, "triangle, quad, sphere, 0/90/180".into()),
                Err(msg) => (false, msg),
            })
        }),
    ]
}

pub const PCA_EPOCHS: usize = 200;
