mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde::de::DeserializeOwned;

use isrm_core::checkpoint::write_loss_csv;
use isrm_core::dataset::{generate_dataset, load_dataset, DatasetConfig, GroundTruth, Split};
use isrm_core::eval::baseline::{evaluate_baseline, train_direct_regression, write_comparison};
use isrm_core::eval::report::{evaluate_model, pose_sweep, write_pose_sweep, write_report};
use isrm_core::image::GrayImage;
use isrm_core::model::NetworkSpec;
use isrm_core::reconstruct::{export_results, reconstruct, reconstruct_batch};
use isrm_core::shape::GroundTruthConfig;
use isrm_core::train::{train_joint_with, Precision, TrainConfig, TrainedModel};
use isrm_core::verify::{run_battery, Fault};
use isrm_core::ErrorKind;

use args::{
    Cli, Command, EvaluateArgs, FaultArg, GenDataArgs, PrecisionArg, ReconstructArgs, SplitArg,
    TrainArgs, VerifyArgs,
};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(isrm_core::Error),
    ChecksFailed(usize),
}

impl From<isrm_core::Error> for CliError {
    fn from(e: isrm_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Io => 2,
                ErrorKind::Numeric => 3,
            },
            CliError::ChecksFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::ChecksFailed(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => isrm_core::Error::MissingFile(path.to_path_buf()),
        _ => isrm_core::Error::io(path, e),
    })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let file = load_config(a.config.as_deref())?;
    let a = a.overlay(file);
    let out = required(a.out, "out")?;
    let gt_default = GroundTruthConfig::default();
    let gt_cfg = GroundTruthConfig {
        n_grid: a.n_grid.unwrap_or(gt_default.n_grid),
        d_true: a.d_true.unwrap_or(gt_default.d_true),
        seed: a.model_seed.unwrap_or(gt_default.seed),
        ..gt_default
    };
    let d = DatasetConfig::default();
    let cfg = DatasetConfig {
        count: a.count.unwrap_or(d.count),
        pose_fraction: a.pose_fraction.unwrap_or(d.pose_fraction),
        max_yaw: a.max_yaw.unwrap_or(d.max_yaw),
        seed: a.seed.unwrap_or(d.seed),
        test_fraction: a.test_fraction.unwrap_or(d.test_fraction),
    };
    cfg.validate()?;
    let start = Instant::now();
    let gt = GroundTruth::build(&gt_cfg)?;
    let (m, _) = generate_dataset(&gt, &cfg, &out)?;
    log::info!("generated in {:.1}s", start.elapsed().as_secs_f64());
    println!(
        "wrote {} samples ({} posed, {} train / {} test, {} vertices, {}x{} images) to {}",
        m.count,
        m.posed,
        m.split_train,
        m.split_test,
        m.n,
        m.resolution,
        m.resolution,
        out.display()
    );
    Ok(())
}

fn default_loss_csv(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_loss.csv"))
}

fn train(a: TrainArgs) -> CliResult {
    let file = load_config(a.config.as_deref())?;
    let a = a.overlay(file);
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: a.batch.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        lambda_couple: a.lambda.unwrap_or(d.lambda_couple),
        epochs: a.epochs.unwrap_or(d.epochs),
        seed: a.seed.unwrap_or(d.seed),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        dropout: a.dropout.unwrap_or(d.dropout),
        precision: match a.precision {
            Some(PrecisionArg::F32) => Precision::F32,
            Some(PrecisionArg::F64) => Precision::F64,
            None => d.precision,
        },
        ..d
    };
    cfg.validate()?;
    if a.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
        {
            log::warn!("could not pin to one thread: {e}");
        }
    }
    if cfg.lambda_couple == 0.0 {
        log::warn!("lambda is 0: the CNN receives no gradient and only its weights decay");
    }
    let dataset = load_dataset(&data)?;
    let set = dataset.training_set(Split::Train)?;
    let mut spec = NetworkSpec::desk(set.shape_dim(), set.image_size());
    if let Some(l) = a.latent_dim {
        spec.latent_dim = l;
    }
    log::info!(
        "training on {} samples: latent {}, batch {}, lr {}, lambda {}, {} epochs",
        set.len(),
        spec.latent_dim,
        cfg.batch_size,
        cfg.lr,
        cfg.lambda_couple,
        cfg.epochs
    );
    let start = Instant::now();
    let model = train_joint_with(&set, &spec, &cfg, |e| {
        log::info!(
            "epoch {}: J1 {:.6} J2 {:.6} total {:.6}",
            e.epoch,
            e.j1,
            e.j2,
            e.total
        );
    })?;
    model.save(&out)?;
    let loss_csv = a.loss_csv.unwrap_or_else(|| default_loss_csv(&out));
    write_loss_csv(&loss_csv, &model.history)?;
    let last = model
        .final_loss()
        .map_or(model.initial_loss.total, |e| e.total);
    println!(
        "trained {} epochs in {:.1}s: loss {:.6} -> {:.6}; checkpoint {}, log {}",
        cfg.epochs,
        start.elapsed().as_secs_f64(),
        model.initial_loss.total,
        last,
        out.display(),
        loss_csv.display()
    );
    Ok(())
}

fn reconstruct_cmd(a: ReconstructArgs) -> CliResult {
    let file = load_config(a.config.as_deref())?;
    let a = a.overlay(file);
    let model_path = required(a.model, "model")?;
    let out = required(a.out, "out")?;
    let model = TrainedModel::load(&model_path)?;
    let paths = match (a.image, a.dataset) {
        (Some(img), None) => {
            if a.ids.is_some() {
                return Err(CliError::Usage("--ids requires --dataset".into()));
            }
            let image = GrayImage::read_pgm(&img)?;
            let r = reconstruct(0, &image, &model)?;
            export_results(&[r], None, &out)?
        }
        (None, Some(dir)) => {
            let ds = load_dataset(&dir)?;
            let ids = match a.ids {
                Some(s) => args::parse_ids(&s).map_err(CliError::Usage)?,
                None => ds.split(Split::Test).iter().map(|r| r.id).collect(),
            };
            let mut imgs = Vec::with_capacity(ids.len());
            for id in ids {
                let r = ds.records.get(id).ok_or_else(|| {
                    CliError::Usage(format!(
                        "id {id} out of range (dataset has {})",
                        ds.records.len()
                    ))
                })?;
                imgs.push((id, &r.image));
            }
            let res = reconstruct_batch(&imgs, &model)?;
            let gt = ds.ground_truth()?;
            let faces =
                (gt.mesh.vertex_count() * 3 == model.spec.shape_dim).then(|| gt.mesh.faces());
            export_results(&res, faces, &out)?
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --image or --dataset".into(),
            ))
        }
    };
    println!("wrote {} PLY file(s) to {}", paths.len(), out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let file = load_config(a.config.as_deref())?;
    let a = a.overlay(file);
    let model_path = required(a.model, "model")?;
    let data = required(a.data, "data")?;
    let out_dir = required(a.out_dir, "out-dir")?;
    let angles = match &a.pose_sweep {
        Some(s) => args::parse_angles(s).map_err(CliError::Usage)?,
        None => Vec::new(),
    };
    let model = TrainedModel::load(&model_path)?;
    let ds = load_dataset(&data)?;
    if ds.source_hash != model.source_hash {
        log::warn!("checkpoint was trained on a different dataset");
    }
    let gt = ds.ground_truth()?;
    let (split, tag) = match a.split.unwrap_or(SplitArg::Test) {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let records = ds.split(split);
    let report = evaluate_model(&model, records, &gt.mesh)?;
    write_report(&report, &gt, &out_dir, tag)?;
    let s = &report.summary;
    println!(
        "{tag}: {} samples, mean MSE {:.6} (mean-shape baseline {:.6}), normal angle mean {:.2} / median {:.2} / p95 {:.2} deg",
        s.count,
        s.corpus_mean_mse,
        s.mean_shape_baseline_mse.unwrap_or(f64::NAN),
        s.mean_normal_angle_deg,
        s.median_normal_angle_deg,
        s.p95_normal_angle_deg
    );
    if a.baseline {
        let cfg = TrainConfig {
            epochs: a.baseline_epochs.unwrap_or(model.config.epochs),
            ..model.config.clone()
        };
        let reg = train_direct_regression(ds.split(Split::Train), &model.spec, &cfg)?;
        let direct = evaluate_baseline(&reg, &gt, records)?;
        let cmp = write_comparison(&report, &direct, &out_dir)?;
        println!(
            "direct regression: mean MSE {:.6}, normal angle mean {:.2} deg",
            cmp.direct.corpus_mean_mse, cmp.direct.mean_normal_angle_deg
        );
    }
    if !angles.is_empty() {
        let z = &records
            .first()
            .ok_or_else(|| CliError::Usage("split is empty".into()))?
            .z_true;
        let points = pose_sweep(&model, &gt, z, &angles)?;
        let path = out_dir.join("pose_sweep.csv");
        write_pose_sweep(&path, &points)?;
        println!(
            "pose sweep over {} angles written to {}",
            points.len(),
            path.display()
        );
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> CliResult {
    let fault = match a.inject_fault {
        Some(FaultArg::DenseBackward) => Fault::DenseBackward,
        None => Fault::None,
    };
    let outcomes = run_battery(fault);
    for o in &outcomes {
        println!(
            "{} {} ({:.2}s): {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        );
    }
    match outcomes.iter().filter(|o| !o.passed).count() {
        0 => Ok(()),
        n => Err(CliError::ChecksFailed(n)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
