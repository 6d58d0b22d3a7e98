use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

pub const SCALE_NOTE: &str = "\
Defaults are desk scale. For reference, the full-scale setup used 10000
samples, a 280-dimensional latent code and batch size 60; pass
`--count 10000`, `--latent-dim 280`, `--batch 60` to approximate it.

Every subcommand accepts `--config FILE.json` whose keys are the long flag
names in snake_case; flags given on the command line win.

Exit codes: 0 success, 1 usage or validation error, 2 I/O or format error,
3 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "isrm", version, about = "Inverse rendering with a jointly learned linear shape space", after_help = SCALE_NOTE)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the procedural face model and write a rendered training corpus.
    GenData(GenDataArgs),
    /// Train the autoencoder and CNN jointly on a generated corpus.
    Train(TrainArgs),
    /// Reconstruct point clouds from images with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on a dataset split and write reports.
    Evaluate(EvaluateArgs),
    /// Run the fast self-check battery.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    DenseBackward,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataArgs {
    /// JSON file with default values for the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Number of samples [default: 2000; full scale: 10000].
    #[arg(long)]
    pub count: Option<usize>,
    /// Fraction of samples rendered at a random yaw [default: 0.2].
    #[arg(long)]
    pub pose_fraction: Option<f64>,
    /// Largest absolute yaw in degrees, at most 90 [default: 90].
    #[arg(long)]
    pub max_yaw: Option<f64>,
    /// Basis size of the generating model [default: 10].
    #[arg(long)]
    pub d_true: Option<usize>,
    /// Vertices per side of the face grid [default: 39, i.e. 1521 vertices].
    #[arg(long)]
    pub n_grid: Option<usize>,
    /// Seed of the generating model's basis [default: 7].
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Seed for coefficients and poses [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out fraction [default: 0.1].
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// JSON file with default values for the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Latent code size [default: 16; full scale: 280].
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 32; full scale: 60].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam step size [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the coupling loss [default: 1.0]; 0 trains the CNN on nothing.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decoupled weight decay [default: 5e-4].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Dropout after the CNN's hidden dense layer [default: 0.6].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Parameter precision [default: f64].
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Run every computation on one thread.
    #[arg(long)]
    pub deterministic: bool,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss log path [default: next to the checkpoint, `<stem>_loss.csv`].
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructArgs {
    /// JSON file with default values for the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by train.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// A single PGM image.
    #[arg(long, conflicts_with = "dataset")]
    pub image: Option<PathBuf>,
    /// Dataset directory; reconstructs the images selected by --ids.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Sample ids, e.g. `0..4` (inclusive) or `1,5,9` [default: the test split].
    #[arg(long)]
    pub ids: Option<String>,
    /// Output directory for PLY files and latents.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    /// JSON file with default values for the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by train.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to score [default: test].
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Also train and score the direct coefficient-regression baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Baseline epochs [default: the checkpoint's epoch count].
    #[arg(long)]
    pub baseline_epochs: Option<usize>,
    /// Comma-separated yaw angles for a pose sweep, e.g. `0,30,60,90`.
    #[arg(long)]
    pub pose_sweep: Option<String>,
    /// Output directory for CSV, JSON and heatmaps.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct VerifyArgs {
    /// Corrupt a component on purpose to confirm the battery catches it.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

/// Fills every unset flag from the config file.
macro_rules! overlay {
    ($flags:ident, $file:ident, [$($opt:ident),*], [$($flag:ident),*]) => {
        $( if $flags.$opt.is_none() { $flags.$opt = $file.$opt; } )*
        $( $flags.$flag |= $file.$flag; )*
    };
}

impl GenDataArgs {
    pub fn overlay(mut self, file: Self) -> Self {
        overlay!(
            self,
            file,
            [
                count,
                pose_fraction,
                max_yaw,
                d_true,
                n_grid,
                model_seed,
                seed,
                test_fraction,
                out
            ],
            []
        );
        self
    }
}

impl TrainArgs {
    pub fn overlay(mut self, file: Self) -> Self {
        overlay!(
            self,
            file,
            [
                data,
                latent_dim,
                epochs,
                batch,
                lr,
                lambda,
                seed,
                weight_decay,
                dropout,
                precision,
                out,
                loss_csv
            ],
            [deterministic]
        );
        self
    }
}

impl ReconstructArgs {
    pub fn overlay(mut self, file: Self) -> Self {
        overlay!(self, file, [model, image, dataset, ids, out], []);
        self
    }
}

impl EvaluateArgs {
    pub fn overlay(mut self, file: Self) -> Self {
        overlay!(
            self,
            file,
            [model, data, split, baseline_epochs, pose_sweep, out_dir],
            [baseline]
        );
        self
    }
}

/// `a..b` / `a-b` (inclusive) or a comma list.
pub fn parse_ids(spec: &str) -> Result<Vec<usize>, String> {
    let spec = spec.trim();
    let range = spec.split_once("..").or_else(|| spec.split_once('-'));
    if let Some((a, b)) = range {
        let a: usize = a
            .trim()
            .parse()
            .map_err(|_| format!("bad id range {spec:?}"))?;
        let b: usize = b
            .trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| format!("bad id range {spec:?}"))?;
        if a > b {
            return Err(format!("empty id range {spec:?}"));
        }
        return Ok((a..=b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad id {s:?}")))
        .collect()
}

pub fn parse_angles(spec: &str) -> Result<Vec<f64>, String> {
    if spec.trim().is_empty() {
        return Ok(Vec::new());
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad angle {s:?}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_forms() {
        assert_eq!(parse_ids("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_ids("2-3").unwrap(), vec![2, 3]);
        assert_eq!(parse_ids("1, 5,9").unwrap(), vec![1, 5, 9]);
        assert!(parse_ids("4..1").is_err());
        assert!(parse_ids("x").is_err());
    }

    #[test]
    fn angles() {
        assert_eq!(parse_angles("0,30,-60").unwrap(), vec![0.0, 30.0, -60.0]);
        assert!(parse_angles("").unwrap().is_empty());
    }

    #[test]
    fn flags_win_over_config() {
        let flags = TrainArgs {
            epochs: Some(3),
            ..Default::default()
        };
        let file: TrainArgs =
            serde_json::from_str(r#"{"epochs": 9, "lr": 0.01, "deterministic": true}"#).unwrap();
        let merged = flags.overlay(file);
        assert_eq!(merged.epochs, Some(3));
        assert_eq!(merged.lr, Some(0.01));
        assert!(merged.deterministic);
        assert!(serde_json::from_str::<TrainArgs>(r#"{"epoch": 9}"#).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
