//! The `pft` command line: `train`, `eval`, `inspect` and `synth`.
//!
//! Every hyperparameter lives in a JSON run configuration; flags only pick
//! paths, the seed and the module switches.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::{load_image, pnm, write_manifest, DataSource, DatasetRecord, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{distance_matrix, evaluate_with, extract_features, Metric};
use crate::model::{ModelConfig, Modules, PftModel};
use crate::training::{dense_labels, train, TrainConfig};
use crate::vit::attention_rollout;

pub const CHECKPOINT_FILE: &str = "checkpoint.pft";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const HEATMAP_FILE: &str = "heatmap.pgm";
pub const PATCH_SIM_FILE: &str = "patch_sim.csv";
const PROGRESS_EVERY: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `synth:...` spec or manifest path.
    pub train: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: SynthSpec::default().to_string() }
    }
}

/// Top-level JSON run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        DataSource::parse(&self.data.train).map(|_| ())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "pft", version, about = "Train and evaluate partial-feature re-identification transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and config snapshot.
    Train(TrainArgs),
    /// Rank a gallery for every query and print CMC/mAP as JSON.
    Eval(EvalArgs),
    /// Write the attention heat map and patch similarity matrix of one image.
    Inspect(InspectArgs),
    /// Write a synthetic dataset as PPM images plus manifest.csv.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated active modules (`pfde,frm,ssm`); empty for the baseline.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest path or `synth:` spec.
    #[arg(long)]
    pub query: String,
    /// Manifest path or `synth:` spec.
    #[arg(long)]
    pub gallery: String,
    #[arg(long, default_value = "cosine")]
    pub metric: Metric,
    /// Defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep same-identity same-camera gallery entries.
    #[arg(long)]
    pub no_exclusion: bool,
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// P6 image path or `synth:` spec (its first record is used).
    #[arg(long)]
    pub image: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: SynthSpec,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
}

/// Parses the process arguments, runs the command and maps errors to exit
/// codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let summary = match cli.command {
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Inspect(a) => cmd_inspect(&a)?,
        Command::Synth(a) => cmd_synth(&a)?,
    };
    println!("{summary}");
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<serde_json::Value> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(list) = &args.ablation {
        cfg.model.modules = Modules::parse(list)?;
        cfg.model.validate()?;
    }
    let records = DataSource::parse(&cfg.data.train)?.load(&cfg.model.patch)?;
    let (_, classes) = dense_labels(&records);
    let mut model = PftModel::new(&cfg.model, classes.max(1), cfg.train.seed)?;

    create_dir(&args.out)?;
    cfg.save(&args.out.join(CONFIG_FILE))?;
    let metrics_path = args.out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    let total = cfg.train.total_steps;
    let logs = train(&mut model, &records, &cfg.train, |log| {
        let line = serde_json::to_string(log).expect("step log serializes");
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if log.step % PROGRESS_EVERY == 0 || log.step + 1 == total {
            eprintln!("step {}/{total} loss {:.4} lr {:.6}", log.step + 1, log.loss, log.lr);
        }
        Ok(())
    });
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let logs = logs?;

    let ckpt = args.out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, model.params().iter())?;
    Ok(json!({
        "checkpoint": ckpt,
        "modules": cfg.model.modules.to_string(),
        "param_count": model.param_count(),
        "steps": logs.len(),
        "initial_loss": logs.first().map(|l| l.loss),
        "final_loss": logs.last().map(|l| l.loss),
    }))
}

/// Loads a checkpoint against its run configuration.
pub fn load_model(checkpoint_path: &Path, config: Option<&Path>) -> Result<(PftModel, RunConfig)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let model = PftModel::from_tensors(&cfg.model, checkpoint::load(checkpoint_path)?)?;
    Ok((model, cfg))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<serde_json::Value> {
    let (model, cfg) = load_model(&args.checkpoint, args.config.as_deref())?;
    let query = DataSource::parse(&args.query)?.load(&cfg.model.patch)?;
    let gallery = DataSource::parse(&args.gallery)?.load(&cfg.model.patch)?;
    let dist = distance_matrix(&extract_features(&model, &query)?, &extract_features(&model, &gallery)?, args.metric)?;
    let ids = |r: &[DatasetRecord]| r.iter().map(|x| x.person_id).collect::<Vec<_>>();
    let cams = |r: &[DatasetRecord]| r.iter().map(|x| x.camera_id).collect::<Vec<_>>();
    let report = evaluate_with(
        &dist,
        &ids(&query),
        &ids(&gallery),
        &cams(&query),
        &cams(&gallery),
        args.max_rank,
        !args.no_exclusion,
    )?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<serde_json::Value> {
    let (model, cfg) = load_model(&args.checkpoint, args.config.as_deref())?;
    let patch = &cfg.model.patch;
    let record = if args.image.starts_with("synth:") {
        let spec: SynthSpec = args.image.parse()?;
        spec.generate(patch)?.swap_remove(0)
    } else {
        let image = load_image(Path::new(&args.image), patch)?;
        DatasetRecord { image, person_id: 0, camera_id: 0, occluder: None }
    };
    let grid = model.grid();
    let (layers, tokens) = model.inspect(&record.image)?;
    let heat = attention_rollout(&layers, grid)?;

    create_dir(&args.out)?;
    let max = heat.data().iter().copied().fold(0.0, f64::max);
    let samples = heat.data().iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }).collect();
    let heatmap = args.out.join(HEATMAP_FILE);
    pnm::write(&heatmap, &pnm::Pnm { width: grid.cols, height: grid.rows, channels: 1, samples })?;

    let sim_path = args.out.join(PATCH_SIM_FILE);
    write_similarity(&sim_path, &patch_similarity(&tokens))?;

    let occluder_mass = record.occluder.map(|r| {
        (0..grid.count)
            .filter(|&i| {
                let (row, col) = (i / grid.cols, i % grid.cols);
                r.contains(row * patch.stride + patch.patch / 2, col * patch.stride + patch.patch / 2)
            })
            .map(|i| heat.data()[i])
            .sum::<f64>()
    });
    Ok(json!({
        "grid": [grid.rows, grid.cols],
        "heatmap": heatmap,
        "patch_sim": sim_path,
        "occluder_mass": occluder_mass,
    }))
}

/// Cosine similarity between the patch rows of `[N+1, D]` tokens, the class
/// row excluded; `N×N` row-major.
pub fn patch_similarity(tokens: &crate::Tensor) -> Vec<Vec<f64>> {
    let rows: Vec<&[f64]> = (1..tokens.rows()).map(|i| tokens.row(i)).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)).collect();
    rows.iter()
        .enumerate()
        .map(|(i, a)| {
            rows.iter()
                .enumerate()
                .map(|(j, b)| a.iter().zip(*b).map(|(x, y)| x * y).sum::<f64>() / (norms[i] * norms[j]))
                .collect()
        })
        .collect()
}

fn write_similarity(path: &Path, sim: &[Vec<f64>]) -> Result<()> {
    let fail = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(fail)?;
    for row in sim {
        w.write_record(row.iter().map(f64::to_string)).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<serde_json::Value> {
    let patch = crate::vit::PatchConfig { height: args.height, width: args.width, ..Default::default() };
    let records = args.spec.generate(&patch)?;
    write_manifest(&args.out, &records)?;
    Ok(json!({ "manifest": args.out.join("manifest.csv"), "images": records.len() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_and_rejects_typos() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"train":{"total_steps":5}}"#).unwrap();
        assert_eq!(partial.train.total_steps, 5);
        assert_eq!(partial.model, ModelConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train":{"total_step":5}}"#).is_err());
    }

    #[test]
    fn missing_config_is_a_config_error_naming_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/run.json"));
    }

    #[test]
    fn field_level_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model":{"patch":{"height":90}}}"#).unwrap();
        let err = RunConfig::load(&p).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        std::fs::write(&p, r#"{"train":{"batch_size":10}}"#).unwrap();
        assert!(RunConfig::load(&p).unwrap_err().to_string().contains("train.instances_per_id"));
    }

    #[test]
    fn similarity_has_unit_diagonal() {
        let t = crate::Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let s = patch_similarity(&t);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0][1], 0.0);
        assert!((s[0][2] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(s.iter().enumerate().all(|(i, r)| (r[i] - 1.0).abs() < 1e-15));
    }
}
