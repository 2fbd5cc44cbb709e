//! Experiment harness: configuration documents, training runs with their
//! on-disk layout, the stream and gradient-gate ablation grids, and the
//! loss-weight evolution run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evolution::{evolve, write_history_csv, EvoConfig, EvoOutcome, Genome, TrainingFitness};
use crate::synthdata::{DataConfig, Dataset, Manifest, VideoSample};
use crate::tensor::io::{write_ten, TenArray};
use crate::tensor::Tensor;
use crate::towers::{GradientGate, Model, ModelConfig, Stream};
use crate::training::{train, LossWeights, MetricsWriter, TrainConfig, TrainOutcome};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const INTERMEDIATES_DIR: &str = "intermediates";
pub const ABLATION_SUMMARY: &str = "ablation_summary.csv";
pub const ABLATION_RUNS: &str = "ablation_runs.csv";
pub const EVOLUTION_HISTORY: &str = "history.csv";
pub const BEST_WEIGHTS: &str = "best_weights.json";

/// Everything needed to reproduce a run, apart from the dataset itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Generator settings; `gen-data` uses them as defaults for its flags.
    pub data: DataConfig,
    /// Architecture. Clip dimensions and class count are taken from the
    /// dataset at run time, and `streams` from the top-level field.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evolve: EvoConfig,
    pub streams: Vec<Stream>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            evolve: EvoConfig::default(),
            streams: Stream::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn set_streams(&mut self, mut streams: Vec<Stream>) {
        streams.sort();
        streams.dedup();
        self.streams = streams;
    }

    /// Model configuration for a dataset: streams from this config, clip
    /// size and class count from the manifest.
    pub fn model_for(&self, manifest: &Manifest) -> Result<ModelConfig> {
        if manifest.num_seg_classes != self.model.segnet.num_classes {
            return Err(Error::config(format!(
                "dataset has {} segmentation classes, segnet predicts {}",
                manifest.num_seg_classes, self.model.segnet.num_classes
            )));
        }
        let mut streams = self.streams.clone();
        streams.sort();
        let cfg = ModelConfig {
            num_actions: manifest.num_actions,
            frames: manifest.frames,
            height: manifest.height,
            width: manifest.width,
            streams,
            ..self.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.streams.contains(&Stream::Rgb) {
            return Err(Error::config("streams must include rgb"));
        }
        self.train.validate()?;
        self.evolve.validate()
    }
}

/// Trains one model into `out`: config snapshot, `metrics.csv`, checkpoint
/// and, when `dump` is set, the flow fields and segmentation logits of the
/// validation clips.
pub fn run_training(cfg: &ExperimentConfig, data: &Dataset, out: &Path, dump: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_for(&data.manifest)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;

    let mut model = Model::<f32>::new(model_cfg, cfg.train.seed)?;
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let outcome = train(&mut model, &data.train, &data.val, &cfg.train, Some(&mut metrics))?;
    let extra = serde_json::json!({
        "train": cfg.train,
        "dataset_seed": data.manifest.generator_seed,
        "val_acc_merged": outcome.final_eval.acc_merged,
    });
    checkpoint::save(&model, &out.join(CHECKPOINT_DIR), extra)?;
    if dump {
        dump_intermediates(&model, &data.val, cfg.train.batch_size, &out.join(INTERMEDIATES_DIR))?;
    }
    Ok(outcome)
}

fn stack_clips(samples: &[VideoSample]) -> Result<Tensor<f32>> {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].frames.shape());
    let values = samples.iter().flat_map(|s| s.frames.values().iter().copied()).collect();
    Tensor::new(shape, values)
}

/// Writes `clip_%06d_flow.ten` (`[T-1, 2, H, W]`) and `clip_%06d_seg.ten`
/// (`[T, K_seg, h, w]` logits) for every clip the model has the stream for.
pub fn dump_intermediates(model: &Model<f32>, samples: &[VideoSample], batch: usize, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let p = model.predict(&stack_clips(chunk)?)?;
        let n = chunk.len();
        let mut write = |t: &Tensor<f32>, kind: &str, per_clip: Vec<usize>| -> Result<()> {
            let size: usize = per_clip.iter().product();
            for (i, s) in chunk.iter().enumerate() {
                let part = Tensor::new(per_clip.clone(), t.values()[i * size..(i + 1) * size].to_vec())?;
                let path = dir.join(format!("clip_{:06}_{kind}.ten", s.clip_id));
                write_ten(&path, &TenArray::from_tensor(&part))?;
                written += 1;
            }
            Ok(())
        };
        if let Some(flow) = &p.flow {
            write(flow, "flow", flow.shape()[1..].to_vec())?;
        }
        if let Some(seg) = &p.seg_logits {
            let s = seg.shape();
            write(seg, "seg", vec![s[0] / n, s[1], s[2], s[3]])?;
        }
    }
    Ok(written)
}

fn streams_label(streams: &[Stream]) -> String {
    streams.iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
}

fn gate_label(gate: GradientGate) -> &'static str {
    match gate {
        GradientGate::Stop => "stop",
        GradientGate::Propagate => "propagate",
    }
}

/// One cell of an ablation table with its per-seed results.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    /// `stream` for the stream grid, `gate` for the gradient-gate grid.
    pub table: &'static str,
    pub streams: Vec<Stream>,
    pub gate: GradientGate,
    /// Final merged top-1 per successful seed.
    pub values: Vec<f64>,
    pub failed: usize,
}

impl AblationCell {
    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    /// Sample standard deviation (0 for a single value).
    pub fn sd(&self) -> Option<f64> {
        let m = self.mean()?;
        let n = self.values.len();
        if n < 2 {
            return Some(0.0);
        }
        Some((self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
    }
}

/// Stream subsets of the stream grid, rgb first.
pub fn stream_grid() -> Vec<Vec<Stream>> {
    use Stream::*;
    vec![vec![Rgb], vec![Rgb, Semantic], vec![Rgb, Flow], vec![Rgb, Flow, Semantic]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub streams: Vec<Stream>,
    pub gate: GradientGate,
    pub seed: u64,
    pub result: std::result::Result<f64, String>,
}

/// Runs the stream grid (all four subsets, gradients propagated) and the
/// gate grid (stop vs propagate for the three multi-stream subsets) for
/// every seed. Propagate runs are shared between the two grids. A failing
/// run is logged and recorded; the grid carries on.
pub fn run_ablation(base: &ExperimentConfig, data: &Dataset, out: &Path, seeds: &[u64]) -> Result<Vec<AblationCell>> {
    base.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let grid = stream_grid();
    let mut plan = Vec::new();
    for streams in &grid {
        plan.push((streams.clone(), GradientGate::Propagate));
        if streams.len() > 1 {
            plan.push((streams.clone(), GradientGate::Stop));
        }
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for (streams, gate) in &plan {
            let mut cfg = base.clone();
            cfg.set_streams(streams.clone());
            cfg.train.seed = seed;
            cfg.train.gradient_gate = *gate;
            let name = format!("{}_{}_seed{seed}", streams_label(streams).replace('+', "-"), gate_label(*gate));
            log::info!("ablation run {name}");
            let result = run_training(&cfg, data, &out.join("runs").join(&name), false)
                .map(|o| o.final_eval.acc_merged)
                .map_err(|e| {
                    log::error!("ablation run {name} failed: {e}");
                    e.to_string()
                });
            runs.push(AblationRun {
                streams: streams.clone(),
                gate: *gate,
                seed,
                result,
            });
        }
    }
    write_ablation_runs(&out.join(ABLATION_RUNS), &runs)?;

    let cell = |table, streams: &Vec<Stream>, gate| {
        let mine: Vec<&AblationRun> = runs.iter().filter(|r| &r.streams == streams && r.gate == gate).collect();
        AblationCell {
            table,
            streams: streams.clone(),
            gate,
            values: mine.iter().filter_map(|r| r.result.as_ref().ok().copied()).collect(),
            failed: mine.iter().filter(|r| r.result.is_err()).count(),
        }
    };
    let mut cells: Vec<AblationCell> = grid.iter().map(|s| cell("stream", s, GradientGate::Propagate)).collect();
    for streams in grid.iter().filter(|s| s.len() > 1) {
        cells.push(cell("gate", streams, GradientGate::Stop));
        cells.push(cell("gate", streams, GradientGate::Propagate));
    }
    write_ablation_summary(&out.join(ABLATION_SUMMARY), &cells)?;
    Ok(cells)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Integrity(format!("{}: {other:?}", path.display())),
    }
}

fn write_ablation_runs(path: &Path, runs: &[AblationRun]) -> Result<()> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["streams", "gradient", "seed", "acc_merged", "error"]).map_err(&err)?;
    for r in runs {
        let (acc, msg) = match &r.result {
            Ok(a) => (format!("{a:.6}"), String::new()),
            Err(m) => (String::new(), m.clone()),
        };
        w.write_record([streams_label(&r.streams), gate_label(r.gate).into(), r.seed.to_string(), acc, msg])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const ABLATION_COLUMNS: [&str; 7] = ["table", "streams", "gradient", "runs", "failed", "mean", "sd"];

fn write_ablation_summary(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(ABLATION_COLUMNS).map_err(&err)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for c in cells {
        w.write_record([
            c.table.to_string(),
            streams_label(&c.streams),
            gate_label(c.gate).to_string(),
            c.values.len().to_string(),
            c.failed.to_string(),
            fmt(c.mean()),
            fmt(c.sd()),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Contents of `best_weights.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSummary {
    pub weights: LossWeights,
    pub fitness: f64,
    pub genome_id: usize,
    /// Best fitness among the randomly initialized population.
    pub best_initial_fitness: f64,
    pub uniform_fitness: f64,
    pub fixed_fitness: f64,
    pub budget: usize,
    pub train_steps: usize,
}

/// Runs the search with [`TrainingFitness`] (each evaluation trains a fresh
/// model for `evolve.fitness_train_steps` steps), then scores the uniform
/// and `1,0,0,1,1` weightings under the same protocol. Writes `history.csv`
/// and `best_weights.json` into `out`.
pub fn run_evolution(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: &Path,
    workers: usize,
) -> Result<(EvoOutcome, EvolutionSummary)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let fitness = TrainingFitness {
        model: cfg.model_for(&data.manifest)?,
        init_seed: cfg.train.seed,
        train: TrainConfig {
            steps: cfg.evolve.fitness_train_steps,
            ..cfg.train.clone()
        },
        train_set: &data.train,
        val_set: &data.val,
    };
    let outcome = evolve(&cfg.evolve, |w| fitness.evaluate(w), workers)?;
    write_history_csv(&out.join(EVOLUTION_HISTORY), &outcome.history)?;

    let uniform_fitness = fitness.evaluate(&LossWeights::uniform())?;
    let fixed_fitness = fitness.evaluate(&LossWeights::fixed_baseline())?;
    let best: &Genome = &outcome.best;
    let summary = EvolutionSummary {
        weights: best.weights,
        fitness: best.fitness.unwrap_or(0.0),
        genome_id: best.id,
        best_initial_fitness: outcome.history[..cfg.evolve.population_size]
            .iter()
            .map(|r| r.fitness)
            .fold(0.0, f64::max),
        uniform_fitness,
        fixed_fitness,
        budget: cfg.evolve.budget,
        train_steps: cfg.evolve.fitness_train_steps,
    };
    let path = out.join(BEST_WEIGHTS);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((outcome, summary))
}

/// Parses `--weights`: either five comma-separated numbers or a JSON file
/// holding a weights object or an evolution summary.
pub fn parse_weights_arg(arg: &str) -> Result<LossWeights> {
    let path = PathBuf::from(arg);
    if !path.is_file() {
        return arg.parse();
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let weights = value.get("weights").cloned().unwrap_or(value);
    let w: LossWeights = serde_json::from_value(weights)
        .map_err(|e| Error::input(format!("{}: no loss weights ({e})", path.display())))?;
    w.validate()?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sd_of_cells() {
        let c = AblationCell {
            table: "stream",
            streams: vec![Stream::Rgb],
            gate: GradientGate::Propagate,
            values: vec![0.5, 0.7, 0.6],
            failed: 0,
        };
        assert!((c.mean().unwrap() - 0.6).abs() < 1e-12);
        assert!((c.sd().unwrap() - 0.1).abs() < 1e-12);
        let empty = AblationCell { values: vec![], ..c };
        assert_eq!(empty.mean(), None);
    }

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"streams": ["rgb"]}"#).unwrap();
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn weights_argument_forms() {
        assert_eq!(parse_weights_arg("1,0,0,1,1").unwrap(), LossWeights::fixed_baseline());
        assert!(parse_weights_arg("1,0,0").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        std::fs::write(&p, r#"{"weights": {"rgb": 1, "flow": 0, "semantic": 0, "merged": 1, "interm": 1}, "fitness": 0.5}"#)
            .unwrap();
        assert_eq!(parse_weights_arg(p.to_str().unwrap()).unwrap(), LossWeights::fixed_baseline());
    }
}
