use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use airstreams::checkpoint;
use airstreams::evolution::worker_count;
use airstreams::experiment::{
    parse_weights_arg, run_ablation, run_evolution, run_training, ExperimentConfig, CHECKPOINT_DIR,
};
use airstreams::gradcheck::{run_suite, Suite};
use airstreams::synthdata::{generate_dataset, load_teacher_masks, Dataset, Split};
use airstreams::towers::{flop_report, parse_streams, GradientGate, ModelConfig};
use airstreams::training::{evaluate_report, Metric};
use airstreams::{Error, Result};

#[derive(Parser)]
#[command(name = "airstreams", version, about = "Multi-stream video recognition experiments on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Experiment config whose `data` section provides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        num_train: Option<usize>,
        #[arg(long)]
        num_val: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of rgb,flow,semantic.
        #[arg(long)]
        streams: Option<String>,
        /// w_rgb,w_flow,w_semantic,w_merged,w_interm, or a weights JSON file.
        #[arg(long)]
        weights: Option<String>,
        /// Block end-task gradients into the flow layer and segmentation net.
        #[arg(long)]
        stop_gradient: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Directory of teacher masks replacing the generator's masks.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Write validation flow fields and segmentation logits as .ten files.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Stream and gradient-gate ablation grids.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds per cell, counting up from the config's seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evolve the five loss weights.
    Evolve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        tournament: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training steps per fitness evaluation.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        /// Checkpoint directory, or a run directory containing one.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "top1")]
        metric: String,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Finite-difference gradient checks at f64.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        /// Overrides the defaults (1e-5 for primitives, 1e-4 for composed layers).
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-frame forward FLOPs of a model configuration.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        streams: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::input(format!("dataset directory {} does not exist", dir.display())));
    }
    Dataset::load(dir)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            config,
            num_train,
            num_val,
            seed,
            frames,
            size,
            classes,
        } => {
            let mut cfg = load_config(config.as_deref())?.data;
            cfg.num_train = num_train.unwrap_or(cfg.num_train);
            cfg.num_val = num_val.unwrap_or(cfg.num_val);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.frames = frames.unwrap_or(cfg.frames);
            cfg.size = size.unwrap_or(cfg.size);
            cfg.num_actions = classes.unwrap_or(cfg.num_actions);
            let m = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} train + {} val clips ({} classes, {} frames, {}x{}, seed {}) to {}",
                m.num_train,
                m.num_val,
                m.num_actions,
                m.frames,
                m.height,
                m.width,
                m.generator_seed,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            streams,
            weights,
            stop_gradient,
            seed,
            steps,
            teacher,
            dump_intermediates,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = streams {
                cfg.set_streams(parse_streams(&s)?);
            }
            if let Some(w) = weights {
                cfg.train.loss_weights = parse_weights_arg(&w)?;
            }
            if stop_gradient {
                cfg.train.gradient_gate = GradientGate::Stop;
            }
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            let mut ds = load_data(&data)?;
            if let Some(dir) = teacher {
                let masks = load_teacher_masks(&dir, &ds.manifest)?;
                ds.apply_teacher_masks(masks)?;
            }
            let outcome = run_training(&cfg, &ds, &out, dump_intermediates)?;
            println!("val merged top-1 {:.4}", outcome.final_eval.acc_merged);
        }
        Command::Ablate {
            config,
            data,
            out,
            seeds,
            steps,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            if seeds == 0 {
                return Err(Error::input("--seeds must be at least 1"));
            }
            let base = cfg.train.seed;
            let seeds: Vec<u64> = (0..seeds).map(|i| base + i).collect();
            let ds = load_data(&data)?;
            for c in run_ablation(&cfg, &ds, &out, &seeds)? {
                let streams: Vec<&str> = c.streams.iter().map(|s| s.name()).collect();
                let gate = if c.gate == GradientGate::Stop { "stop" } else { "propagate" };
                match (c.mean(), c.sd()) {
                    (Some(m), Some(sd)) => println!("{:<6} {:<20} {gate:<9} {m:.4} ± {sd:.4}", c.table, streams.join("+")),
                    _ => println!("{:<6} {:<20} {gate:<9} all runs failed", c.table, streams.join("+")),
                }
            }
        }
        Command::Evolve {
            config,
            data,
            out,
            budget,
            population,
            tournament,
            seed,
            steps,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let e = &mut cfg.evolve;
            e.budget = budget.unwrap_or(e.budget);
            e.population_size = population.unwrap_or(e.population_size);
            e.tournament_size = tournament.unwrap_or(e.tournament_size);
            e.rng_seed = seed.unwrap_or(e.rng_seed);
            e.fitness_train_steps = steps.unwrap_or(e.fitness_train_steps);
            let ds = load_data(&data)?;
            let (_, s) = run_evolution(&cfg, &ds, &out, worker_count())?;
            println!("best weights {} fitness {:.4}", s.weights, s.fitness);
            println!("best initial {:.4}  uniform {:.4}  fixed 1,0,0,1,1 {:.4}", s.best_initial_fitness, s.uniform_fitness, s.fixed_fitness);
        }
        Command::Eval {
            checkpoint: dir,
            data,
            metric,
            split,
        } => {
            let metric: Metric = metric.parse()?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(Error::input(format!("unknown split {other:?}; use train or val"))),
            };
            let dir = if dir.join(CHECKPOINT_DIR).is_dir() { dir.join(CHECKPOINT_DIR) } else { dir };
            let (model, _) = checkpoint::load(&dir)?;
            let ds = load_data(&data)?;
            let m = &ds.manifest;
            if m.num_actions != model.config.num_actions {
                return Err(Error::input(format!(
                    "checkpoint predicts {} actions, dataset has {}",
                    model.config.num_actions, m.num_actions
                )));
            }
            let report = evaluate_report(&model, ds.split(split), &Default::default())?;
            println!("{:.4}", report.metric(metric, m.num_actions));
        }
        Command::Gradcheck { module, tolerance, seed } => {
            let suite: Suite = module.parse()?;
            let reports = run_suite(suite, tolerance, seed)?;
            println!("{:<28} {:>8} {:>12} {:>10}  result", "case", "checked", "max_rel_err", "tolerance");
            for r in &reports {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                println!("{:<28} {:>8} {:>12.3e} {:>10.1e}  {verdict}", r.name, r.checked, r.max_rel_error, r.tolerance);
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            println!("{} of {} cases passed", reports.len() - failed, reports.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Flops { config, streams } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = streams {
                cfg.set_streams(parse_streams(&s)?);
            }
            let model = ModelConfig {
                streams: cfg.streams.clone(),
                ..cfg.model
            };
            let r = flop_report(&model)?;
            for (name, v) in [
                ("rgb_tower", r.rgb_tower),
                ("flow_layer", r.flow_layer),
                ("flow_tower", r.flow_tower),
                ("segnet", r.segnet),
                ("semantic_tower", r.semantic_tower),
                ("merged_tower", r.merged_tower),
                ("total", r.total),
            ] {
                println!("{name:<15} {v:>14.0}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
