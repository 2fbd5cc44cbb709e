//! Tournament evolution over the five loss weights.
//!
//! A population of random weightings is evaluated, then repeatedly a parent
//! is chosen by tournament, one of its weights is redrawn, the child is
//! evaluated and replaces the oldest member. Fitness is any deterministic
//! function of the weights; [`TrainingFitness`] trains a fresh model and
//! reports merged-tower validation accuracy.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::VideoSample;
use crate::towers::{Model, ModelConfig};
use crate::training::{train, LossWeights, TrainConfig};

/// Environment variable capping concurrent fitness evaluations.
pub const WORKERS_ENV: &str = "AIRSTREAMS_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub id: usize,
    pub parent_id: Option<usize>,
    pub weights: LossWeights,
    pub fitness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population_size: usize,
    pub tournament_size: usize,
    /// Total fitness evaluations, including the initial population.
    pub budget: usize,
    pub rng_seed: u64,
    /// Training steps per fitness evaluation.
    pub fitness_train_steps: usize,
    /// Children bred from the same population snapshot before replacement.
    /// 1 is the classic steady-state loop; larger batches expose parallelism.
    pub batch: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population_size: 10,
            tournament_size: 3,
            budget: 100,
            rng_seed: 0,
            fitness_train_steps: 300,
            batch: 1,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.tournament_size == 0 || self.batch == 0 {
            return Err(Error::config("population, tournament and batch sizes must be positive"));
        }
        if self.tournament_size > self.population_size {
            return Err(Error::config(format!(
                "tournament size {} exceeds population size {}",
                self.tournament_size, self.population_size
            )));
        }
        if self.budget < self.population_size {
            return Err(Error::config(format!(
                "budget {} is smaller than the population size {}",
                self.budget, self.population_size
            )));
        }
        Ok(())
    }
}

/// Worker count from [`WORKERS_ENV`], defaulting to the number of logical CPUs.
pub fn worker_count() -> usize {
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).unwrap_or_else(|| {
            log::warn!("ignoring {WORKERS_ENV}={v:?}; using {default}");
            default
        }),
        Err(_) => default,
    }
}

fn random_weights<R: Rng>(rng: &mut R) -> LossWeights {
    LossWeights::from_array(std::array::from_fn(|_| rng.gen::<f64>()))
}

/// `population_size` unevaluated genomes with ids `0..population_size`.
pub fn init_population<R: Rng>(cfg: &EvoConfig, rng: &mut R) -> Vec<Genome> {
    (0..cfg.population_size)
        .map(|id| Genome {
            id,
            parent_id: None,
            weights: random_weights(rng),
            fitness: None,
        })
        .collect()
}

/// Child of `parent` with weight `index` replaced by `value`.
pub fn mutate_with(parent: &Genome, index: usize, value: f64, id: usize) -> Genome {
    let mut w = parent.weights.to_array();
    w[index] = value;
    Genome {
        id,
        parent_id: Some(parent.id),
        weights: LossWeights::from_array(w),
        fitness: None,
    }
}

/// Redraws one uniformly chosen weight from U[0, 1].
pub fn mutate<R: Rng>(parent: &Genome, rng: &mut R, id: usize) -> Genome {
    let index = rng.gen_range(0..5);
    let value = rng.gen::<f64>();
    mutate_with(parent, index, value, id)
}

/// Samples `k` members without replacement and returns the fittest; ties
/// go to the lower id.
pub fn tournament_select<'a, R: Rng>(population: &'a [Genome], k: usize, rng: &mut R) -> Result<&'a Genome> {
    if k == 0 || population.len() < k {
        return Err(Error::config(format!(
            "tournament of size {k} on a population of {}",
            population.len()
        )));
    }
    let mut best: Option<&Genome> = None;
    for i in sample(rng, population.len(), k).into_iter() {
        let g = &population[i];
        let f = g
            .fitness
            .ok_or_else(|| Error::usage(format!("genome {} has not been evaluated", g.id)))?;
        best = match best {
            Some(b) if b.fitness.expect("evaluated") > f => Some(b),
            Some(b) if b.fitness.expect("evaluated") == f && b.id < g.id => Some(b),
            _ => Some(g),
        };
    }
    Ok(best.expect("k >= 1"))
}

/// One evaluation in the search, in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub eval_index: usize,
    pub genome_id: usize,
    pub parent_id: Option<usize>,
    pub weights: LossWeights,
    pub fitness: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvoOutcome {
    pub best: Genome,
    pub history: Vec<HistoryRow>,
    pub population: Vec<Genome>,
}

/// Evaluates `genomes` with up to `workers` threads; results keep input order.
fn evaluate_all<F>(genomes: &mut [Genome], fitness: &F, workers: usize)
where
    F: Fn(&LossWeights) -> Result<f64> + Sync,
{
    let run = |g: &Genome| match fitness(&g.weights) {
        Ok(f) if (0.0..=1.0).contains(&f) => f,
        Ok(f) => {
            log::warn!("genome {}: fitness {f} outside [0, 1]; recorded as 0", g.id);
            0.0
        }
        Err(e) => {
            log::warn!("genome {}: fitness evaluation failed ({e}); recorded as 0", g.id);
            0.0
        }
    };
    let workers = workers.max(1).min(genomes.len().max(1));
    if workers == 1 {
        for g in genomes.iter_mut() {
            g.fitness = Some(run(g));
        }
        return;
    }
    let chunk = genomes.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for part in genomes.chunks_mut(chunk) {
            scope.spawn(move || {
                for g in part {
                    g.fitness = Some(run(g));
                }
            });
        }
    });
}

/// Runs the search for exactly `cfg.budget` fitness evaluations.
pub fn evolve<F>(cfg: &EvoConfig, fitness: F, workers: usize) -> Result<EvoOutcome>
where
    F: Fn(&LossWeights) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut population = init_population(cfg, &mut rng);
    evaluate_all(&mut population, &fitness, workers);

    let mut history = Vec::with_capacity(cfg.budget);
    let mut best = population[0].clone();
    let mut record = |g: &Genome, history: &mut Vec<HistoryRow>| {
        let f = g.fitness.expect("evaluated");
        if f > best.fitness.expect("evaluated") {
            best = g.clone();
        }
        history.push(HistoryRow {
            eval_index: history.len(),
            genome_id: g.id,
            parent_id: g.parent_id,
            weights: g.weights,
            fitness: f,
            best_so_far: best.fitness.expect("evaluated"),
        });
    };
    for g in &population {
        record(g, &mut history);
    }

    // Members ordered oldest first; replacement pops the front.
    let mut next_id = population.len();
    while history.len() < cfg.budget {
        let n = cfg.batch.min(cfg.budget - history.len());
        let mut children = Vec::with_capacity(n);
        for _ in 0..n {
            let parent = tournament_select(&population, cfg.tournament_size, &mut rng)?;
            children.push(mutate(parent, &mut rng, next_id));
            next_id += 1;
        }
        evaluate_all(&mut children, &fitness, workers);
        for child in children {
            record(&child, &mut history);
            population.remove(0);
            population.push(child);
            debug_assert_eq!(population.len(), cfg.population_size);
        }
    }
    Ok(EvoOutcome {
        best,
        history,
        population,
    })
}

pub const HISTORY_COLUMNS: [&str; 10] = [
    "eval_index",
    "genome_id",
    "parent_id",
    "w_rgb",
    "w_flow",
    "w_semantic",
    "w_merged",
    "w_interm",
    "fitness",
    "best_so_far",
];

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Integrity(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(HISTORY_COLUMNS).map_err(err)?;
    for r in rows {
        let mut rec = vec![
            r.eval_index.to_string(),
            r.genome_id.to_string(),
            r.parent_id.map(|p| p.to_string()).unwrap_or_default(),
        ];
        rec.extend(r.weights.to_array().iter().map(|v| format!("{v:.6}")));
        rec.push(format!("{:.6}", r.fitness));
        rec.push(format!("{:.6}", r.best_so_far));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains a fresh model from a fixed initialization for each weighting and
/// returns merged-tower validation top-1.
pub struct TrainingFitness<'a> {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub train_set: &'a [VideoSample],
    pub val_set: &'a [VideoSample],
}

impl TrainingFitness<'_> {
    pub fn evaluate(&self, weights: &LossWeights) -> Result<f64> {
        let mut model = Model::<f32>::new(self.model.clone(), self.init_seed)?;
        let cfg = TrainConfig {
            loss_weights: *weights,
            // Only the final score matters; skip intermediate evaluations.
            eval_every: self.train.steps,
            ..self.train.clone()
        };
        let out = train(&mut model, self.train_set, self.val_set, &cfg, None)?;
        Ok(out.final_eval.acc_merged)
    }
}
