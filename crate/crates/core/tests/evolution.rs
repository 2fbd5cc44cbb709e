use airstreams::evolution::*;
use airstreams::training::LossWeights;
use airstreams::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn genome(id: usize, fitness: f64) -> Genome {
    Genome {
        id,
        parent_id: None,
        weights: LossWeights::uniform(),
        fitness: Some(fitness),
    }
}

#[test]
fn default_population_draws_fifty_unit_weights() {
    let cfg = EvoConfig::default();
    let pop = init_population(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(pop.len(), 10);
    let all: Vec<f64> = pop.iter().flat_map(|g| g.weights.to_array()).collect();
    assert_eq!(all.len(), 50);
    assert!(all.iter().all(|w| (0.0..=1.0).contains(w)));
    let again = init_population(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(pop, again);
}

#[test]
fn weight_draws_have_mean_one_half() {
    let cfg = EvoConfig {
        population_size: 2000,
        ..EvoConfig::default()
    };
    let pop = init_population(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let all: Vec<f64> = pop.iter().flat_map(|g| g.weights.to_array()).collect();
    assert_eq!(all.len(), 10_000);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((0.49..=0.51).contains(&mean), "mean {mean}");
}

#[test]
fn mutation_redraws_exactly_one_weight() {
    let parent = Genome {
        id: 4,
        parent_id: None,
        weights: LossWeights::from_array([0.2, 0.4, 0.6, 0.8, 1.0]),
        fitness: Some(0.5),
    };
    let child = mutate_with(&parent, 2, 0.33, 11);
    assert_eq!(child.weights.to_array(), [0.2, 0.4, 0.33, 0.8, 1.0]);
    assert_eq!((child.id, child.parent_id, child.fitness), (11, Some(4), None));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 5];
    for i in 0..1000 {
        let c = mutate(&parent, &mut rng, i);
        let changed: Vec<usize> = (0..5)
            .filter(|&j| c.weights.to_array()[j].to_bits() != parent.weights.to_array()[j].to_bits())
            .collect();
        assert_eq!(changed.len(), 1);
        counts[changed[0]] += 1;
    }
    assert!(counts.iter().all(|&c| (140..=260).contains(&c)), "{counts:?}");
}

#[test]
fn exhaustive_tournament_returns_global_best() {
    let pop: Vec<Genome> = [0.3, 0.7, 0.1, 0.9, 0.5].iter().enumerate().map(|(i, &f)| genome(i, f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert_eq!(tournament_select(&pop, 5, &mut rng).unwrap().id, 3);
    }
}

#[test]
fn tournament_picks_fittest_of_the_sample() {
    let pop = vec![genome(0, 0.1), genome(1, 0.9), genome(2, 0.5)];
    // Find a seed whose sample is {0, 2}; the winner must then be index 2.
    let seed = (0..1000u64)
        .find(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut idx = rand::seq::index::sample(&mut rng, 3, 2).into_vec();
            idx.sort();
            idx == [0, 2]
        })
        .unwrap();
    let winner = tournament_select(&pop, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(winner.id, 2);
}

#[test]
fn ties_go_to_the_lowest_sampled_id() {
    let pop: Vec<Genome> = (0..6).map(|i| genome(10 + i, 0.5)).collect();
    for s in 0..50u64 {
        let mut probe = ChaCha8Rng::seed_from_u64(s);
        let lowest = rand::seq::index::sample(&mut probe, 6, 3).into_iter().map(|i| pop[i].id).min().unwrap();
        let got = tournament_select(&pop, 3, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().id;
        assert_eq!(got, lowest);
    }
}

#[test]
fn oversized_tournament_is_a_config_error() {
    let pop = vec![genome(0, 0.1), genome(1, 0.2)];
    let err = tournament_select(&pop, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let cfg = EvoConfig {
        tournament_size: 11,
        ..EvoConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn toy_fitness_finds_high_merged_weight() {
    let cfg = EvoConfig {
        rng_seed: 7,
        ..EvoConfig::default()
    };
    let out = evolve(&cfg, |w| Ok(w.merged), 1).unwrap();
    assert_eq!(out.history.len(), 100);
    assert!(out.history.windows(2).all(|p| p[1].best_so_far >= p[0].best_so_far));
    assert!(out.best.weights.merged >= 0.9, "best merged weight {}", out.best.weights.merged);
    assert_eq!(out.population.len(), 10);
    assert_eq!(out.history.last().unwrap().best_so_far, out.best.fitness.unwrap());
}

#[test]
fn budget_equal_to_population_returns_best_initial_genome() {
    let cfg = EvoConfig {
        budget: 10,
        rng_seed: 3,
        ..EvoConfig::default()
    };
    let out = evolve(&cfg, |w| Ok(w.rgb), 1).unwrap();
    let init = init_population(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let best = init.iter().map(|g| g.weights.rgb).fold(0.0, f64::max);
    assert_eq!(out.history.len(), 10);
    assert_eq!(out.best.weights.rgb, best);
    assert!(out.history.iter().all(|r| r.parent_id.is_none()));
}

#[test]
fn failing_fitness_counts_as_zero() {
    let cfg = EvoConfig {
        budget: 20,
        ..EvoConfig::default()
    };
    let out = evolve(
        &cfg,
        |w| if w.flow > 0.5 { Err(Error::input("boom")) } else { Ok(w.flow) },
        1,
    )
    .unwrap();
    for r in &out.history {
        if r.weights.flow > 0.5 {
            assert_eq!(r.fitness, 0.0);
        } else {
            assert_eq!(r.fitness, r.weights.flow);
        }
    }
}

#[test]
fn history_is_deterministic_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EvoConfig {
        budget: 40,
        batch: 4,
        rng_seed: 11,
        ..EvoConfig::default()
    };
    let fit = |w: &LossWeights| Ok((w.merged + w.interm) / 2.0);
    let mut files = Vec::new();
    for (i, workers) in [1, 1, 3].into_iter().enumerate() {
        let out = evolve(&cfg, fit, workers).unwrap();
        let path = dir.path().join(format!("h{i}.csv"));
        write_history_csv(&path, &out.history).unwrap();
        files.push(std::fs::read(path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
    let text = String::from_utf8(files[0].clone()).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "eval_index,genome_id,parent_id,w_rgb,w_flow,w_semantic,w_merged,w_interm,fitness,best_so_far"
    );
    assert_eq!(text.lines().count(), 41);
}
