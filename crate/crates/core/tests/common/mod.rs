#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use airstreams::experiment::ExperimentConfig;
use airstreams::repflow::FlowParams;
use airstreams::synthdata::DataConfig;
use airstreams::towers::{BlockSpec, ModelConfig, SegNetConfig, TowerConfig};
use airstreams::training::TrainConfig;

/// 16x16, 4-frame model small enough to train in seconds.
pub fn tiny_model() -> ModelConfig {
    let widths = [4, 4, 6, 6, 8, 8];
    let blocks = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| BlockSpec {
            out_channels: c,
            se_reduction: 2,
            spatial_pool: i == 0 || i == 2,
            temporal_pool: i == 1,
            temporal_kernel: if i < 2 { 3 } else { 1 },
            ..BlockSpec::default()
        })
        .collect();
    ModelConfig {
        num_actions: 4,
        frames: 4,
        height: 16,
        width: 16,
        tower: TowerConfig {
            blocks,
            merge_after_block: 3,
        },
        segnet: SegNetConfig {
            channels: vec![4, 4],
            dilations: vec![1, 2],
            output_stride: 2,
            num_classes: 4,
        },
        flow: FlowParams::default().with_iterations(3),
        ..ModelConfig::default()
    }
}

pub fn tiny_data_config(num_train: usize, num_val: usize) -> DataConfig {
    DataConfig {
        num_train,
        num_val,
        num_actions: 4,
        frames: 4,
        size: 16,
        seed: 5,
        magnitude: None,
    }
}

pub fn tiny_experiment(steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        data: tiny_data_config(32, 16),
        model: tiny_model(),
        train: TrainConfig {
            steps,
            batch_size: 4,
            eval_every: steps.div_ceil(2).max(1),
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

pub fn airstreams(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airstreams"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
