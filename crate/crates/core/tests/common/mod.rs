#![allow(dead_code)]

use std::path::Path;

use chromoseg::data::{filter_overlap, prepare_all, split_dataset, ClassMap, DatasetSplit, PreparedSample, RawSample};
use chromoseg::generator::GeneratorConfig;
use chromoseg::optim::OptimizerConfig;
use chromoseg::train::{fit, FitOutcome, TrainConfig};
use chromoseg_testkit::{corpus, CorpusSpec, HEIGHT, WIDTH};

/// Synthetic corpus converted to library samples.
pub fn raw_corpus(n: usize, seed: u64) -> Vec<RawSample> {
    corpus(n, &CorpusSpec { seed, ..CorpusSpec::default() })
        .into_iter()
        .map(|s| RawSample::new(s.image, ClassMap::new(HEIGHT, WIDTH, s.label).unwrap()).unwrap())
        .collect()
}

pub struct Smoke {
    pub corpus: Vec<PreparedSample>,
    pub split: DatasetSplit,
}

/// Corpus of `n` samples, split 80/20 with seed 123; training indices are
/// truncated to the first `train` ones.
pub fn smoke_data(n: usize, train: usize) -> Smoke {
    let raws = raw_corpus(n, 2024);
    let corpus = prepare_all(&raws);
    let mut split = split_dataset(n, 0.8, 123).unwrap();
    split.train_indices.truncate(train);
    let labels: Vec<&ClassMap> = corpus.iter().map(|s| &s.label).collect();
    split.overlap_test_indices = filter_overlap(&split, &labels);
    Smoke { corpus, split }
}

pub fn smoke_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        generator: GeneratorConfig {
            filters: vec![4, 8, 16, 32, 64],
            ..GeneratorConfig::default()
        },
        g_optimizer: OptimizerConfig {
            learning_rate: 2e-3,
            ..OptimizerConfig::default()
        },
        batch_size: 4,
        max_epochs: epochs,
        dice_subsample: Some(32),
        ..TrainConfig::default()
    }
}

pub fn run(data: &Smoke, cfg: &TrainConfig, out: &Path) -> FitOutcome {
    fit(&data.corpus, &data.split, cfg, out).unwrap()
}

pub const SMOKE_CORPUS: usize = 200;
pub const SMOKE_TRAIN: usize = 96;
pub const SMOKE_EPOCHS: usize = 10;

/// Very small generator for harness and determinism checks.
pub fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        generator: GeneratorConfig {
            filters: vec![2, 4, 8],
            ..GeneratorConfig::default()
        },
        batch_size: 4,
        max_epochs: epochs,
        ..TrainConfig::default()
    }
}
