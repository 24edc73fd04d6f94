//! Scaled-down training run on the synthetic corpus.
//!
//! `cargo run --release --example smoke -- <corpus> <train> <epochs> <out>`

#[path = "../tests/common/mod.rs"]
mod common;

use chromoseg::data::PreparedSample;
use chromoseg::train::{evaluate, load_generator};

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(200, |a| a.parse().unwrap());
    let train: usize = args.get(1).map_or(96, |a| a.parse().unwrap());
    let epochs: usize = args.get(2).map_or(10, |a| a.parse().unwrap());
    let out = std::path::PathBuf::from(args.get(3).cloned().unwrap_or_else(|| "smoke-out".into()));
    let data = common::smoke_data(n, train);
    let started = std::time::Instant::now();
    let mut cfg = common::smoke_config(epochs);
    if let Ok(b) = std::env::var("SMOKE_BATCH") {
        cfg.batch_size = b.parse().unwrap();
    }
    if let Ok(lr) = std::env::var("SMOKE_LR") {
        cfg.g_optimizer.learning_rate = lr.parse().unwrap();
    }
    if let Ok(f) = std::env::var("SMOKE_FILTERS") {
        cfg.generator.filters = f.split(',').map(|x| x.parse().unwrap()).collect();
    }
    if std::env::var("SMOKE_NOGAN").is_ok() {
        cfg.gan_enabled = false;
    }
    let outcome = common::run(&data, &cfg, &out);
    for r in &outcome.state.loss_history {
        println!("{r:?}");
    }
    let g = load_generator(&outcome.best_checkpoint, &candle_core::Device::Cpu).unwrap();
    let test: Vec<&PreparedSample> = data.split.overlap_test_indices.iter().map(|&i| &data.corpus[i]).collect();
    let report = evaluate(&g, &test).unwrap();
    println!("{:?}", chromoseg::metrics::Aggregate::HEADER);
    println!("{:?}", report.foreground.table_row());
    println!("elapsed {:?}", started.elapsed());
}
