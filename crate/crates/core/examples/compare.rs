//! Runs the augmentation comparison for one seed and prints the table.

use std::time::Instant;

use tractfov::experiment::{run_experiment, ExperimentConfig};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let start = Instant::now();
    let result = run_experiment(&ExperimentConfig::desk(seed)).expect("experiment");
    for (name, log) in ["with_fovca", "without_fovca"].iter().zip(result.logs()) {
        for r in log {
            eprintln!("{name} epoch {} loss {:.4} train {:.4} val {:?}", r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy);
        }
    }
    print!("{}", result.table());
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
}
