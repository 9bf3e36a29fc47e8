//! Self-train the mock scorer on a synthetic 4-class task and print test
//! accuracy before and after each iteration.
//!
//! ```text
//! cargo run -p selftrain --example synthetic_demo -- [seed] [strategy] [out_dir]
//! ```
//! With `out_dir`, the synthetic dataset files are also written there.

use std::path::PathBuf;
use std::sync::Arc;

use selftrain::backend::MockBackend;
use selftrain::eval::evaluate_accuracy;
use selftrain::selftrain::{RunDir, SelfTrainer};
use selftrain::synthetic::{SyntheticSpec, SyntheticWorld};
use selftrain::{ContrastStrategy, HypothesisTemplate, SelfTrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let strategy: ContrastStrategy = args
        .next()
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(ContrastStrategy::Random);
    let out_dir = args.next().map(PathBuf::from);

    let world = SyntheticWorld::generate(&SyntheticSpec::default(), seed)?;
    if let Some(dir) = &out_dir {
        world.write_to(dir)?;
        println!("wrote synthetic dataset to {}", dir.display());
    }
    let template = HypothesisTemplate::default();
    let run = tempfile_dir()?;
    let run_dir = RunDir::open(&run)?;
    let store = Arc::new(world.store);
    let backend = MockBackend::new(Arc::clone(&store), template.clone(), RunDir::checkpoint_root(&run));
    let base = backend.init(world.initial_state.clone())?;

    let config = SelfTrainConfig {
        contrast_strategy: strategy,
        seed,
        fine_tune: selftrain::config::FineTuneSpec {
            learning_rate: 0.3,
            batch_size: 8,
            ..Default::default()
        },
        per_class_fraction: 0.05,
        masking_enabled: true,
        ..SelfTrainConfig::default()
    };
    let flat = backend.init(selftrain::backend::MockState::new(world.initial_state.scale))?;
    let acc = |m: &selftrain::ModelHandle| evaluate_accuracy(&backend, m, &world.test, &world.classes, &template, "", seed);
    println!("iteration 0: accuracy {:.3} (unbiased {:.3})", acc(&base)?.accuracy, acc(&flat)?.accuracy);
    let trainer = SelfTrainer::new(&backend, &run_dir).with_embeddings(&store);
    trainer.run_with_hook(&base, &world.unlabeled, &world.classes, &template, &config, false, |a, _| {
        let r = acc(&a.output_model)?;
        println!(
            "iteration {}: accuracy {:.3} ({} pairs)",
            a.iteration,
            r.accuracy,
            a.record.entail_pairs + a.record.contradict_pairs
        );
        Ok(())
    })?;
    drop(run_dir);
    std::fs::remove_dir_all(&run)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("selftrain-demo-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
