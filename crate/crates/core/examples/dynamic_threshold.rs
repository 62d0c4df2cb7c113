//! Two-stage training: the main network first, then joint training with the
//! Beta threshold policy. Compares static and dynamic thresholds on the
//! held-out classes.
//!
//! ```text
//! cargo run --release --example dynamic_threshold -- [seed] [episodes_per_epoch]
//! ```

use std::collections::HashMap;

use fewshot_acd::dataset::{
    generate_synthetic, generate_synthetic_embeddings, split_classes, EmbeddingTable, SplitSpec,
    SyntheticConfig, SyntheticEmbeddingConfig,
};
use fewshot_acd::eval::evaluate;
use fewshot_acd::metrics::ThresholdMode;
use fewshot_acd::training::{train_main, train_policy, TrainConfig};

fn main() -> fewshot_acd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(5, |s| s.parse().expect("seed"));
    let per_epoch: usize = args.next().map_or(200, |s| s.parse().expect("episodes"));

    let synth = SyntheticConfig {
        multi_aspect_fraction: 0.3,
        ..Default::default()
    };
    let corpus = generate_synthetic(&synth, seed)?;
    let vectors: HashMap<String, Vec<f64>> =
        generate_synthetic_embeddings(&synth, &SyntheticEmbeddingConfig::default(), seed)?
            .into_iter()
            .collect();
    let split = split_classes(&corpus, &SplitSpec::Counts { train: 30, val: 10, test: 10 }, seed)?;
    let config = TrainConfig {
        episodes_per_epoch: per_epoch,
        val_episodes: 100,
        test_episodes: 300,
        ..Default::default()
    };
    let embeddings =
        EmbeddingTable::from_vectors(corpus.vocab(), config.model.embedding_dim, &vectors, seed)?;

    let stage_one = train_main(&corpus, &split, &config, &embeddings, seed)?;
    let stage_two = train_policy(&stage_one.model, &corpus, &split, &config, seed)?;
    let policy = stage_two.policy.as_ref().expect("stage two trains a policy");

    let tau = config.static_tau();
    let run = |mode| {
        evaluate(&stage_two.model, Some(policy), &corpus, &split.test, &config, mode, config.test_episodes, seed)
    };
    let fixed = run(ThresholdMode::Static { tau })?;
    let dynamic = run(ThresholdMode::Dynamic)?;
    println!("held-out AUC {:.4}", fixed.mean_auc);
    println!("macro-F1 static tau={tau}: {:.4}", fixed.mean_macro_f1);
    println!("macro-F1 dynamic:        {:.4}", dynamic.mean_macro_f1);
    Ok(())
}
