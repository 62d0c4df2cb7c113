//! Trains the full model and each architectural ablation on the same seed and
//! reports held-out AUC and macro-F1 under the static threshold.
//!
//! ```text
//! cargo run --release --example evaluate_ablations -- [seed] [episodes_per_epoch]
//! ```

use std::collections::HashMap;

use fewshot_acd::dataset::{
    generate_synthetic, generate_synthetic_embeddings, split_classes, EmbeddingTable, SplitSpec,
    SyntheticConfig, SyntheticEmbeddingConfig,
};
use fewshot_acd::eval::evaluate;
use fewshot_acd::metrics::ThresholdMode;
use fewshot_acd::model::Ablation;
use fewshot_acd::training::{train_main, TrainConfig};

fn main() -> fewshot_acd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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

    println!("{:<8} {:>7} {:>9} {:>7}", "variant", "AUC", "macro-F1", "epochs");
    for name in ["full", "no-sa", "no-wi", "no-qa"] {
        let ablation: Ablation = name.parse()?;
        let config = TrainConfig {
            episodes_per_epoch: per_epoch,
            val_episodes: 100,
            ablation,
            ..Default::default()
        };
        let embeddings =
            EmbeddingTable::from_vectors(corpus.vocab(), config.model.embedding_dim, &vectors, seed)?;
        let trained = train_main(&corpus, &split, &config, &embeddings, seed)?;
        let tau = config.static_tau();
        let test = evaluate(
            &trained.model,
            None,
            &corpus,
            &split.test,
            &config,
            ThresholdMode::Static { tau },
            config.test_episodes,
            seed,
        )?;
        println!(
            "{name:<8} {:>7.4} {:>9.4} {:>7}",
            test.mean_auc,
            test.mean_macro_f1,
            trained.log.len()
        );
    }
    Ok(())
}
