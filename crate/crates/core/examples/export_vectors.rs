//! Trains briefly and writes held-out prototypes and prototype-specific query
//! vectors as CSV, ready for a 2-D projection.
//!
//! ```text
//! cargo run --release --example export_vectors -- [out.csv] [episodes]
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;

use fewshot_acd::dataset::{
    generate_synthetic, generate_synthetic_embeddings, split_classes, EmbeddingTable, SplitSpec,
    SyntheticConfig, SyntheticEmbeddingConfig,
};
use fewshot_acd::episode::EpisodeSampler;
use fewshot_acd::eval::export_vectors_csv;
use fewshot_acd::training::{train_main, TrainConfig};

fn main() -> fewshot_acd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "vectors.csv".into());
    let episodes: usize = args.next().map_or(5, |s| s.parse().expect("episodes"));
    let seed = 5;

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
        episodes_per_epoch: 100,
        val_episodes: 50,
        max_epochs: 5,
        ..Default::default()
    };
    let embeddings =
        EmbeddingTable::from_vectors(corpus.vocab(), config.model.embedding_dim, &vectors, seed)?;
    let trained = train_main(&corpus, &split, &config, &embeddings, seed)?;

    let tasks = EpisodeSampler::new(&corpus, &split.test, config.shape(), seed).take(episodes)?;
    export_vectors_csv(&tasks, &trained.model, &config, BufWriter::new(File::create(&path)?))?;
    println!("wrote {} episodes to {path}", tasks.len());
    Ok(())
}
