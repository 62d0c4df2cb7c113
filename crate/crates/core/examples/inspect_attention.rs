//! Trains briefly, then prints the support-set word weights β of one class
//! and the query-set weights ρ of one query. Signal tokens of the episode's
//! classes are marked with `*` and the number of the class that owns them.
//!
//! ```text
//! cargo run --release --example inspect_attention -- [seed] [episodes_per_epoch]
//! ```

use std::collections::HashMap;

use fewshot_acd::dataset::{
    class_name, generate_synthetic, generate_synthetic_embeddings, split_classes, Corpus, EmbeddingTable,
    Sentence, SplitSpec, SyntheticConfig, SyntheticEmbeddingConfig,
};
use fewshot_acd::episode::EpisodeSampler;
use fewshot_acd::model::forward_episode;
use fewshot_acd::training::{train_main, TrainConfig};

/// Owning class of a synthetic signal token: word ids below
/// `classes × signal_tokens_per_class` are laid out class by class.
fn signal_owner(word: &str, synth: &SyntheticConfig) -> Option<String> {
    let id: usize = word.strip_prefix('w')?.parse().ok()?;
    let pool = synth.signal_tokens_per_class;
    (id < synth.num_classes * pool).then(|| class_name(id / pool))
}

fn show(corpus: &Corpus, s: &Sentence, weights: &[f64], synth: &SyntheticConfig) {
    let line: Vec<String> = s
        .tokens
        .iter()
        .zip(weights)
        .map(|(&t, w)| {
            let word = corpus.vocab().token(t).unwrap_or("?");
            let mark = match signal_owner(word, synth) {
                Some(owner) => format!("*{}", owner.trim_start_matches("aspect_")),
                None => String::new(),
            };
            format!("{word}{mark}:{w:.2}")
        })
        .collect();
    println!("    {}", line.join(" "));
}

fn main() -> fewshot_acd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(5, |s| s.parse().expect("seed"));
    let per_epoch: usize = args.next().map_or(100, |s| s.parse().expect("episodes"));

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
        val_episodes: 50,
        max_epochs: 5,
        ..Default::default()
    };
    let embeddings =
        EmbeddingTable::from_vectors(corpus.vocab(), config.model.embedding_dim, &vectors, seed)?;
    let trained = train_main(&corpus, &split, &config, &embeddings, seed)?;

    let task = EpisodeSampler::new(&corpus, &split.test, config.shape(), seed).sample()?;
    let out = forward_episode(&task, &trained.model.bind_frozen(), config.model.distance, config.ablation)?;

    println!("support attention, held-out class {}", task.classes[0]);
    for (s, beta) in task.support[0].iter().zip(&out.support_attention[0]) {
        show(&corpus, s, beta, &synth);
    }

    let q = &task.queries[0];
    let truth: Vec<&str> = task
        .classes
        .iter()
        .zip(&q.labels)
        .filter(|(_, &l)| l)
        .map(|(c, _)| c.as_str())
        .collect();
    println!("query attention, query labelled {}", truth.join(","));
    let rho = &out.query_attention[0];
    for (i, class) in task.classes.iter().enumerate() {
        println!("  prototype {class} (distance {:.3})", out.distances.row_slice(0)[i]);
        show(&corpus, &q.sentence, rho.row_slice(i), &synth);
    }
    Ok(())
}
