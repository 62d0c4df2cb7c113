//! Compares the analytic gradient of the episode loss with central finite
//! differences, parameter by parameter, on a tiny random episode.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use fewshot_acd::dataset::{generate_synthetic, EmbeddingTable, SyntheticConfig};
use fewshot_acd::episode::{EpisodeSampler, EpisodeShape};
use fewshot_acd::model::{ModelConfig, ModelParams};
use fewshot_acd::param::{collect_grads, Parameters};
use fewshot_acd::training::{episode_loss, TrainConfig};

fn main() -> fewshot_acd::Result<()> {
    let synth = SyntheticConfig {
        num_classes: 4,
        sentences_per_class: 12,
        multi_aspect_fraction: 0.5,
        vocab_size: 40,
        sentence_length_range: (3, 6),
        ..Default::default()
    };
    let corpus = generate_synthetic(&synth, 1)?;
    let config = TrainConfig {
        n_way: 3,
        k_shot: 2,
        queries_per_class: 2,
        model: ModelConfig {
            embedding_dim: 6,
            hidden_dim: 5,
            repeat: 4,
            init_std: 0.3,
            ..Default::default()
        },
        ..Default::default()
    };
    let task = EpisodeSampler::new(&corpus, corpus.classes(), EpisodeShape::new(3, 2, 2), 1).sample()?;
    let table = EmbeddingTable::random(corpus.vocab(), 6, 1);
    let mut params = ModelParams::init(&config.model, &table, 1)?;

    let (loss, _, bound) = episode_loss(&task, &params, &config)?;
    loss.backward()?;
    let analytic = collect_grads(&bound.leaves());

    let h = 1e-5;
    let loss_at = |p: &ModelParams| -> fewshot_acd::Result<f64> { episode_loss(&task, p, &config)?.0.item() };
    let sizes: Vec<(&'static str, usize)> = params.named_params().iter().map(|(n, p)| (*n, p.len())).collect();
    let mut worst = 0.0f64;
    for (p, (name, len)) in sizes.into_iter().enumerate() {
        let mut max_rel = 0.0f64;
        for (i, &g) in analytic[p].iter().enumerate().take(len) {
            if g == 0.0 && name == "embeddings" {
                // rows of tokens absent from the episode
                continue;
            }
            let original = params.named_params()[p].1.data[i];
            params.named_params_mut()[p].1.data[i] = original + h;
            let plus = loss_at(&params)?;
            params.named_params_mut()[p].1.data[i] = original - h;
            let minus = loss_at(&params)?;
            params.named_params_mut()[p].1.data[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        println!("{name:<12} max relative error {max_rel:.2e}");
    }
    println!("worst {worst:.2e}");
    Ok(())
}
