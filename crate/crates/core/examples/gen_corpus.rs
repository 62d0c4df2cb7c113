//! Writes a synthetic multi-label corpus, a companion embedding file and a
//! class split, then reloads them and prints a few statistics.
//!
//! ```text
//! cargo run --release --example gen_corpus -- [out_dir] [seed] [multi_aspect_fraction]
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use fewshot_acd::dataset::{
    generate_synthetic, generate_synthetic_embeddings, load_corpus, load_embeddings, split_classes,
    write_corpus, write_embeddings, SplitSpec, SyntheticConfig, SyntheticEmbeddingConfig,
};

fn main() -> fewshot_acd::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let seed: u64 = args.next().map_or(5, |s| s.parse().expect("seed"));
    let fraction: f64 = args.next().map_or(0.3, |s| s.parse().expect("fraction"));
    std::fs::create_dir_all(&out)?;

    let config = SyntheticConfig {
        multi_aspect_fraction: fraction,
        ..Default::default()
    };
    let corpus = generate_synthetic(&config, seed)?;
    write_corpus(&corpus, out.join("corpus.jsonl"))?;

    let vectors = generate_synthetic_embeddings(&config, &SyntheticEmbeddingConfig::default(), seed)?;
    write_embeddings(&vectors, BufWriter::new(File::create(out.join("vectors.txt"))?))?;

    let split = split_classes(&corpus, &SplitSpec::Counts { train: 30, val: 10, test: 10 }, seed)?;
    split.save(out.join("split.json"))?;

    let reloaded = load_corpus(out.join("corpus.jsonl"))?;
    assert_eq!(reloaded.fingerprint(), corpus.fingerprint());
    let table = load_embeddings(out.join("vectors.txt"), reloaded.vocab(), 50, seed)?;

    let multi = corpus.sentences().iter().filter(|s| s.aspects.len() > 1).count();
    println!("wrote {}", out.display());
    println!("  sentences        {}", corpus.sentences().len());
    println!("  classes          {}", corpus.classes().len());
    println!("  vocabulary       {}", corpus.vocab().len());
    println!("  multi-aspect     {:.3}", multi as f64 / corpus.sentences().len() as f64);
    println!("  vectors covered  {}/{}", table.covered, reloaded.vocab().len());
    println!("  fingerprint      {:016x}", corpus.fingerprint());
    for s in corpus.sentences().iter().filter(|s| s.aspects.len() > 1).take(3) {
        println!("  [{}] {}", s.aspects.join(","), corpus.text(s));
    }
    Ok(())
}
