//! Samples N-way K-shot meta-tasks from a synthetic corpus, prints one of
//! them and dumps all of them as JSON lines.
//!
//! ```text
//! cargo run --release --example sample_episodes -- [n_way] [k_shot] [count]
//! ```

use fewshot_acd::dataset::{generate_synthetic, split_classes, SplitSpec, SyntheticConfig};
use fewshot_acd::episode::{dump_episodes, EpisodeSampler, EpisodeShape};

fn main() -> fewshot_acd::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(5, |s| s.parse().expect("n_way"));
    let k: usize = args.next().map_or(5, |s| s.parse().expect("k_shot"));
    let count: usize = args.next().map_or(3, |s| s.parse().expect("count"));

    let corpus = generate_synthetic(&SyntheticConfig::default(), 5)?;
    let split = split_classes(&corpus, &SplitSpec::Counts { train: 30, val: 10, test: 10 }, 5)?;
    let mut sampler = EpisodeSampler::new(&corpus, &split.train, EpisodeShape::new(n, k, 5), 5);
    let tasks = sampler.take(count)?;

    let task = &tasks[0];
    println!("classes: {}", task.classes.join(" "));
    for (class, group) in task.classes.iter().zip(&task.support) {
        println!("support {class}");
        for s in group {
            println!("    [{}] {}", s.aspects.join(","), corpus.text(s));
        }
    }
    println!("queries");
    for q in &task.queries {
        let marks: String = q.labels.iter().map(|&l| if l { '1' } else { '.' }).collect();
        println!("  {marks}  {}", corpus.text(&q.sentence));
    }

    println!();
    dump_episodes(&tasks, std::io::stdout().lock())?;
    Ok(())
}
