//! N-way K-shot meta-task sampling with multi-label query supervision.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Sentence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
}

impl EpisodeShape {
    pub fn new(n_way: usize, k_shot: usize, queries_per_class: usize) -> Self {
        EpisodeShape {
            n_way,
            k_shot,
            queries_per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    /// Corpus sentence id.
    pub id: usize,
    pub sentence: Sentence,
    /// `labels[i]` is true iff the sentence mentions the i-th episode class.
    pub labels: Vec<bool>,
}

impl Query {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// One episode: N classes, K support sentences per class, and queries
/// labeled against all N classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask {
    pub classes: Vec<String>,
    pub support_ids: Vec<Vec<usize>>,
    pub support: Vec<Vec<Sentence>>,
    pub queries: Vec<Query>,
}

impl MetaTask {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Builds an episode from explicit sentences, labeling queries against `classes`.
    pub fn from_parts(classes: Vec<String>, support: Vec<Vec<Sentence>>, queries: Vec<Sentence>) -> Result<Self> {
        if classes.is_empty() || classes.len() != support.len() {
            return Err(Error::Contract(format!(
                "{} classes with {} support groups",
                classes.len(),
                support.len()
            )));
        }
        if support.iter().any(Vec::is_empty) {
            return Err(Error::Contract("empty support group".into()));
        }
        let queries = queries
            .into_iter()
            .enumerate()
            .map(|(i, s)| Query {
                id: i,
                labels: classes.iter().map(|c| s.has_aspect(c)).collect(),
                sentence: s,
            })
            .collect();
        Ok(MetaTask {
            classes,
            support_ids: Vec::new(),
            support,
            queries,
        })
    }

    /// Reorders classes so that new position `j` holds old class `perm[j]`.
    pub fn permute_classes(&self, perm: &[usize]) -> MetaTask {
        let pick = |v: &[_]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        MetaTask {
            classes: perm.iter().map(|&p| self.classes[p].clone()).collect(),
            support_ids: if self.support_ids.is_empty() {
                Vec::new()
            } else {
                perm.iter().map(|&p| self.support_ids[p].clone()).collect()
            },
            support: perm.iter().map(|&p| self.support[p].clone()).collect(),
            queries: self
                .queries
                .iter()
                .map(|q| Query {
                    id: q.id,
                    sentence: q.sentence.clone(),
                    labels: pick(&q.labels),
                })
                .collect(),
        }
    }

    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            classes: self.classes.clone(),
            support: self.support_ids.clone(),
            queries: self
                .queries
                .iter()
                .map(|q| QueryRecord {
                    id: q.id,
                    labels: q.labels.iter().map(|&l| l as u8).collect(),
                })
                .collect(),
        }
    }
}

/// Audit form of an episode: corpus sentence ids plus label vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub classes: Vec<String>,
    pub support: Vec<Vec<usize>>,
    pub queries: Vec<QueryRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: usize,
    pub labels: Vec<u8>,
}

/// Writes one JSON object per episode.
pub fn dump_episodes<W: Write>(tasks: &[MetaTask], mut out: W) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut out, &t.record())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Draws one episode from the given classes.
///
/// Support sentences may be shared between classes of the same episode; a
/// query never repeats within the episode and never appears in its support.
pub fn sample_episode<R: rand::Rng + ?Sized>(
    corpus: &Corpus,
    classes: &[String],
    shape: EpisodeShape,
    rng: &mut R,
) -> Result<MetaTask> {
    let EpisodeShape {
        n_way,
        k_shot,
        queries_per_class,
    } = shape;
    if n_way == 0 || k_shot == 0 || queries_per_class == 0 {
        return Err(Error::Sampling(format!("degenerate episode shape {shape:?}")));
    }
    if classes.len() < n_way {
        return Err(Error::Sampling(format!(
            "{n_way}-way episodes need {n_way} classes, partition has {}",
            classes.len()
        )));
    }
    let need = k_shot + queries_per_class;
    if let Some(c) = classes.iter().find(|c| corpus.class_sentences(c).len() < need) {
        return Err(Error::Sampling(format!(
            "class {c:?} has {} sentences, needs {need}",
            corpus.class_sentences(c).len()
        )));
    }

    let chosen: Vec<String> = classes.choose_multiple(rng, n_way).cloned().collect();
    let mut support_ids = Vec::with_capacity(n_way);
    let mut used = HashSet::new();
    for c in &chosen {
        let ids: Vec<usize> = corpus
            .class_sentences(c)
            .choose_multiple(rng, k_shot)
            .copied()
            .collect();
        used.extend(ids.iter().copied());
        support_ids.push(ids);
    }

    let mut queries = Vec::with_capacity(n_way * queries_per_class);
    for c in &chosen {
        let mut pool = corpus.class_sentences(c).to_vec();
        pool.shuffle(rng);
        let picked: Vec<usize> = pool
            .into_iter()
            .filter(|id| !used.contains(id))
            .take(queries_per_class)
            .collect();
        if picked.len() < queries_per_class {
            return Err(Error::Sampling(format!(
                "class {c:?} has only {} sentences left for queries after support and overlap, needs {queries_per_class}",
                picked.len()
            )));
        }
        for id in picked {
            used.insert(id);
            let sentence = corpus.sentence(id).clone();
            queries.push(Query {
                id,
                labels: chosen.iter().map(|k| sentence.has_aspect(k)).collect(),
                sentence,
            });
        }
    }

    let support = support_ids
        .iter()
        .map(|ids| ids.iter().map(|&i| corpus.sentence(i).clone()).collect())
        .collect();
    Ok(MetaTask {
        classes: chosen,
        support_ids,
        support,
        queries,
    })
}

/// Seeded stream of episodes over a fixed class list.
pub struct EpisodeSampler<'a> {
    corpus: &'a Corpus,
    classes: Vec<String>,
    shape: EpisodeShape,
    rng: ChaCha8Rng,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(corpus: &'a Corpus, classes: &[String], shape: EpisodeShape, seed: u64) -> Self {
        EpisodeSampler {
            corpus,
            classes: classes.to_vec(),
            shape,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self) -> Result<MetaTask> {
        sample_episode(self.corpus, &self.classes, self.shape, &mut self.rng)
    }

    pub fn take(&mut self, count: usize) -> Result<Vec<MetaTask>> {
        (0..count).map(|_| self.sample()).collect()
    }
}
