//! Corpus ingestion, vocabulary and embeddings, class splits, and a
//! synthetic multi-aspect corpus generator.
//!
//! Corpus files hold one JSON object per line:
//!
//! ```text
//! {"text": "the pizza was great", "labels": ["food"]}
//! {"text": "slow waiter but tasty pasta", "labels": ["service", "food"]}
//! ```
//!
//! Text is split on whitespace. Embedding files use the GloVe text layout,
//! one token followed by its space-separated floats per line.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;

/// Token id reserved for words missing from a vocabulary.
pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Standard deviation of the normal initializer used for unseen embedding rows.
pub const EMBEDDING_INIT_STD: f64 = 0.1;

/// Token to id map in first-occurrence order, with `<unk>` at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(UNK_TOKEN);
        v
    }

    /// Rebuilds a vocabulary from an ordered token list (as stored in a checkpoint).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Validation(format!(
                "vocabulary must start with {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    /// Aspect categories in record order, without duplicates.
    pub aspects: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_aspect(&self, aspect: &str) -> bool {
        self.aspects.iter().any(|a| a == aspect)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    labels: Vec<String>,
}

/// Sentences grouped by aspect category. A multi-aspect sentence is listed
/// under every aspect it mentions.
#[derive(Clone, Debug)]
pub struct Corpus {
    vocab: Vocabulary,
    sentences: Vec<Sentence>,
    classes: Vec<String>,
    by_class: HashMap<String, Vec<usize>>,
}

impl Corpus {
    /// Builds a corpus from tokenized records, growing the vocabulary in
    /// first-occurrence order.
    pub fn from_records<I, T, L>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (T, L)>,
        T: IntoIterator,
        T::Item: AsRef<str>,
        L: IntoIterator,
        L::Item: AsRef<str>,
    {
        let mut corpus = Corpus {
            vocab: Vocabulary::new(),
            sentences: Vec::new(),
            classes: Vec::new(),
            by_class: HashMap::new(),
        };
        for (i, (tokens, labels)) in records.into_iter().enumerate() {
            let tokens: Vec<usize> = tokens
                .into_iter()
                .map(|t| corpus.vocab.insert(t.as_ref()))
                .collect();
            corpus
                .push(tokens, labels.into_iter().map(|l| l.as_ref().to_string()).collect())
                .map_err(|e| match e {
                    Error::Validation(msg) => Error::Parse { line: i + 1, msg },
                    other => other,
                })?;
        }
        Ok(corpus)
    }

    fn push(&mut self, tokens: Vec<usize>, labels: Vec<String>) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty sentence".into()));
        }
        let mut aspects: Vec<String> = Vec::with_capacity(labels.len());
        for l in labels {
            if !aspects.contains(&l) {
                aspects.push(l);
            }
        }
        if aspects.is_empty() {
            return Err(Error::Validation("empty label list".into()));
        }
        let id = self.sentences.len();
        for a in &aspects {
            let entry = self.by_class.entry(a.clone()).or_insert_with(|| {
                self.classes.push(a.clone());
                Vec::new()
            });
            entry.push(id);
        }
        self.sentences.push(Sentence { tokens, aspects });
        Ok(())
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if rec.labels.is_empty() {
                return Err(Error::Validation(format!("line {}: empty label list", i + 1)));
            }
            let tokens: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
            if tokens.is_empty() {
                return Err(Error::Validation(format!("line {}: empty text", i + 1)));
            }
            records.push((tokens, rec.labels));
        }
        Self::from_records(records)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.sentences {
            let rec = Record {
                text: self.text(s),
                labels: s.aspects.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn sentence(&self, id: usize) -> &Sentence {
        &self.sentences[id]
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Ids of the sentences mentioning `class`.
    pub fn class_sentences(&self, class: &str) -> &[usize] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn text(&self, s: &Sentence) -> String {
        s.tokens
            .iter()
            .map(|&t| self.vocab.token(t).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Re-indexes every sentence against another vocabulary, mapping unknown
    /// words to `<unk>`.
    pub fn remap(&self, vocab: &Vocabulary) -> Corpus {
        let sentences = self
            .sentences
            .iter()
            .map(|s| Sentence {
                tokens: s
                    .tokens
                    .iter()
                    .map(|&t| {
                        self.vocab
                            .token(t)
                            .and_then(|w| vocab.id(w))
                            .unwrap_or(UNK_ID)
                    })
                    .collect(),
                aspects: s.aspects.clone(),
            })
            .collect();
        Corpus {
            vocab: vocab.clone(),
            sentences,
            classes: self.classes.clone(),
            by_class: self.by_class.clone(),
        }
    }

    /// Stable content hash of the corpus text and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.sentences {
            self.text(s).hash(&mut h);
            s.aspects.hash(&mut h);
        }
        h.finish()
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::parse(BufReader::new(File::open(path)?))
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    corpus.write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// One trainable row per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub matrix: Param,
    /// Number of rows copied from a pre-trained file.
    pub covered: usize,
}

impl EmbeddingTable {
    /// All rows drawn from N(0, 0.1²).
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        Self::build(vocab, dim, &HashMap::new(), seed)
    }

    /// Rows for tokens in `known` copied verbatim, the rest drawn from N(0, 0.1²).
    pub fn from_vectors(vocab: &Vocabulary, dim: usize, known: &HashMap<String, Vec<f64>>, seed: u64) -> Result<Self> {
        if let Some((t, v)) = known.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Format(format!("vector for {t:?} has width {}, expected {dim}", v.len())));
        }
        Ok(Self::build(vocab, dim, known, seed))
    }

    fn build(vocab: &Vocabulary, dim: usize, known: &HashMap<String, Vec<f64>>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("finite std");
        let mut data = Vec::with_capacity(vocab.len() * dim);
        let mut covered = 0;
        for token in vocab.tokens() {
            match known.get(token) {
                Some(row) => {
                    covered += 1;
                    data.extend_from_slice(row);
                }
                None => data.extend((0..dim).map(|_| normal.sample(&mut rng))),
            }
        }
        EmbeddingTable {
            dim,
            matrix: Param {
                shape: vec![vocab.len(), dim],
                data,
            },
            covered,
        }
    }

    /// Reads GloVe-format vectors for the tokens of `vocab`. Tokens absent
    /// from the file get N(0, 0.1²) rows from `seed`; an empty file yields a
    /// table of width `fallback_dim`.
    pub fn parse<R: BufRead>(reader: R, vocab: &Vocabulary, fallback_dim: usize, seed: u64) -> Result<Self> {
        let mut dim = None;
        let mut known = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else {
                continue;
            };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Format(format!(
                        "line {}: vector width {} differs from {d}",
                        i + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            if vocab.id(token).is_some() {
                known.insert(token.to_string(), values);
            }
        }
        let dim = dim.unwrap_or(fallback_dim);
        if dim == 0 {
            return Err(Error::Format("zero-width embeddings".into()));
        }
        Ok(Self::build(vocab, dim, &known, seed))
    }
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    fallback_dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    EmbeddingTable::parse(BufReader::new(File::open(path)?), vocab, fallback_dim, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub sentences_per_class: usize,
    /// Probability that a sentence also mentions a second aspect.
    pub multi_aspect_fraction: f64,
    pub vocab_size: usize,
    /// Inclusive range of sentence lengths.
    pub sentence_length_range: (usize, usize),
    /// Size of each class's private signal-token pool.
    pub signal_tokens_per_class: usize,
    /// Signal tokens inserted per mentioned aspect.
    pub signal_per_aspect: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 50,
            sentences_per_class: 100,
            multi_aspect_fraction: 0.3,
            vocab_size: 1000,
            sentence_length_range: (6, 14),
            signal_tokens_per_class: 8,
            signal_per_aspect: 2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.multi_aspect_fraction) {
            return Err(Error::Config(format!(
                "multi_aspect_fraction {} outside [0, 1]",
                self.multi_aspect_fraction
            )));
        }
        if self.num_classes == 0 || self.sentences_per_class == 0 {
            return Err(Error::Config("need at least one class and one sentence".into()));
        }
        if self.multi_aspect_fraction > 0.0 && self.num_classes < 2 {
            return Err(Error::Config("multi-aspect sentences need two classes".into()));
        }
        if self.signal_tokens_per_class == 0 || self.signal_per_aspect == 0 {
            return Err(Error::Config("signal token counts must be positive".into()));
        }
        let (lo, hi) = self.sentence_length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad sentence length range {lo}..={hi}")));
        }
        let signal = self.num_classes * self.signal_tokens_per_class;
        if self.vocab_size <= signal {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no background tokens after {signal} signal tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Spread of the synthetic "pre-trained" vectors that accompany a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticEmbeddingConfig {
    pub dim: usize,
    /// Class centroids are confined to the first `aspect_rank` coordinates,
    /// a subspace shared by all classes. 0 means the full width.
    pub aspect_rank: usize,
    /// Std of each class centroid.
    pub class_scale: f64,
    /// Std of a signal token around its class centroid.
    pub token_scale: f64,
    /// Std of background tokens outside the aspect subspace.
    pub background_scale: f64,
    /// Std of background tokens inside the aspect subspace.
    pub background_leak: f64,
    /// Length of an offset shared by every signal token, separating
    /// aspect words from background words along one direction.
    pub aspect_offset: f64,
}

impl Default for SyntheticEmbeddingConfig {
    fn default() -> Self {
        SyntheticEmbeddingConfig {
            dim: 50,
            aspect_rank: 10,
            class_scale: 1.0,
            token_scale: 0.2,
            background_scale: 0.5,
            background_leak: 0.1,
            aspect_offset: 2.0,
        }
    }
}

/// GloVe-style vectors for the vocabulary of [`generate_synthetic`]: signal
/// tokens of one class scatter around a shared random centroid, background
/// tokens are independent draws that mostly avoid the subspace holding the
/// centroids. Plays the role of pre-trained embeddings
/// in which words about the same aspect lie close together.
pub fn generate_synthetic_embeddings(
    config: &SyntheticConfig,
    emb: &SyntheticEmbeddingConfig,
    seed: u64,
) -> Result<Vec<(String, Vec<f64>)>> {
    config.validate()?;
    if emb.dim == 0 {
        return Err(Error::Config("embedding dim must be positive".into()));
    }
    let normal = |std: f64| {
        Normal::new(0.0, std).map_err(|e| Error::Config(format!("embedding scale {std}: {e}")))
    };
    let (class_n, token_n, bg_n, leak_n) = (
        normal(emb.class_scale)?,
        normal(emb.token_scale)?,
        normal(emb.background_scale)?,
        normal(emb.background_leak)?,
    );
    let rank = if emb.aspect_rank == 0 { emb.dim } else { emb.aspect_rank };
    if rank > emb.dim {
        return Err(Error::Config(format!("aspect_rank {rank} exceeds dim {}", emb.dim)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut offset: Vec<f64> = (0..emb.dim).map(|_| unit.sample(&mut rng)).collect();
    let norm = offset.iter().map(|x| x * x).sum::<f64>().sqrt();
    offset.iter_mut().for_each(|x| *x *= emb.aspect_offset / norm);
    let pool = config.signal_tokens_per_class;
    let mut out = Vec::with_capacity(config.vocab_size);
    for class in 0..config.num_classes {
        let centroid: Vec<f64> = (0..emb.dim)
            .map(|j| offset[j] + if j < rank { class_n.sample(&mut rng) } else { 0.0 })
            .collect();
        for j in 0..pool {
            let v = centroid.iter().map(|c| c + token_n.sample(&mut rng)).collect();
            out.push((synthetic_word(class * pool + j), v));
        }
    }
    for id in config.num_classes * pool..config.vocab_size {
        let v = (0..emb.dim)
            .map(|j| if j < rank { leak_n.sample(&mut rng) } else { bg_n.sample(&mut rng) })
            .collect();
        out.push((synthetic_word(id), v));
    }
    Ok(out)
}

/// Writes vectors in GloVe text format.
pub fn write_embeddings<W: Write>(vectors: &[(String, Vec<f64>)], mut out: W) -> Result<()> {
    for (token, v) in vectors {
        write!(out, "{token}")?;
        for x in v {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn synthetic_word(id: usize) -> String {
    format!("w{id:05}")
}

pub fn class_name(i: usize) -> String {
    format!("aspect_{i:03}")
}

/// Generates a corpus where every class owns a disjoint pool of signal
/// tokens and all classes share the remaining background tokens.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = config.signal_tokens_per_class;
    let signal_total = config.num_classes * pool;
    let background: Vec<usize> = (signal_total..config.vocab_size).collect();
    let (lo, hi) = config.sentence_length_range;

    let mut records = Vec::with_capacity(config.num_classes * config.sentences_per_class);
    for class in 0..config.num_classes {
        for _ in 0..config.sentences_per_class {
            let mut aspects = vec![class];
            if rng.random_bool(config.multi_aspect_fraction) {
                let mut other = rng.random_range(0..config.num_classes - 1);
                if other >= class {
                    other += 1;
                }
                aspects.push(other);
            }
            let signal_count = aspects.len() * config.signal_per_aspect;
            let len = rng.random_range(lo..=hi).max(signal_count);
            let mut tokens: Vec<usize> = Vec::with_capacity(len);
            for &a in &aspects {
                for _ in 0..config.signal_per_aspect {
                    tokens.push(a * pool + rng.random_range(0..pool));
                }
            }
            while tokens.len() < len {
                tokens.push(*background.choose(&mut rng).expect("background is nonempty"));
            }
            tokens.shuffle(&mut rng);
            records.push((
                tokens.into_iter().map(synthetic_word).collect::<Vec<_>>(),
                aspects.into_iter().map(class_name).collect::<Vec<_>>(),
            ));
        }
    }
    Corpus::from_records(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

/// Disjoint train/validation/test class lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl ClassSplit {
    pub fn partition(&self, p: Partition) -> &[String] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("class {name:?} is in more than one partition")));
            }
            if corpus.class_sentences(name).is_empty() {
                return Err(Error::Validation(format!("class {name:?} is not in the corpus")));
            }
        }
        if let Some(missing) = corpus.classes().iter().find(|c| !seen.contains(c.as_str())) {
            return Err(Error::Validation(format!("class {missing:?} is in no partition")));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum SplitSpec {
    /// Shuffle the class list under the seed and cut it into these sizes.
    Counts { train: usize, val: usize, test: usize },
    Explicit(ClassSplit),
}

pub fn split_classes(corpus: &Corpus, spec: &SplitSpec, seed: u64) -> Result<ClassSplit> {
    let split = match spec {
        SplitSpec::Counts { train, val, test } => {
            let total = corpus.classes().len();
            if train + val + test != total {
                return Err(Error::Validation(format!(
                    "split sizes {train}+{val}+{test} do not add up to {total} classes"
                )));
            }
            let mut classes = corpus.classes().to_vec();
            classes.sort();
            classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let test_list = classes.split_off(train + val);
            let val_list = classes.split_off(*train);
            ClassSplit {
                train: classes,
                val: val_list,
                test: test_list,
            }
        }
        SplitSpec::Explicit(s) => s.clone(),
    };
    split.validate(corpus)?;
    Ok(split)
}
