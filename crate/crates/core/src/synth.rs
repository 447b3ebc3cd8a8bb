//! Deterministic cluster-structured synthetic corpus.
//!
//! Clusters sit on a ring. Every passage of a cluster carries the cluster's
//! three core words, two of its topic words, one core word of a ring
//! neighbour, a filler word and a unique instance word. A query repeats the
//! instance word, two core words and one topic word of its passage, so
//! cluster-mates form a broad tier of similar-looking negatives that only the
//! instance word separates from the gold passage. STS labels are
//! `3 − ring distance` (clamped at 0).

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassificationRecord, DataError, PairRecord, RetrievalRecord, StsRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_clusters: usize,
    pub per_cluster: usize,
    /// Topic words per cluster.
    pub vocab: usize,
    pub filler_vocab: usize,
    pub n_queries: usize,
    pub n_sts: usize,
    pub classification_per_cluster: usize,
    /// Fraction of extra pair records whose query belongs to another passage.
    pub noise_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clusters: 64,
            per_cluster: 64,
            vocab: 24,
            filler_vocab: 256,
            n_queries: 512,
            n_sts: 2048,
            classification_per_cluster: 8,
            noise_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub pairs: Vec<PairRecord>,
    pub retrieval: Vec<RetrievalRecord>,
    pub sts: Vec<StsRecord>,
    pub classification: Vec<ClassificationRecord>,
    /// Every passage, cluster-major; position is the corpus id.
    pub corpus: Vec<String>,
    /// Cluster of each corpus entry.
    pub corpus_clusters: Vec<usize>,
}

const CORE_WORDS: usize = 3;
const CORE_PER_QUERY: usize = 2;
const TOPICS_PER_PASSAGE: usize = 2;
const MAX_LABEL: usize = 3;

fn topic(c: usize, j: usize) -> String {
    format!("t{c}_{j}")
}

fn core(c: usize, j: usize) -> String {
    format!("k{c}_{j}")
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> String {
    format!("f{}", rng.random_range(0..n))
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn topic_ids(&mut self, k: usize) -> Vec<usize> {
        let all: Vec<usize> = (0..self.cfg.vocab).collect();
        if self.cfg.vocab >= k {
            all.choose_multiple(&mut self.rng, k).copied().collect()
        } else {
            (0..k).map(|_| self.rng.random_range(0..self.cfg.vocab)).collect()
        }
    }

    fn neighbour(&mut self, c: usize) -> usize {
        let n = self.cfg.n_clusters;
        if self.rng.random_bool(0.5) {
            (c + 1) % n
        } else {
            (c + n - 1) % n
        }
    }

    /// Core words, topic words, a bridge word and a filler; no instance word.
    fn body(&mut self, c: usize, topics: &[usize]) -> Vec<String> {
        let mut words: Vec<String> = (0..CORE_WORDS).map(|j| core(c, j)).collect();
        words.extend(topics.iter().map(|&j| topic(c, j)));
        let nb = self.neighbour(c);
        let j = self.rng.random_range(0..CORE_WORDS);
        words.push(core(nb, j));
        words.push(filler(&mut self.rng, self.cfg.filler_vocab));
        words
    }

    fn finish(&mut self, mut words: Vec<String>) -> String {
        words.shuffle(&mut self.rng);
        words.join(" ")
    }

    fn query_for(&mut self, c: usize, m: usize, topics: &[usize]) -> String {
        let mut words = vec![format!("p{c}_{m}")];
        let cores: Vec<usize> = (0..CORE_WORDS).collect();
        words.extend(cores.choose_multiple(&mut self.rng, CORE_PER_QUERY).map(|&j| core(c, j)));
        let t = *topics.choose(&mut self.rng).expect("passage has topics");
        words.push(topic(c, t));
        words.push(filler(&mut self.rng, self.cfg.filler_vocab));
        self.finish(words)
    }

    fn sentence(&mut self, c: usize) -> String {
        let topics = self.topic_ids(TOPICS_PER_PASSAGE);
        let words = self.body(c, &topics);
        self.finish(words)
    }
}

fn ring_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

/// Generates every dataset from one seed.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthData, DataError> {
    let sizes = [
        ("n_clusters", cfg.n_clusters),
        ("per_cluster", cfg.per_cluster),
        ("vocab", cfg.vocab),
        ("filler_vocab", cfg.filler_vocab),
    ];
    for (name, v) in sizes {
        if v == 0 {
            return Err(DataError::InvalidSize(format!("{name} must be positive")));
        }
    }
    let total = cfg.n_clusters * cfg.per_cluster;
    if cfg.n_queries > total {
        return Err(DataError::InvalidSize(format!(
            "n_queries {} exceeds corpus size {total}",
            cfg.n_queries
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise_fraction) {
        return Err(DataError::InvalidSize(format!("noise_fraction {} outside [0, 1]", cfg.noise_fraction)));
    }

    let mut g = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };

    let mut corpus = Vec::with_capacity(total);
    let mut corpus_clusters = Vec::with_capacity(total);
    let mut passage_topics = Vec::with_capacity(total);
    for c in 0..cfg.n_clusters {
        for m in 0..cfg.per_cluster {
            let topics = g.topic_ids(TOPICS_PER_PASSAGE);
            let mut words = g.body(c, &topics);
            words.push(format!("p{c}_{m}"));
            corpus.push(g.finish(words));
            corpus_clusters.push(c);
            passage_topics.push(topics);
        }
    }

    let mut pairs = Vec::with_capacity(total);
    for id in 0..total {
        let (c, m) = (id / cfg.per_cluster, id % cfg.per_cluster);
        let query = g.query_for(c, m, &passage_topics[id]);
        pairs.push(PairRecord {
            query,
            passage: corpus[id].clone(),
            category: Some("synthetic".into()),
        });
    }
    let n_noisy = (cfg.noise_fraction * total as f64).round() as usize;
    for _ in 0..n_noisy {
        let id = g.rng.random_range(0..total);
        let other = g.rng.random_range(0..total);
        let (c, m) = (other / cfg.per_cluster, other % cfg.per_cluster);
        let query = g.query_for(c, m, &passage_topics[other]);
        pairs.push(PairRecord {
            query,
            passage: corpus[id].clone(),
            category: Some("noisy".into()),
        });
    }

    let stride = total.checked_div(cfg.n_queries).unwrap_or(1);
    let retrieval = (0..cfg.n_queries)
        .map(|q| {
            let id = q * stride;
            let (c, m) = (id / cfg.per_cluster, id % cfg.per_cluster);
            RetrievalRecord {
                query: g.query_for(c, m, &passage_topics[id]),
                positive: corpus[id].clone(),
                negatives: Vec::new(),
            }
        })
        .collect();

    let mut sts = Vec::with_capacity(cfg.n_sts);
    for _ in 0..cfg.n_sts {
        let c = g.rng.random_range(0..cfg.n_clusters);
        let offset = g.rng.random_range(0..=MAX_LABEL);
        let c2 = if g.rng.random_bool(0.5) {
            (c + offset) % cfg.n_clusters
        } else {
            (c + cfg.n_clusters - offset % cfg.n_clusters) % cfg.n_clusters
        };
        let dist = ring_distance(c, c2, cfg.n_clusters).min(MAX_LABEL);
        let text_a = g.sentence(c);
        let text_b = g.sentence(c2);
        sts.push(StsRecord {
            text_a,
            text_b,
            score: (MAX_LABEL - dist) as f64,
        });
    }

    let mut classification = Vec::with_capacity(cfg.n_clusters * cfg.classification_per_cluster);
    for c in 0..cfg.n_clusters {
        for _ in 0..cfg.classification_per_cluster {
            classification.push(ClassificationRecord {
                text: g.sentence(c),
                label: format!("topic_{c}"),
            });
        }
    }

    Ok(SynthData {
        pairs,
        retrieval,
        sts,
        classification,
        corpus,
        corpus_clusters,
    })
}
