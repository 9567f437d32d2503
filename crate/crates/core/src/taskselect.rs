//! Picking the article that matches a video by letting each narration vote
//! for its most similar article title.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mix_seed, Article, Corpus};
use crate::error::{Error, Result};

pub const HASH_BUCKETS: usize = 256;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Key used by the precomputed-embedding file.
pub fn text_hash(text: &str) -> u64 {
    fnv1a64(text.as_bytes())
}

/// Deterministic text → unit vector map.
pub trait TextEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Counts of hashed character trigrams of the lower-cased text, L2
/// normalized. Texts shorter than three characters share one reserved
/// vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramEmbedder;

impl TrigramEmbedder {
    pub fn reserved() -> Vec<f64> {
        vec![1.0 / (HASH_BUCKETS as f64).sqrt(); HASH_BUCKETS]
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        if chars.len() < 3 {
            return Self::reserved();
        }
        let mut v = vec![0.0; HASH_BUCKETS];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut n = 0;
            for c in w {
                n += c.encode_utf8(&mut buf[n..]).len();
            }
            v[(fnv1a64(&buf[..n]) % HASH_BUCKETS as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl TextEmbedder for TrigramEmbedder {
    fn dim(&self) -> usize {
        HASH_BUCKETS
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_text(text))
    }
}

/// Embedding with the default trigram embedder.
pub fn embed_text(text: &str) -> Vec<f64> {
    TrigramEmbedder.embed_text(text)
}

/// Vectors produced elsewhere, read from JSON lines
/// `{"text_hash": "<16 hex digits>", "vector": [...]}`. Vectors are
/// normalized on load.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbedder {
    dim: usize,
    vectors: HashMap<u64, Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorLine {
    text_hash: String,
    vector: Vec<f64>,
}

impl PrecomputedEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = PrecomputedEmbedder::default();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::format(path, format!("line {}: {reason}", n + 1));
            let rec: VectorLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let hash = u64::from_str_radix(rec.text_hash.trim_start_matches("0x"), 16)
                .map_err(|e| bad(format!("text_hash: {e}")))?;
            if out.vectors.is_empty() {
                out.dim = rec.vector.len();
            }
            if rec.vector.is_empty() || rec.vector.len() != out.dim {
                return Err(bad(format!("vector length {} (expected {})", rec.vector.len(), out.dim)));
            }
            let norm = rec.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(bad("vector has zero or non-finite norm".into()));
            }
            out.vectors.insert(hash, rec.vector.iter().map(|x| x / norm).collect());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl TextEmbedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.vectors.get(&text_hash(text)).cloned().ok_or_else(|| {
            Error::Validation(format!("no precomputed embedding for {text:?} ({:016x})", text_hash(text)))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStrategy {
    /// Use the task id stored with each video.
    #[default]
    Metadata,
    /// The task with the most votes.
    Top1,
    /// A seeded uniform draw among the five best-voted tasks.
    RandomTop5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRanking {
    /// `(task_id, votes)`, most votes first; ties keep article order.
    pub entries: Vec<(String, usize)>,
    pub strategy: TaskStrategy,
}

impl TaskRanking {
    pub fn winner(&self) -> &str {
        &self.entries[0].0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rank(narrations: &[String], titles: &[(String, Vec<f64>)], embedder: &dyn TextEmbedder) -> Result<TaskRanking> {
    if titles.is_empty() {
        return Err(Error::Validation("task voting needs at least one article".into()));
    }
    if narrations.is_empty() {
        return Err(Error::Validation("task voting needs at least one narration".into()));
    }
    let mut votes = vec![0usize; titles.len()];
    for text in narrations {
        let e = embedder.embed(text)?;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, (_, t)) in titles.iter().enumerate() {
            let s = dot(&e, t);
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        votes[best] += 1;
    }
    let mut order: Vec<usize> = (0..titles.len()).collect();
    order.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
    Ok(TaskRanking {
        entries: order.into_iter().map(|i| (titles[i].0.clone(), votes[i])).collect(),
        strategy: TaskStrategy::Top1,
    })
}

fn embed_titles(articles: &[&Article], embedder: &dyn TextEmbedder) -> Result<Vec<(String, Vec<f64>)>> {
    articles
        .iter()
        .map(|a| Ok((a.task_id.clone(), embedder.embed(&a.title)?)))
        .collect()
}

/// Each narration votes for the article title it is most similar to.
pub fn vote_task(narrations: &[String], articles: &[&Article], embedder: &dyn TextEmbedder) -> Result<TaskRanking> {
    rank(narrations, &embed_titles(articles, embedder)?, embedder)
}

/// Maps every video id to a task id. Under the voting strategies, videos
/// without narrations fall back to their stored task id.
pub fn assign_articles(
    corpus: &Corpus,
    strategy: TaskStrategy,
    embedder: &dyn TextEmbedder,
    seed: u64,
) -> Result<BTreeMap<String, String>> {
    if strategy == TaskStrategy::Metadata {
        let missing: Vec<&str> = corpus
            .videos
            .iter()
            .filter(|v| v.task_id.is_none())
            .map(|v| v.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!("videos without task metadata: {missing:?}")));
        }
        return Ok(corpus
            .videos
            .iter()
            .map(|v| (v.id.clone(), v.task_id.clone().unwrap()))
            .collect());
    }
    let articles: Vec<&Article> = corpus.articles.values().collect();
    let titles = embed_titles(&articles, embedder)?;
    corpus
        .videos
        .par_iter()
        .enumerate()
        .map(|(ordinal, v)| {
            if v.narration_texts.is_empty() {
                let task = v.task_id.clone().ok_or_else(|| {
                    Error::Validation(format!("video `{}` has neither narrations nor task metadata", v.id))
                })?;
                return Ok((v.id.clone(), task));
            }
            let ranking = rank(&v.narration_texts, &titles, embedder)?;
            let pick = match strategy {
                TaskStrategy::RandomTop5 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ordinal as u64));
                    rng.random_range(0..ranking.entries.len().min(5))
                }
                _ => 0,
            };
            Ok((v.id.clone(), ranking.entries[pick].0.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureMatrix;

    fn article(id: &str, title: &str) -> Article {
        Article {
            task_id: id.into(),
            title: title.into(),
            step_texts: vec![],
            step_features: FeatureMatrix::new(0, 1, vec![]).unwrap(),
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        for s in ["mix the batter", "ab", "", "ünïcödé text"] {
            let v = embed_text(s);
            assert_eq!(v, embed_text(s));
            assert!((dot(&v, &v).sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(embed_text("ab"), TrigramEmbedder::reserved());
    }

    #[test]
    fn fnv_matches_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn votes_rank_by_count_then_index() {
        let arts = [article("a", "bake bread"), article("b", "fix bike")];
        let refs: Vec<&Article> = arts.iter().collect();
        let r = vote_task(&["fix bike".into()], &refs, &TrigramEmbedder).unwrap();
        assert_eq!(r.entries, vec![("b".into(), 1), ("a".into(), 0)]);
        let twins = [article("x", "fix bike"), article("y", "fix bike")];
        let twins: Vec<&Article> = twins.iter().collect();
        let r = vote_task(&["fix bike".into()], &twins, &TrigramEmbedder).unwrap();
        assert_eq!(r.winner(), "x");
        assert!(vote_task(&[], &refs, &TrigramEmbedder).is_err());
    }
}
