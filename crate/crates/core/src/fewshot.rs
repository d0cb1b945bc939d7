//! Episodic N-way K-shot evaluation with a similarity-weighted nearest-neighbor classifier.
//!
//! Each episode draws `n_way` classes, `n_shot` train records per class as
//! support and up to `n_query` test records per class as queries (all test
//! records when a class has fewer). Features are centered on the support mean
//! and L2-normalized; a query is assigned the class whose support members have
//! the largest summed cosine similarity to it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::labels::{LabeledFeatureSet, Split};

/// z-score for a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum FewshotError {
    #[error("invalid episode spec: {0}")]
    Spec(String),
    #[error("only {eligible} classes have >= {n_shot} train and >= 1 test records; need {n_way}")]
    InsufficientClasses {
        eligible: usize,
        n_way: usize,
        n_shot: usize,
    },
    #[error("center has length {actual}, features have dimension {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("record {0} is zero after centering")]
    ZeroAfterCentering(usize),
    #[error("support set is empty")]
    EmptySupport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            n_shot: 5,
            n_query: 5,
            episodes: 5000,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<(), FewshotError> {
        if self.n_way < 2 {
            return Err(FewshotError::Spec(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.n_shot == 0 || self.n_query == 0 {
            return Err(FewshotError::Spec("n_shot and n_query must be >= 1".into()));
        }
        if self.episodes == 0 {
            return Err(FewshotError::Spec("episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Record indices drawn for one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewshotReport {
    pub mean_accuracy: f64,
    /// Half-width of the 95% interval; 0 when undefined (single episode).
    pub ci95: f64,
    pub ci95_defined: bool,
    pub episodes: usize,
    pub seed: u64,
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub centering: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_episode_accuracies: Option<Vec<f64>>,
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one episode.
pub fn episode_rng(seed: u64, episode_index: u64) -> ChaCha8Rng {
    let stream = mix64(seed ^ mix64(episode_index.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    ChaCha8Rng::seed_from_u64(stream)
}

/// Per-class train/test record lists restricted to classes usable in an episode.
struct EpisodeSampler {
    eligible: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

impl EpisodeSampler {
    fn new(set: &LabeledFeatureSet, spec: &EpisodeSpec) -> Result<Self, FewshotError> {
        spec.validate()?;
        let mut train = vec![Vec::new(); set.n_classes()];
        let mut test = vec![Vec::new(); set.n_classes()];
        for (i, (&label, &split)) in set.labels().iter().zip(set.splits()).enumerate() {
            match split {
                Split::Train => train[label].push(i),
                Split::Test => test[label].push(i),
                Split::Val => {}
            }
        }
        let eligible: Vec<_> = train
            .into_iter()
            .zip(test)
            .enumerate()
            .filter(|(_, (tr, te))| tr.len() >= spec.n_shot && !te.is_empty())
            .map(|(c, (tr, te))| (c, tr, te))
            .collect();
        if eligible.len() < spec.n_way {
            return Err(FewshotError::InsufficientClasses {
                eligible: eligible.len(),
                n_way: spec.n_way,
                n_shot: spec.n_shot,
            });
        }
        Ok(Self { eligible })
    }

    fn draw(&self, spec: &EpisodeSpec, episode_index: u64) -> Episode {
        let mut rng = episode_rng(spec.seed, episode_index);
        let picked = sample(&mut rng, self.eligible.len(), spec.n_way);
        let mut episode = Episode {
            classes: Vec::with_capacity(spec.n_way),
            support: Vec::with_capacity(spec.n_way * spec.n_shot),
            query: Vec::with_capacity(spec.n_way * spec.n_query),
        };
        for slot in picked.iter() {
            let (class, train, test) = &self.eligible[slot];
            episode.classes.push(*class);
            for i in sample(&mut rng, train.len(), spec.n_shot).iter() {
                episode.support.push(train[i]);
            }
            let take = spec.n_query.min(test.len());
            for i in sample(&mut rng, test.len(), take).iter() {
                episode.query.push(test[i]);
            }
        }
        episode
    }
}

/// Draws episode `episode_index`; deterministic in `(spec.seed, episode_index)`.
pub fn sample_episode(
    set: &LabeledFeatureSet,
    spec: &EpisodeSpec,
    episode_index: u64,
) -> Result<Episode, FewshotError> {
    Ok(EpisodeSampler::new(set, spec)?.draw(spec, episode_index))
}

fn center_normalize<'a>(
    rows: impl Iterator<Item = (usize, &'a [f32])>,
    center: &[f64],
) -> Result<Vec<f64>, FewshotError> {
    let mut out = Vec::new();
    for (record, row) in rows {
        let start = out.len();
        out.extend(row.iter().zip(center).map(|(&v, &c)| f64::from(v) - c));
        let norm = out[start..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(FewshotError::ZeroAfterCentering(record));
        }
        for v in &mut out[start..] {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Replaces every feature row with the unit vector along `row - center`.
pub fn normalize_features(
    set: &LabeledFeatureSet,
    center: &[f64],
) -> Result<LabeledFeatureSet, FewshotError> {
    if center.len() != set.dim() {
        return Err(FewshotError::DimMismatch {
            expected: set.dim(),
            actual: center.len(),
        });
    }
    let normalized = center_normalize((0..set.len()).map(|i| (i, set.row(i))), center)?;
    Ok(LabeledFeatureSet::new(
        set.dim(),
        normalized.into_iter().map(|v| v as f32).collect(),
        set.labels().to_vec(),
        set.splits().to_vec(),
        set.class_names().map(<[String]>::to_vec),
    )
    .expect("shape preserved"))
}

/// Weighted-kNN prediction over the whole support set.
///
/// `support` and `queries` are row-major unit vectors of width `dim`. Each
/// query gets the class with the largest summed cosine; ties go to the
/// smallest class index.
pub fn knn_classify(
    support: &[f64],
    support_labels: &[usize],
    queries: &[f64],
    dim: usize,
) -> Result<Vec<usize>, FewshotError> {
    if support_labels.is_empty() {
        return Err(FewshotError::EmptySupport);
    }
    let n_classes = support_labels.iter().max().map_or(0, |m| m + 1);
    let mut scores = vec![0.0f64; n_classes];
    let mut present = vec![false; n_classes];
    for &l in support_labels {
        present[l] = true;
    }
    Ok(queries
        .chunks_exact(dim)
        .map(|q| {
            scores.iter_mut().for_each(|s| *s = 0.0);
            for (s, &label) in support.chunks_exact(dim).zip(support_labels) {
                scores[label] += q.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
            }
            let mut best: Option<usize> = None;
            for c in (0..n_classes).filter(|&c| present[c]) {
                if best.map_or(true, |b| scores[c] > scores[b]) {
                    best = Some(c);
                }
            }
            best.expect("support is non-empty")
        })
        .collect())
}

fn evaluate_episode(set: &LabeledFeatureSet, episode: &Episode) -> Result<f64, FewshotError> {
    let dim = set.dim();
    let mut center = vec![0.0f64; dim];
    for &r in &episode.support {
        for (c, &v) in center.iter_mut().zip(set.row(r)) {
            *c += f64::from(v);
        }
    }
    let n = episode.support.len() as f64;
    center.iter_mut().for_each(|c| *c /= n);
    let support = center_normalize(episode.support.iter().map(|&r| (r, set.row(r))), &center)?;
    let queries = center_normalize(episode.query.iter().map(|&r| (r, set.row(r))), &center)?;
    let support_labels: Vec<usize> = episode.support.iter().map(|&r| set.labels()[r]).collect();
    let predicted = knn_classify(&support, &support_labels, &queries, dim)?;
    let correct = predicted
        .iter()
        .zip(&episode.query)
        .filter(|(&p, &r)| p == set.labels()[r])
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Mean accuracy over `spec.episodes` episodes with a 95% normal interval.
///
/// Episodes run in parallel but are reduced in index order, so the report is
/// identical for any thread count.
pub fn run_fewshot(
    set: &LabeledFeatureSet,
    spec: &EpisodeSpec,
    keep_per_episode: bool,
) -> Result<FewshotReport, FewshotError> {
    let sampler = EpisodeSampler::new(set, spec)?;
    let accuracies: Vec<f64> = (0..spec.episodes as u64)
        .into_par_iter()
        .map(|e| evaluate_episode(set, &sampler.draw(spec, e)))
        .collect::<Result<_, _>>()?;
    let (mean, ci95) = mean_ci95(&accuracies);
    Ok(FewshotReport {
        mean_accuracy: mean,
        ci95: ci95.unwrap_or(0.0),
        ci95_defined: ci95.is_some(),
        episodes: spec.episodes,
        seed: spec.seed,
        n_way: spec.n_way,
        n_shot: spec.n_shot,
        n_query: spec.n_query,
        centering: "support",
        per_episode_accuracies: keep_per_episode.then_some(accuracies),
    })
}

/// Mean and `1.96 * s / sqrt(n)` with the n-1 sample deviation; the
/// interval is `None` for fewer than two values.
pub fn mean_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(Z95 * var.sqrt() / n.sqrt()))
}
