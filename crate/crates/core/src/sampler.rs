//! Positive-pair manifests built from caption neighbor lists.
//!
//! Each source record is paired with its nearest caption neighbors; the
//! neighbor's image serves as the second view of the source during
//! contrastive training. Pairs are directed (source -> neighbor).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knn::{format_sim, json_str, NeighborList};

/// Similarity at or above which two distinct records count as duplicate captions.
pub const DUPLICATE_SIM: f32 = 1.0 - 1e-6;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("k_keep must be at least 1")]
    ZeroKeep,
    #[error("neighbors of {source_id:?} are not sorted by similarity at rank {rank}")]
    Unsorted { source_id: String, rank: usize },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairPolicy {
    pub k_keep: usize,
    pub min_similarity: Option<f32>,
}

impl Default for PairPolicy {
    fn default() -> Self {
        Self {
            k_keep: 1,
            min_similarity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub source_id: String,
    pub target_id: String,
    /// 1-based neighbor rank.
    pub rank: usize,
    pub similarity: f32,
    pub scope: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairManifest {
    pub pairs: Vec<PairRecord>,
    /// Sources that had fewer than k_keep usable neighbors.
    pub short_sources: usize,
}

/// Emits up to `k_keep` pairs per source in source order, then rank order.
///
/// Neighbors below `min_similarity` are dropped and neighbors equal to the
/// source id are skipped. A source with fewer neighbors than `k_keep` yields
/// what it has and is counted in `short_sources`.
pub fn build_pairs(
    neighbors: &[NeighborList],
    policy: &PairPolicy,
) -> Result<PairManifest, SamplerError> {
    if policy.k_keep == 0 {
        return Err(SamplerError::ZeroKeep);
    }
    let mut manifest = PairManifest::default();
    for list in neighbors {
        if let Some(pos) = list
            .neighbors
            .windows(2)
            .position(|w| w[1].sim > w[0].sim)
        {
            return Err(SamplerError::Unsorted {
                source_id: list.query_id.clone(),
                rank: pos + 2,
            });
        }
        let candidates = list
            .neighbors
            .iter()
            .filter(|n| n.id != list.query_id)
            .take(policy.k_keep);
        let mut kept = 0;
        for (i, n) in candidates.enumerate() {
            if policy.min_similarity.is_some_and(|floor| n.sim < floor) {
                continue;
            }
            manifest.pairs.push(PairRecord {
                source_id: list.query_id.clone(),
                target_id: n.id.clone(),
                rank: i + 1,
                similarity: n.sim,
                scope: list.scope.clone(),
            });
            kept += 1;
        }
        if kept < policy.k_keep {
            manifest.short_sources += 1;
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestStats {
    pub pair_count: usize,
    /// Absent for an empty manifest.
    pub mean_similarity: Option<f64>,
    pub per_scope_counts: BTreeMap<String, usize>,
    pub unscoped_pairs: usize,
    /// Pairs between distinct records whose captions embed identically.
    pub duplicate_caption_pairs: usize,
}

pub fn manifest_stats(pairs: &[PairRecord]) -> ManifestStats {
    let mut per_scope_counts = BTreeMap::new();
    let mut unscoped_pairs = 0;
    let mut duplicate_caption_pairs = 0;
    let mut sum = 0.0f64;
    for p in pairs {
        sum += f64::from(p.similarity);
        match &p.scope {
            Some(s) => *per_scope_counts.entry(s.clone()).or_insert(0) += 1,
            None => unscoped_pairs += 1,
        }
        if p.similarity >= DUPLICATE_SIM {
            duplicate_caption_pairs += 1;
        }
    }
    ManifestStats {
        pair_count: pairs.len(),
        mean_similarity: (!pairs.is_empty()).then(|| sum / pairs.len() as f64),
        per_scope_counts,
        unscoped_pairs,
        duplicate_caption_pairs,
    }
}

pub fn write_manifest_jsonl<W: Write>(pairs: &[PairRecord], mut out: W) -> std::io::Result<()> {
    for p in pairs {
        let scope = p.scope.as_deref().map_or_else(|| "null".to_owned(), json_str);
        writeln!(
            out,
            "{{\"src\":{},\"tgt\":{},\"rank\":{},\"sim\":{},\"scope\":{}}}",
            json_str(&p.source_id),
            json_str(&p.target_id),
            p.rank,
            format_sim(p.similarity),
            scope
        )?;
    }
    out.flush()
}

#[derive(Deserialize)]
struct PairLine {
    src: String,
    tgt: String,
    rank: usize,
    sim: f64,
    scope: Option<String>,
}

pub fn read_manifest_jsonl<R: BufRead>(input: R) -> Result<Vec<PairRecord>, SamplerError> {
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLine = serde_json::from_str(&line).map_err(|e| SamplerError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        pairs.push(PairRecord {
            source_id: p.src,
            target_id: p.tgt,
            rank: p.rank,
            similarity: p.sim as f32,
            scope: p.scope,
        });
    }
    Ok(pairs)
}
