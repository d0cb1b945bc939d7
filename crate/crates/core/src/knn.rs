//! Exact top-k cosine search over normalized embedding matrices.
//!
//! The kernel scores query blocks against corpus blocks with a register-tiled
//! float32 dot product and keeps a bounded heap of the k best rows per query.
//! Every (query, corpus) score is produced by the same lane-structured
//! reduction no matter which tile or block it lands in, so results are
//! bit-identical across block sizes, thread counts and CPU feature levels.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{row_norm, EmbeddingMatrix, StoreError, NORM_TOLERANCE};

pub const DEFAULT_BLOCK_SIZE: usize = 4096;

/// Queries handled per parallel work item.
const QUERY_BLOCK: usize = 64;
/// Corpus rows kept hot while a query block sweeps over them.
const CORPUS_PANEL: usize = 48;
const LANES: usize = 8;
const TILE_Q: usize = 4;
const TILE_C: usize = 3;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("dimension mismatch: corpus has {corpus}, queries have {queries}")]
    DimMismatch { corpus: usize, queries: usize },
    #[error("k = {k} out of range (must be in 1..={max})")]
    KOutOfRange { k: usize, max: usize },
    #[error("{0} matrix is not flagged as L2-normalized")]
    Unnormalized(&'static str),
    #[error("query vector has norm {0}, expected 1")]
    QueryNotUnit(f64),
    #[error("scoped search requires scope labels on the corpus")]
    MissingScopes,
    #[error("scope {0:?} has a single record; scoped search needs at least 2 per scope")]
    SingletonScope(String),
    #[error("block size must be at least 1")]
    ZeroBlock,
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("memory bank capacity must be at least 1")]
    ZeroCapacity,
    #[error("neighbor file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub sim: f32,
}

/// Ranked neighbors for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_id: String,
    /// Scope label of the query, when the query matrix carries labels.
    pub scope: Option<String>,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    pub k: usize,
    pub exclude_self: bool,
    pub block_size: usize,
}

impl SearchParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            exclude_self: false,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }

    pub fn exclude_self(mut self, yes: bool) -> Self {
        self.exclude_self = yes;
        self
    }

    pub fn block_size(mut self, rows: usize) -> Self {
        self.block_size = rows;
        self
    }
}

// ---------------------------------------------------------------------------
// Dot-product kernel

#[inline(always)]
fn reduce_lanes(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Scores a QT x CT tile. `q` and `c` hold row slices of equal length.
#[inline(always)]
fn tile<const QT: usize, const CT: usize>(q: [&[f32]; QT], c: [&[f32]; CT]) -> [[f32; CT]; QT] {
    let dim = q[0].len();
    let body = dim - dim % LANES;
    let mut acc = [[[0.0f32; LANES]; CT]; QT];
    let mut d = 0;
    while d < body {
        for (qi, qrow) in q.iter().enumerate() {
            let qv = &qrow[d..d + LANES];
            for (ci, crow) in c.iter().enumerate() {
                let cv = &crow[d..d + LANES];
                let a = &mut acc[qi][ci];
                for l in 0..LANES {
                    a[l] = qv[l].mul_add(cv[l], a[l]);
                }
            }
        }
        d += LANES;
    }
    let mut out = [[0.0f32; CT]; QT];
    for qi in 0..QT {
        for ci in 0..CT {
            let mut s = reduce_lanes(&acc[qi][ci]);
            for t in body..dim {
                s = q[qi][t].mul_add(c[ci][t], s);
            }
            out[qi][ci] = s;
        }
    }
    out
}

/// Cosine score of two unit rows, identical bit-for-bit to the blocked kernel.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    tile::<1, 1>([a], [b])[0][0]
}

/// Fills `out[q * nc + c]` with the score of query row `q` against corpus row `c`.
#[inline(always)]
fn score_block_impl(queries: &[f32], corpus: &[f32], dim: usize, out: &mut [f32]) {
    let nq = queries.len() / dim;
    let nc = corpus.len() / dim;
    let qrow = |i: usize| &queries[i * dim..(i + 1) * dim];
    let crow = |i: usize| &corpus[i * dim..(i + 1) * dim];
    let mut panel = 0;
    while panel < nc {
        let panel_end = (panel + CORPUS_PANEL).min(nc);
        let mut qi = 0;
        while qi < nq {
            if qi + TILE_Q <= nq {
                let qs = [qrow(qi), qrow(qi + 1), qrow(qi + 2), qrow(qi + 3)];
                let mut ci = panel;
                while ci + TILE_C <= panel_end {
                    let t = tile::<TILE_Q, TILE_C>(qs, [crow(ci), crow(ci + 1), crow(ci + 2)]);
                    for (r, row) in t.iter().enumerate() {
                        out[(qi + r) * nc + ci..(qi + r) * nc + ci + TILE_C].copy_from_slice(row);
                    }
                    ci += TILE_C;
                }
                while ci < panel_end {
                    let t = tile::<TILE_Q, 1>(qs, [crow(ci)]);
                    for (r, row) in t.iter().enumerate() {
                        out[(qi + r) * nc + ci] = row[0];
                    }
                    ci += 1;
                }
                qi += TILE_Q;
            } else {
                for ci in panel..panel_end {
                    out[qi * nc + ci] = tile::<1, 1>([qrow(qi)], [crow(ci)])[0][0];
                }
                qi += 1;
            }
        }
        panel = panel_end;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn score_block_fma(queries: &[f32], corpus: &[f32], dim: usize, out: &mut [f32]) {
    score_block_impl(queries, corpus, dim, out)
}

fn score_block(queries: &[f32], corpus: &[f32], dim: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { score_block_fma(queries, corpus, dim, out) };
            return;
        }
    }
    score_block_impl(queries, corpus, dim, out)
}

// ---------------------------------------------------------------------------
// Bounded top-k

/// Heap entry ordered so that the *worst* candidate sits on top.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    sim: f32,
    row: u32,
}

impl Candidate {
    /// Ordering by rank: `Less` means `self` ranks ahead of `other`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then_with(|| self.row.cmp(&other.row))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, cand: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if cand.rank_cmp(&worst) == Ordering::Less {
                *worst = cand;
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        // into_sorted_vec is ascending by Ord, i.e. best rank first.
        self.heap.into_sorted_vec()
    }
}

// ---------------------------------------------------------------------------
// Search drivers

/// Raw search result: per query, (corpus row, similarity) best first.
fn search_rows(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    k: usize,
    skip_row: &[Option<usize>],
    block_size: usize,
) -> Vec<Vec<Candidate>> {
    let dim = corpus.dim();
    let nc = corpus.len();
    let q_all = queries.as_slice();
    let c_all = corpus.as_slice();
    let n_blocks = queries.len().div_ceil(QUERY_BLOCK);
    (0..n_blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let q_start = b * QUERY_BLOCK;
            let q_end = (q_start + QUERY_BLOCK).min(queries.len());
            let q_slice = &q_all[q_start * dim..q_end * dim];
            let nq = q_end - q_start;
            let mut heaps: Vec<TopK> = (0..nq).map(|_| TopK::new(k)).collect();
            let mut scores = vec![0.0f32; nq * block_size.min(nc)];
            let mut c_start = 0;
            while c_start < nc {
                let c_end = (c_start + block_size).min(nc);
                let width = c_end - c_start;
                let out = &mut scores[..nq * width];
                score_block(q_slice, &c_all[c_start * dim..c_end * dim], dim, out);
                for (local_q, heap) in heaps.iter_mut().enumerate() {
                    let skip = skip_row[q_start + local_q];
                    let row_scores = &out[local_q * width..(local_q + 1) * width];
                    for (offset, &sim) in row_scores.iter().enumerate() {
                        let row = c_start + offset;
                        if skip == Some(row) {
                            continue;
                        }
                        heap.offer(Candidate {
                            sim,
                            row: row as u32,
                        });
                    }
                }
                c_start = c_end;
            }
            heaps.into_iter().map(TopK::into_sorted)
        })
        .collect()
}

fn build_lists(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    raw: Vec<Vec<Candidate>>,
) -> Vec<NeighborList> {
    raw.into_iter()
        .enumerate()
        .map(|(q, cands)| NeighborList {
            query_id: queries.id(q).to_owned(),
            scope: queries.scope_of(q).map(str::to_owned),
            neighbors: cands
                .into_iter()
                .map(|c| Neighbor {
                    id: corpus.id(c.row as usize).to_owned(),
                    sim: c.sim,
                })
                .collect(),
        })
        .collect()
}

/// Exact top-k by cosine similarity for every query row.
///
/// With `exclude_self`, a corpus row whose id equals the query id is never
/// returned. Ties rank the lower corpus row first.
pub fn topk_exact(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    params: SearchParams,
) -> Result<Vec<NeighborList>, SearchError> {
    if corpus.dim() != queries.dim() {
        return Err(SearchError::DimMismatch {
            corpus: corpus.dim(),
            queries: queries.dim(),
        });
    }
    if !corpus.is_normalized() {
        return Err(SearchError::Unnormalized("corpus"));
    }
    if !queries.is_normalized() {
        return Err(SearchError::Unnormalized("query"));
    }
    if params.block_size == 0 {
        return Err(SearchError::ZeroBlock);
    }
    let skip_row: Vec<Option<usize>> = if params.exclude_self {
        let index = corpus.id_index();
        queries
            .ids()
            .iter()
            .map(|id| index.get(id.as_str()).copied())
            .collect()
    } else {
        vec![None; queries.len()]
    };
    let max = corpus.len() - usize::from(skip_row.iter().any(Option::is_some));
    if params.k == 0 || params.k > max {
        return Err(SearchError::KOutOfRange { k: params.k, max });
    }
    let raw = search_rows(corpus, queries, params.k, &skip_row, params.block_size);
    Ok(build_lists(corpus, queries, raw))
}

/// Self-excluded top-k where each record only sees records sharing its scope label.
///
/// Scopes smaller than k + 1 return every other member of the scope.
/// Output follows corpus row order.
pub fn topk_scoped(
    corpus: &EmbeddingMatrix,
    k: usize,
    block_size: usize,
) -> Result<Vec<NeighborList>, SearchError> {
    let scopes = corpus.scopes().ok_or(SearchError::MissingScopes)?;
    if !corpus.is_normalized() {
        return Err(SearchError::Unnormalized("corpus"));
    }
    if k == 0 {
        return Err(SearchError::KOutOfRange {
            k,
            max: corpus.len().saturating_sub(1),
        });
    }
    if block_size == 0 {
        return Err(SearchError::ZeroBlock);
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); scopes.labels().len()];
    for (row, &code) in scopes.codes().iter().enumerate() {
        members[code as usize].push(row);
    }
    if let Some(code) = members.iter().position(|m| m.len() == 1) {
        return Err(SearchError::SingletonScope(scopes.labels()[code].clone()));
    }
    let per_partition: Vec<(usize, Vec<Vec<Candidate>>)> = members
        .par_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(code, rows)| {
            let part = corpus.select_rows(rows);
            let skip: Vec<Option<usize>> = (0..rows.len()).map(Some).collect();
            let k_part = k.min(rows.len() - 1);
            (code, search_rows(&part, &part, k_part, &skip, block_size))
        })
        .collect();
    let mut raw: Vec<Vec<Candidate>> = vec![Vec::new(); corpus.len()];
    for (code, results) in per_partition {
        let rows = &members[code];
        for (local, mut cands) in results.into_iter().enumerate() {
            for c in &mut cands {
                c.row = rows[c.row as usize] as u32;
            }
            raw[rows[local]] = cands;
        }
    }
    Ok(build_lists(corpus, corpus, raw))
}

/// Number of distinct scope partitions a scoped search would use.
pub fn partition_count(corpus: &EmbeddingMatrix) -> usize {
    corpus.scopes().map_or(1, |s| {
        let mut used = vec![false; s.labels().len()];
        for &c in s.codes() {
            used[c as usize] = true;
        }
        used.into_iter().filter(|&u| u).count()
    })
}

// ---------------------------------------------------------------------------
// FIFO memory bank

/// Fixed-capacity FIFO of embeddings used as a nearest-neighbor pool.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(String, Vec<f32>)>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, SearchError> {
        if capacity == 0 {
            return Err(SearchError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// Bank holding the rows of `matrix` pushed in row order.
    pub fn from_matrix(matrix: &EmbeddingMatrix, capacity: usize) -> Result<Self, SearchError> {
        let mut bank = Self::new(capacity, matrix.dim())?;
        for row in 0..matrix.len() {
            bank.push(matrix.id(row), matrix.row(row))?;
        }
        Ok(bank)
    }

    /// Appends an entry; returns the id of the evicted oldest entry, if any.
    pub fn push(&mut self, id: &str, vector: &[f32]) -> Result<Option<String>, SearchError> {
        if vector.len() != self.dim {
            return Err(SearchError::DimMismatch {
                corpus: self.dim,
                queries: vector.len(),
            });
        }
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front().map(|(id, _)| id)
        } else {
            None
        };
        self.entries.push_back((id.to_owned(), vector.to_vec()));
        Ok(evicted)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entry with maximal cosine to `query`; ties go to the oldest entry.
    pub fn nearest(&self, query: &[f32]) -> Result<(&str, f32), SearchError> {
        if query.len() != self.dim {
            return Err(SearchError::DimMismatch {
                corpus: self.dim,
                queries: query.len(),
            });
        }
        let norm = row_norm(query);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(SearchError::QueryNotUnit(norm));
        }
        let mut best: Option<(usize, f32)> = None;
        for (pos, (_, v)) in self.entries.iter().enumerate() {
            let sim = dot(query, v);
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((pos, sim));
            }
        }
        let (pos, sim) = best.ok_or(SearchError::EmptyBank)?;
        Ok((self.entries[pos].0.as_str(), sim))
    }
}

// ---------------------------------------------------------------------------
// JSON Lines

#[derive(Serialize, Deserialize)]
struct NeighborLine {
    query: String,
    neighbors: Vec<NeighborEntry>,
}

#[derive(Serialize, Deserialize)]
struct NeighborEntry {
    id: String,
    sim: f64,
}

/// Similarities are written with exactly six decimals.
pub fn format_sim(sim: f32) -> String {
    format!("{:.6}", f64::from(sim))
}

pub fn write_neighbors_jsonl<W: Write>(lists: &[NeighborList], mut out: W) -> std::io::Result<()> {
    for list in lists {
        write!(out, "{{\"query\":{},\"neighbors\":[", json_str(&list.query_id))?;
        for (i, n) in list.neighbors.iter().enumerate() {
            if i > 0 {
                out.write_all(b",")?;
            }
            write!(out, "{{\"id\":{},\"sim\":{}}}", json_str(&n.id), format_sim(n.sim))?;
        }
        out.write_all(b"]}\n")?;
    }
    out.flush()
}

pub(crate) fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

pub fn read_neighbors_jsonl<R: BufRead>(input: R) -> Result<Vec<NeighborList>, SearchError> {
    let mut lists = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: NeighborLine = serde_json::from_str(&line).map_err(|e| SearchError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        lists.push(NeighborList {
            query_id: parsed.query,
            scope: None,
            neighbors: parsed
                .neighbors
                .into_iter()
                .map(|n| Neighbor {
                    id: n.id,
                    sim: n.sim as f32,
                })
                .collect(),
        });
    }
    Ok(lists)
}

/// Attaches scope labels from `corpus` to lists read back from disk.
pub fn attach_scopes(lists: &mut [NeighborList], corpus: &EmbeddingMatrix) {
    let index: HashMap<&str, usize> = corpus.id_index();
    for list in lists {
        list.scope = index
            .get(list.query_id.as_str())
            .and_then(|&row| corpus.scope_of(row))
            .map(str::to_owned);
    }
}
