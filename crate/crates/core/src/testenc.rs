//! Deterministic hash-based caption encoder and a synthetic concept corpus.
//!
//! The encoder maps each lowercase token to a fixed pseudo-random vector
//! derived from its FNV-1a hash and embeds a caption as the L2-normalized sum
//! of its token vectors. No model assets are needed, and output is identical
//! on every platform. Captions sharing most tokens land close together,
//! which is all the pipeline tests require.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{EmbeddingMatrix, ScopeLabels, StoreError};

/// Token used for captions with no alphanumeric content.
const EMPTY_TOKEN: &str = "<empty>";

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("captions line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("captions file mixes records with and without a scope (line {0})")]
    MixedScopes(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    dim: usize,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn add_token(&self, token: &str, acc: &mut [f64]) {
        let mut state = fnv1a(token.as_bytes());
        for a in acc.iter_mut() {
            // 53 random mantissa bits mapped to [-1, 1)
            let unit = (splitmix(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
            *a += 2.0 * unit - 1.0;
        }
    }

    /// Unit-norm embedding of `text`.
    pub fn encode(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            self.add_token(EMPTY_TOKEN, &mut acc);
        }
        for t in &tokens {
            self.add_token(t, &mut acc);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc.into_iter().map(|v| (v / norm) as f32).collect()
    }

    /// Normalized matrix of all captions, with scope labels when every caption has one.
    pub fn encode_all(&self, captions: &[Caption]) -> Result<EmbeddingMatrix, CaptionError> {
        let mut vectors = Vec::with_capacity(captions.len() * self.dim);
        for c in captions {
            vectors.extend(self.encode(&c.text));
        }
        let ids = captions.iter().map(|c| c.id.clone()).collect();
        let scopes = scope_column(captions)?;
        Ok(EmbeddingMatrix::new(ids, self.dim, vectors, scopes, true)?)
    }
}

fn scope_column(captions: &[Caption]) -> Result<Option<ScopeLabels>, CaptionError> {
    let with = captions.iter().filter(|c| c.scope.is_some()).count();
    if with == 0 {
        return Ok(None);
    }
    if let Some(pos) = captions.iter().position(|c| c.scope.is_none()) {
        return Err(CaptionError::MixedScopes(pos + 1));
    }
    let labels: Vec<&str> = captions.iter().map(|c| c.scope.as_deref().unwrap_or_default()).collect();
    Ok(Some(ScopeLabels::from_labels(&labels)))
}

pub fn read_captions_jsonl<R: BufRead>(input: R) -> Result<Vec<Caption>, CaptionError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CaptionError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_captions_jsonl<W: Write>(captions: &[Caption], mut out: W) -> std::io::Result<()> {
    for c in captions {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Caption tagged with the concept it was generated from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptCaption {
    pub caption: Caption,
    pub concept: usize,
}

const FILLERS: &[&str] = &[
    "today", "finally", "again", "new", "old", "tiny", "huge", "found", "made", "saw", "our",
    "this", "that", "best", "first", "last", "little", "quick", "shot", "view",
];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const SYLLABLES: &[&str] = &[
        "ka", "ro", "mi", "tu", "sel", "va", "nor", "pe", "lin", "qua", "dro", "bi", "zen", "fo",
        "ha", "gri",
    ];
    (0..3).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

/// `n_concepts` x `per_concept` captions. Each concept owns five vocabulary
/// words and every caption uses four of them, in shuffled order, plus one
/// filler word shared across concepts. Two captions of a concept share at
/// least three of five tokens; captions of different concepts share at most
/// the filler.
///
/// When `n_scopes > 0`, concept `c` is placed in scope `c % n_scopes`.
pub fn synth_concept_corpus(
    n_concepts: usize,
    per_concept: usize,
    n_scopes: usize,
    seed: u64,
) -> Vec<ConceptCaption> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<[String; 5]> = (0..n_concepts)
        .map(|c| {
            let base = pseudo_word(&mut rng);
            std::array::from_fn(|j| format!("{base}{c}x{j}"))
        })
        .collect();
    let mut out = Vec::with_capacity(n_concepts * per_concept);
    for i in 0..per_concept {
        for (concept, words) in vocab.iter().enumerate() {
            let mut picked: Vec<&str> = words.iter().map(String::as_str).collect();
            picked.shuffle(&mut rng);
            let text = picked[..4].join(" ");
            let filler = FILLERS[rng.gen_range(0..FILLERS.len())];
            out.push(ConceptCaption {
                caption: Caption {
                    id: format!("c{concept:03}-{i:03}"),
                    text: format!("{text} {filler}"),
                    scope: (n_scopes > 0).then(|| format!("scope{:03}", concept % n_scopes)),
                },
                concept,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::{dot, topk_exact, SearchParams};

    #[test]
    fn identical_text_identical_vector() {
        let enc = HashEncoder::new(64);
        assert_eq!(enc.encode("A dog, on grass"), enc.encode("a DOG on grass"));
        let v = enc.encode("");
        let n: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn overlap_orders_similarity() {
        let enc = HashEncoder::new(256);
        let a = enc.encode("red bicycle parked outside cafe");
        let near = enc.encode("red bicycle parked outside shop");
        let far = enc.encode("stormy ocean waves crashing");
        assert!(dot(&a, &near) > dot(&a, &far) + 0.3);
    }

    #[test]
    fn corpus_is_deterministic_and_counted() {
        let a = synth_concept_corpus(5, 20, 0, 3);
        assert_eq!(a, synth_concept_corpus(5, 20, 0, 3));
        assert_eq!(a.len(), 100);
        for c in 0..5 {
            assert_eq!(a.iter().filter(|r| r.concept == c).count(), 20);
        }
        let mut ids: Vec<&str> = a.iter().map(|r| r.caption.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn rank_one_neighbor_shares_concept() {
        let corpus = synth_concept_corpus(20, 10, 0, 17);
        let captions: Vec<Caption> = corpus.iter().map(|r| r.caption.clone()).collect();
        let m = HashEncoder::new(384).encode_all(&captions).unwrap();
        let out = topk_exact(&m, &m, SearchParams::new(1).exclude_self(true)).unwrap();
        let index = m.id_index();
        for (row, list) in out.iter().enumerate() {
            let nb = index[list.neighbors[0].id.as_str()];
            assert_eq!(corpus[row].concept, corpus[nb].concept);
        }
    }

    #[test]
    fn captions_jsonl_round_trip() {
        let caps = vec![
            Caption { id: "a".into(), text: "x y".into(), scope: Some("s".into()) },
            Caption { id: "b".into(), text: "\"quoted\"".into(), scope: Some("t".into()) },
        ];
        let mut buf = Vec::new();
        write_captions_jsonl(&caps, &mut buf).unwrap();
        assert_eq!(read_captions_jsonl(buf.as_slice()).unwrap(), caps);
        let mixed = vec![caps[0].clone(), Caption { id: "c".into(), text: "z".into(), scope: None }];
        assert!(matches!(HashEncoder::new(8).encode_all(&mixed), Err(CaptionError::MixedScopes(2))));
    }
}
