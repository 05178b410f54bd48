//! Synthetic concept embedder and embedding-file ingestion.
//!
//! Each concept maps to a pseudorandom unit vector seeded by
//! `SHA-256(seed ‖ concept)`, drawn as i.i.d. standard normals from ChaCha8.
//! An observation embeds as the normalized mean of its concept vectors.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::{DetectorError, EmbeddingCache};

pub const MIN_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cache(#[from] DetectorError),
}

/// Ground-truth hazard annotation carried by scripted observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum HazardClass {
    #[default]
    None,
    Inconsequential,
    Consequential { target: usize },
}

impl HazardClass {
    pub fn name(&self) -> &'static str {
        match self {
            HazardClass::None => "none",
            HazardClass::Inconsequential => "inconsequential",
            HazardClass::Consequential { .. } => "consequential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    concepts: Vec<String>,
    pub timestamp: u64,
    #[serde(default)]
    pub hazard: HazardClass,
}

impl Observation {
    /// Duplicate concepts are dropped, keeping the first occurrence.
    pub fn new<S: Into<String>>(concepts: impl IntoIterator<Item = S>, timestamp: u64) -> Self {
        let mut out: Vec<String> = Vec::new();
        for c in concepts {
            let c = c.into();
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Self { concepts: out, timestamp, hazard: HazardClass::None }
    }

    pub fn with_hazard(mut self, hazard: HazardClass) -> Self {
        self.hazard = hazard;
        self
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }
}

/// Unit vector for one concept.
pub fn concept_vector(concept: &str, dim: usize, seed: u64) -> Result<DVector<f64>, EmbeddingError> {
    if dim < MIN_DIM {
        return Err(EmbeddingError::Input(format!("dim must be >= {MIN_DIM}, got {dim}")));
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(concept.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    loop {
        let v: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let norm = v.norm();
        if norm > 0.0 {
            return Ok(v / norm);
        }
    }
}

/// Normalized mean of the concept vectors. Concepts are summed in sorted
/// order so the result does not depend on their order in the observation.
pub fn concept_embed(obs: &Observation, dim: usize, seed: u64) -> Result<DVector<f64>, EmbeddingError> {
    embed_concepts(obs.concepts(), dim, seed)
}

pub fn embed_concepts<S: AsRef<str>>(concepts: &[S], dim: usize, seed: u64) -> Result<DVector<f64>, EmbeddingError> {
    if concepts.is_empty() {
        return Err(EmbeddingError::Input("observation has no concepts".into()));
    }
    let mut sorted: Vec<&str> = concepts.iter().map(|c| c.as_ref()).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut sum = DVector::zeros(dim);
    for c in &sorted {
        sum += concept_vector(c, dim, seed)?;
    }
    let norm = sum.norm();
    if norm == 0.0 {
        return Err(EmbeddingError::Input("concept vectors cancel".into()));
    }
    Ok(sum / norm)
}

/// Parses the text format: a `dim=<e> count=<N>` header, then `N` rows of
/// `e` whitespace-separated floats.
pub fn parse_embeddings(text: &str) -> Result<EmbeddingCache, EmbeddingError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines
        .next()
        .ok_or(EmbeddingError::Parse { line: 1, msg: "missing header".into() })?;
    let perr = |line: usize, msg: String| EmbeddingError::Parse { line: line + 1, msg };
    let mut dim = None;
    let mut count = None;
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| perr(hline, format!("malformed header field '{field}'")))?;
        let value: usize = value
            .parse()
            .map_err(|_| perr(hline, format!("header value '{value}' is not a count")))?;
        match key {
            "dim" => dim = Some(value),
            "count" => count = Some(value),
            _ => return Err(perr(hline, format!("unknown header key '{key}'"))),
        }
    }
    let (dim, count) = match (dim, count) {
        (Some(d), Some(c)) if d > 0 => (d, c),
        _ => return Err(perr(hline, "header must be 'dim=<e> count=<N>' with e >= 1".into())),
    };
    let mut data = Vec::with_capacity(dim * count);
    let mut rows = 0;
    for (ln, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| perr(ln, format!("row {}: '{t}' is not a number", rows + 1))))
            .collect::<Result<_, _>>()?;
        if row.len() != dim {
            return Err(perr(ln, format!("row {} has {} values, expected {dim}", rows + 1, row.len())));
        }
        if row.iter().all(|&v| v == 0.0) || row.iter().any(|v| !v.is_finite()) {
            return Err(perr(ln, format!("row {} cannot be normalized", rows + 1)));
        }
        data.extend(row);
        rows += 1;
    }
    if rows != count {
        return Err(EmbeddingError::Parse {
            line: hline + 1,
            msg: format!("header declares {count} rows, found {rows}"),
        });
    }
    Ok(EmbeddingCache::new(DMatrix::from_row_slice(count, dim, &data))?)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingCache, EmbeddingError> {
    parse_embeddings(&std::fs::read_to_string(path)?)
}

/// Inverse of [`parse_embeddings`]; floats are written in shortest
/// round-trip form so a reload is bit-exact.
pub fn format_embeddings(cache: &EmbeddingCache) -> String {
    let v = cache.vectors();
    let mut out = format!("dim={} count={}\n", v.ncols(), v.nrows());
    for i in 0..v.nrows() {
        for j in 0..v.ncols() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:?}", v[(i, j)]);
        }
        out.push('\n');
    }
    out
}

/// Limit on the number of cached combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBudget {
    pub max_rows: usize,
    /// Seeded subsampling beyond the budget; otherwise exceeding it is an
    /// error.
    pub subsample: bool,
}

/// All subsets of `0..n` of size `1..=max_size`, by size then
/// lexicographically.
pub fn combinations(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for size in 1..=max_size.min(n) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.clone());
            let mut i = size;
            while i > 0 && idx[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

/// Embeds every vocabulary combination of size `1..=max_combo`.
pub fn build_nominal_cache<S: AsRef<str>>(
    vocabulary: &[S],
    max_combo: usize,
    dim: usize,
    seed: u64,
    budget: Option<CacheBudget>,
) -> Result<EmbeddingCache, EmbeddingError> {
    if vocabulary.is_empty() {
        return Err(EmbeddingError::Input("vocabulary is empty".into()));
    }
    if max_combo == 0 {
        return Err(EmbeddingError::Input("max_combo must be >= 1".into()));
    }
    let mut combos = combinations(vocabulary.len(), max_combo);
    if let Some(b) = budget {
        if combos.len() > b.max_rows {
            if !b.subsample {
                return Err(EmbeddingError::Config(format!(
                    "{} combinations exceed the budget of {} rows",
                    combos.len(),
                    b.max_rows
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
            let mut keep = sample(&mut rng, combos.len(), b.max_rows).into_vec();
            keep.sort_unstable();
            combos = keep.into_iter().map(|i| combos[i].clone()).collect();
        }
    }
    let vectors: Vec<DVector<f64>> = vocabulary
        .iter()
        .map(|c| concept_vector(c.as_ref(), dim, seed))
        .collect::<Result<_, _>>()?;
    let mut data = DMatrix::zeros(combos.len(), dim);
    for (r, combo) in combos.iter().enumerate() {
        // sum in concept-string order, matching concept_embed
        let mut members: Vec<usize> = combo.clone();
        members.sort_by(|&a, &b| vocabulary[a].as_ref().cmp(vocabulary[b].as_ref()));
        let mut sum = DVector::zeros(dim);
        for &i in &members {
            sum += &vectors[i];
        }
        data.row_mut(r).copy_from(&(sum.transpose() / sum.norm()));
    }
    Ok(EmbeddingCache::new(data)?)
}
