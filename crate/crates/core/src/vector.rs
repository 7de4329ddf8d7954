//! Vocabulary-dimensional sparse term-weight vectors, impact quantization,
//! and the JSONL interchange format shared by the rest of the pipeline.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// The token space defining the dimensions of every lexical vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least 2 tokens".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens })
    }

    /// Synthetic vocabulary `t0000`, `t0001`, ... used by demos and tests.
    pub fn synthetic(size: usize) -> Self {
        let tokens = (0..size).map(|i| format!("t{i:04}")).collect();
        Self::new(tokens).expect("synthetic vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Hash a whitespace-tokenized string into token ids (FNV-1a mod |V|).
/// Demo-only convenience; real input is pre-tokenized id sequences.
pub fn hash_tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    text.split_whitespace()
        .map(|word| {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in word.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            (h % vocab_size as u64) as u32
        })
        .collect()
}

/// Sparse term-weight vector: sorted `(term_id, weight)` pairs, weights > 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Entries must be strictly increasing in term_id with positive finite weights.
    pub fn from_entries(entries: Vec<(u32, f64)>) -> Result<Self> {
        for window in entries.windows(2) {
            if window[0].0 >= window[1].0 {
                return Err(Error::InvalidArgument(
                    "term ids must be strictly increasing".into(),
                ));
            }
        }
        for &(term, w) in &entries {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "weight for term {term} must be positive and finite, got {w}"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Sorts by term_id and drops non-positive weights. Duplicate ids are an error.
    pub fn from_unsorted(mut pairs: Vec<(u32, f64)>) -> Result<Self> {
        pairs.retain(|&(_, w)| w != 0.0);
        pairs.sort_by_key(|&(t, _)| t);
        for window in pairs.windows(2) {
            if window[0].0 == window[1].0 {
                return Err(Error::InvalidArgument(format!(
                    "duplicate term id {}",
                    window[0].0
                )));
            }
        }
        Self::from_entries(pairs)
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn weight(&self, term_id: u32) -> f64 {
        match self.entries.binary_search_by_key(&term_id, |&(t, _)| t) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn max_term_id(&self) -> Option<u32> {
        self.entries.last().map(|&(t, _)| t)
    }

    /// Full dense array of length `vocab_size` with zeros off-support.
    pub fn densify(&self, vocab_size: usize) -> Vec<f64> {
        let mut dense = vec![0.0; vocab_size];
        for &(t, w) in &self.entries {
            dense[t as usize] = w;
        }
        dense
    }

    /// Inverse of [`densify`](Self::densify): keep strictly positive entries.
    pub fn sparsify(dense: &[f64]) -> Self {
        let entries = dense
            .iter()
            .enumerate()
            .filter(|&(_, &w)| w > 0.0)
            .map(|(t, &w)| (t as u32, w))
            .collect();
        Self { entries }
    }
}

/// Σ_j a_j·b_j over shared term ids; 0 for disjoint support.
pub fn inner_product(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut sum = 0.0;
    let (ae, be) = (&a.entries, &b.entries);
    while i < ae.len() && j < be.len() {
        match ae[i].0.cmp(&be[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum += ae[i].1 * be[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    sum
}

/// Integer impact vector produced by quantization.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuantizedVector {
    entries: Vec<(u32, u32)>,
}

impl QuantizedVector {
    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Scale weights by `scale` and round half away from zero; zero impacts are dropped.
pub fn quantize(v: &SparseVector, scale: u32) -> QuantizedVector {
    assert!(scale >= 1, "scale must be >= 1");
    let entries = v
        .entries
        .iter()
        .filter_map(|&(t, w)| {
            // f64::round rounds half away from zero. The nudge compensates
            // binary representation error just below decimal halves
            // (2.675 * 100 == 267.4999... in f64 but should round to 268).
            let impact = (w * scale as f64 + 1e-9).round();
            if impact >= 1.0 {
                Some((t, impact as u32))
            } else {
                None
            }
        })
        .collect();
    QuantizedVector { entries }
}

/// One JSONL line: `{"id": "...", "vector": {"<term_id>": <weight>, ...}}`.
pub fn write_vector_line<W: Write>(w: &mut W, id: &str, v: &SparseVector) -> Result<()> {
    let mut map = serde_json::Map::new();
    for &(t, weight) in v.entries() {
        map.insert(
            t.to_string(),
            serde_json::Number::from_f64(weight)
                .ok_or_else(|| Error::InvalidArgument(format!("non-finite weight {weight}")))?
                .into(),
        );
    }
    let obj = serde_json::json!({ "id": id, "vector": serde_json::Value::Object(map) });
    writeln!(w, "{obj}")?;
    Ok(())
}

pub fn write_vectors<W: Write>(w: &mut W, vectors: &[(String, SparseVector)]) -> Result<()> {
    for (id, v) in vectors {
        write_vector_line(w, id, v)?;
    }
    Ok(())
}

/// Parse the JSONL vector format. `vocab_size`, when given, bounds term ids.
pub fn read_vectors<R: BufRead>(
    reader: R,
    vocab_size: Option<usize>,
) -> Result<Vec<(String, SparseVector)>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| parse("missing string field `id`".into()))?
            .to_string();
        let map = value
            .get("vector")
            .and_then(|v| v.as_object())
            .ok_or_else(|| parse("missing object field `vector`".into()))?;
        let mut pairs = Vec::with_capacity(map.len());
        for (key, val) in map {
            let term: u32 = key
                .parse()
                .map_err(|_| parse(format!("bad term id `{key}`")))?;
            if let Some(size) = vocab_size {
                if term as usize >= size {
                    return Err(parse(format!("term id {term} out of range for |V|={size}")));
                }
            }
            let weight = val
                .as_f64()
                .ok_or_else(|| parse(format!("bad weight for term {term}")))?;
            if !weight.is_finite() || weight < 0.0 {
                return Err(parse(format!("weight for term {term} must be non-negative")));
            }
            pairs.push((term, weight));
        }
        let v = SparseVector::from_unsorted(pairs).map_err(|e| parse(e.to_string()))?;
        out.push((id, v));
    }
    Ok(out)
}
