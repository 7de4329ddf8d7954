//! Quantized impact-scored inverted index: build, exact top-k search by
//! sum of impact products, and a checksummed on-disk format.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vector::{quantize, SparseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc_id: u32,
    pub impact: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IndexStats {
    pub doc_count: usize,
    pub total_postings: usize,
    pub avg_nnz: f64,
    /// Bytes on disk; 0 until saved or loaded.
    pub on_disk_size: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactIndex {
    /// term_id -> postings sorted by doc_id; terms sorted by term_id.
    postings: Vec<(u32, Vec<Posting>)>,
    /// doc_id -> external string id, in assignment order.
    doc_table: Vec<String>,
    scale: u32,
    stats: IndexStats,
}

impl ImpactIndex {
    /// Quantize each vector and add its surviving entries as postings.
    /// doc_ids are assigned in input order.
    pub fn build<I>(vectors: I, scale: u32) -> Result<Self>
    where
        I: IntoIterator<Item = (String, SparseVector)>,
    {
        if scale == 0 {
            return Err(Error::InvalidArgument("scale must be >= 1".into()));
        }
        let mut postings: HashMap<u32, Vec<Posting>> = HashMap::new();
        let mut doc_table = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut total_postings = 0usize;
        for (external_id, vector) in vectors {
            if !seen.insert(external_id.clone()) {
                return Err(Error::DuplicateDocId(external_id));
            }
            let doc_id = doc_table.len() as u32;
            doc_table.push(external_id);
            for &(term, impact) in quantize(&vector, scale).entries() {
                postings.entry(term).or_default().push(Posting { doc_id, impact });
                total_postings += 1;
            }
        }
        let mut postings: Vec<(u32, Vec<Posting>)> = postings.into_iter().collect();
        postings.sort_by_key(|&(t, _)| t);
        let doc_count = doc_table.len();
        let stats = IndexStats {
            doc_count,
            total_postings,
            avg_nnz: if doc_count == 0 {
                0.0
            } else {
                total_postings as f64 / doc_count as f64
            },
            on_disk_size: 0,
        };
        Ok(Self {
            postings,
            doc_table,
            scale,
            stats,
        })
    }

    pub fn stats(&self) -> IndexStats {
        self.stats
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn doc_count(&self) -> usize {
        self.doc_table.len()
    }

    pub fn postings(&self, term: u32) -> Option<&[Posting]> {
        self.postings
            .binary_search_by_key(&term, |&(t, _)| t)
            .ok()
            .map(|i| self.postings[i].1.as_slice())
    }

    pub fn external_id(&self, doc_id: u32) -> Option<&str> {
        self.doc_table.get(doc_id as usize).map(String::as_str)
    }

    /// Exact term-at-a-time scoring: the query is quantized at the index
    /// scale and score(d) = sum of q_impact * d_impact over matching terms.
    /// Results sorted by score descending, ties by ascending doc_id.
    pub fn search(&self, query: &SparseVector, top_k: usize) -> Vec<(String, u64)> {
        assert!(top_k >= 1, "top_k must be >= 1");
        let q = quantize(query, self.scale);
        let mut accumulators: HashMap<u32, u64> = HashMap::new();
        for &(term, q_impact) in q.entries() {
            if let Some(list) = self.postings(term) {
                for p in list {
                    *accumulators.entry(p.doc_id).or_insert(0) +=
                        q_impact as u64 * p.impact as u64;
                }
            }
        }
        let mut scored: Vec<(u32, u64)> = accumulators.into_iter().collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        scored
            .into_iter()
            .map(|(doc_id, score)| (self.doc_table[doc_id as usize].clone(), score))
            .collect()
    }
}

const INDEX_MAGIC: &[u8; 4] = b"SLIX";
const INDEX_VERSION: u32 = 1;

impl ImpactIndex {
    /// Little-endian format: magic, version, scale, doc table, per-term
    /// posting blocks with delta-encoded doc_ids, trailing CRC32.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.scale.to_le_bytes());
        buf.extend_from_slice(&(self.doc_table.len() as u32).to_le_bytes());
        for id in &self.doc_table {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        buf.extend_from_slice(&(self.postings.len() as u32).to_le_bytes());
        for (term, list) in &self.postings {
            buf.extend_from_slice(&term.to_le_bytes());
            buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
            let mut prev = 0u32;
            for (i, p) in list.iter().enumerate() {
                let delta = if i == 0 { p.doc_id } else { p.doc_id - prev };
                prev = p.doc_id;
                buf.extend_from_slice(&delta.to_le_bytes());
                buf.extend_from_slice(&p.impact.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(path, &buf)?;
        self.stats.on_disk_size = buf.len() as u64;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(Error::CorruptIndex("file too short".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(Error::CorruptIndex("checksum mismatch".into()));
        }
        let mut cursor = Cursor { body, offset: 0 };
        if cursor.take(4)? != INDEX_MAGIC {
            return Err(Error::CorruptIndex("bad magic".into()));
        }
        let version = cursor.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let scale = cursor.u32()?;
        let doc_count = cursor.u32()? as usize;
        let mut doc_table = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            let len = cursor.u32()? as usize;
            let raw = cursor.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| Error::CorruptIndex("doc id is not valid UTF-8".into()))?;
            doc_table.push(id.to_string());
        }
        let term_count = cursor.u32()? as usize;
        let mut postings = Vec::with_capacity(term_count);
        let mut total_postings = 0usize;
        for _ in 0..term_count {
            let term = cursor.u32()?;
            let len = cursor.u32()? as usize;
            let mut list = Vec::with_capacity(len);
            let mut doc_id = 0u32;
            for i in 0..len {
                let delta = cursor.u32()?;
                doc_id = if i == 0 { delta } else { doc_id + delta };
                let impact = cursor.u32()?;
                if impact == 0 {
                    return Err(Error::CorruptIndex("zero impact posting".into()));
                }
                list.push(Posting { doc_id, impact });
            }
            postings.push((term, list));
            total_postings += len;
        }
        if cursor.offset != body.len() {
            return Err(Error::CorruptIndex("trailing bytes".into()));
        }
        let stats = IndexStats {
            doc_count,
            total_postings,
            avg_nnz: if doc_count == 0 {
                0.0
            } else {
                total_postings as f64 / doc_count as f64
            },
            on_disk_size: bytes.len() as u64,
        };
        Ok(Self {
            postings,
            doc_table,
            scale,
            stats,
        })
    }
}

struct Cursor<'a> {
    body: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.body.len() {
            return Err(Error::CorruptIndex("truncated".into()));
        }
        let out = &self.body[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Exhaustive reference scorer used as the search oracle in tests.
pub fn brute_force_search(
    docs: &[(String, SparseVector)],
    query: &SparseVector,
    scale: u32,
    top_k: usize,
) -> Vec<(String, u64)> {
    let q = quantize(query, scale);
    let mut scored: Vec<(usize, u64)> = docs
        .iter()
        .enumerate()
        .map(|(i, (_, d))| {
            let dq = quantize(d, scale);
            let mut score = 0u64;
            for &(t, qi) in q.entries() {
                if let Ok(pos) = dq.entries().binary_search_by_key(&t, |&(t, _)| t) {
                    score += qi as u64 * dq.entries()[pos].1 as u64;
                }
            }
            (i, score)
        })
        .filter(|&(_, s)| s > 0)
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    scored
        .into_iter()
        .map(|(i, s)| (docs[i].0.clone(), s))
        .collect()
}
