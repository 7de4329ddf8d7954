//! MRR@10 / nDCG@10 and TREC run & qrels file IO.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Graded relevance judgments keyed by (query_id, doc_id).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<(String, String), u32>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.grades
            .insert((query_id.to_string(), doc_id.to_string()), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.grades
            .get(&(query_id.to_string(), doc_id.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn query_ids(&self) -> BTreeSet<&str> {
        self.grades.keys().map(|(q, _)| q.as_str()).collect()
    }

    pub fn grades_for(&self, query_id: &str) -> Vec<u32> {
        self.grades
            .iter()
            .filter(|((q, _), _)| q == query_id)
            .map(|(_, &g)| g)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }
}

/// One line of a TREC run file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

fn by_query(run: &[RunEntry]) -> BTreeMap<&str, Vec<&RunEntry>> {
    let mut map: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in run {
        map.entry(e.query_id.as_str()).or_default().push(e);
    }
    for entries in map.values_mut() {
        entries.sort_by_key(|e| e.rank);
    }
    map
}

/// Mean over all qrels queries of 1/rank of the first relevant document in
/// the top 10; queries missing from the run contribute 0.
pub fn mrr_at_10(run: &[RunEntry], qrels: &Qrels) -> f64 {
    let queries = qrels.query_ids();
    if queries.is_empty() {
        return 0.0;
    }
    let grouped = by_query(run);
    let mut total = 0.0;
    for q in &queries {
        if let Some(entries) = grouped.get(q) {
            for e in entries.iter().take(10) {
                if qrels.grade(q, &e.doc_id) >= 1 {
                    total += 1.0 / e.rank as f64;
                    break;
                }
            }
        }
    }
    total / queries.len() as f64
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i as f64 + 2.0).log2()))
        .sum()
}

/// DCG@10 with gain 2^grade - 1 and discount log2(rank + 1), normalized by
/// the ideal DCG; queries with zero ideal DCG are skipped from the mean.
pub fn ndcg_at_10(run: &[RunEntry], qrels: &Qrels) -> f64 {
    let grouped = by_query(run);
    let mut total = 0.0;
    let mut counted = 0usize;
    for q in qrels.query_ids() {
        let mut grades = qrels.grades_for(q);
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let ideal = dcg(grades.into_iter().take(10));
        if ideal <= 0.0 {
            continue;
        }
        counted += 1;
        if let Some(entries) = grouped.get(q) {
            let actual = dcg(entries.iter().take(10).map(|e| qrels.grade(q, &e.doc_id)));
            total += actual / ideal;
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Parse TREC qrels lines: `qid 0 docid grade`.
pub fn read_qrels<R: BufRead>(reader: R) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 4 fields in qrels line, got {}", fields.len()),
            });
        }
        let grade: u32 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("bad grade `{}`", fields[3]),
        })?;
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

/// Parse TREC run lines: `qid Q0 docid rank score tag`.
pub fn read_run<R: BufRead>(reader: R) -> Result<Vec<RunEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 6 fields in run line, got {}", fields.len()),
            });
        }
        let rank: u32 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("bad rank `{}`", fields[3]),
        })?;
        let score: f64 = fields[4].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("bad score `{}`", fields[4]),
        })?;
        if rank == 0 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "rank must be >= 1".into(),
            });
        }
        entries.push(RunEntry {
            query_id: fields[0].to_string(),
            doc_id: fields[2].to_string(),
            rank,
            score,
            tag: fields[5].to_string(),
        });
    }
    Ok(entries)
}

/// Write rank-sorted run entries in TREC format.
pub fn write_run<W: Write>(writer: &mut W, entries: &[RunEntry]) -> Result<()> {
    let mut sorted: Vec<&RunEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id).then(a.rank.cmp(&b.rank)));
    for e in sorted {
        writeln!(
            writer,
            "{} Q0 {} {} {} {}",
            e.query_id, e.doc_id, e.rank, e.score, e.tag
        )?;
    }
    Ok(())
}
