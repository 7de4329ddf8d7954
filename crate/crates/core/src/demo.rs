//! Seeded synthetic corpus so the whole pipeline runs with zero external
//! data: topical passages, train/eval queries, triples, and graded qrels.
//!
//! Query tokens are disjoint from passage tokens by construction, so an
//! untrained encoder has no lexical overlap to exploit; retrieval quality
//! comes from learned vocabulary expansion.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::train::TrainingTriple;
use crate::vector::Vocabulary;

pub const DEMO_VOCAB_SIZE: usize = 1000;
pub const DEMO_TOPICS: usize = 20;
pub const DEMO_PASSAGES_PER_TOPIC: usize = 5;

const QUERY_TOKENS_PER_TOPIC: usize = 3;
const CONTENT_TOKENS_PER_TOPIC: usize = 10;
const PASSAGE_CONTENT_DRAWS: usize = 8;
const PASSAGE_NOISE_DRAWS: usize = 10;
const TRIPLES_PER_TRAIN_QUERY: usize = 3;
const NEGATIVES_PER_TRIPLE: usize = 4;

#[derive(Debug, Clone)]
pub struct DemoCorpus {
    pub vocab: Vocabulary,
    pub passages: Vec<(String, TokenSequence)>,
    pub train_queries: Vec<(String, TokenSequence)>,
    pub eval_queries: Vec<(String, TokenSequence)>,
    pub triples: Vec<TrainingTriple>,
    /// Graded judgments for the eval queries.
    pub qrels: Qrels,
}

/// Deterministic generator: 20 topics, 5 passages each, one train and one
/// eval query per topic.
pub fn generate(seed: u64) -> DemoCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::synthetic(DEMO_VOCAB_SIZE);

    let reserved = DEMO_TOPICS * (QUERY_TOKENS_PER_TOPIC + CONTENT_TOKENS_PER_TOPIC);
    let noise_pool: Vec<u32> = (reserved as u32..DEMO_VOCAB_SIZE as u32).collect();
    let topic_tokens = |t: usize| {
        let base = (t * (QUERY_TOKENS_PER_TOPIC + CONTENT_TOKENS_PER_TOPIC)) as u32;
        let query: Vec<u32> = (base..base + QUERY_TOKENS_PER_TOPIC as u32).collect();
        let content: Vec<u32> = (base + QUERY_TOKENS_PER_TOPIC as u32
            ..base + (QUERY_TOKENS_PER_TOPIC + CONTENT_TOKENS_PER_TOPIC) as u32)
            .collect();
        (query, content)
    };

    let mut passages = Vec::new();
    for t in 0..DEMO_TOPICS {
        let (_, content) = topic_tokens(t);
        for i in 0..DEMO_PASSAGES_PER_TOPIC {
            let mut ids = Vec::with_capacity(PASSAGE_CONTENT_DRAWS + PASSAGE_NOISE_DRAWS);
            for _ in 0..PASSAGE_CONTENT_DRAWS {
                ids.push(content[rng.gen_range(0..content.len())]);
            }
            for _ in 0..PASSAGE_NOISE_DRAWS {
                ids.push(noise_pool[rng.gen_range(0..noise_pool.len())]);
            }
            ids.shuffle(&mut rng);
            passages.push((
                format!("p{t:02}_{i}"),
                TokenSequence::new(ids).expect("passage length in range"),
            ));
        }
    }

    let mut train_queries = Vec::new();
    let mut eval_queries = Vec::new();
    let mut qrels = Qrels::default();
    for t in 0..DEMO_TOPICS {
        let (query_tokens, _) = topic_tokens(t);
        train_queries.push((
            format!("tq{t:02}"),
            TokenSequence::new(query_tokens.clone()).unwrap(),
        ));
        // eval queries reuse two of the topic's three query tokens
        eval_queries.push((
            format!("eq{t:02}"),
            TokenSequence::new(vec![query_tokens[0], query_tokens[2]]).unwrap(),
        ));
        for i in 0..DEMO_PASSAGES_PER_TOPIC {
            let grade = if i == 0 { 2 } else { 1 };
            qrels.insert(&format!("eq{t:02}"), &format!("p{t:02}_{i}"), grade);
        }
    }

    let mut triples = Vec::new();
    for (t, (_, query)) in train_queries.iter().enumerate() {
        for r in 0..TRIPLES_PER_TRAIN_QUERY {
            let positive_idx = t * DEMO_PASSAGES_PER_TOPIC + (r % DEMO_PASSAGES_PER_TOPIC);
            let mut negatives = Vec::with_capacity(NEGATIVES_PER_TRIPLE);
            while negatives.len() < NEGATIVES_PER_TRIPLE {
                let idx = rng.gen_range(0..passages.len());
                if idx / DEMO_PASSAGES_PER_TOPIC != t {
                    negatives.push(passages[idx].1.clone());
                }
            }
            triples.push(TrainingTriple {
                query: query.clone(),
                positive: passages[positive_idx].1.clone(),
                negatives,
            });
        }
    }

    DemoCorpus {
        vocab,
        passages,
        train_queries,
        eval_queries,
        triples,
        qrels,
    }
}

/// Token-sequence JSONL: `{"id": "...", "tokens": [ids]}`.
#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    tokens: Vec<u32>,
}

pub fn write_corpus<W: Write>(writer: &mut W, docs: &[(String, TokenSequence)]) -> Result<()> {
    for (id, seq) in docs {
        let line = CorpusLine {
            id: id.clone(),
            tokens: seq.ids().to_vec(),
        };
        writeln!(writer, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<(String, TokenSequence)>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let seq = TokenSequence::new(raw.tokens).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push((raw.id, seq));
    }
    Ok(out)
}

pub fn write_qrels<W: Write>(writer: &mut W, rows: &[(String, String, u32)]) -> Result<()> {
    for (qid, docid, grade) in rows {
        writeln!(writer, "{qid} 0 {docid} {grade}")?;
    }
    Ok(())
}

impl DemoCorpus {
    /// Qrels as `(query_id, doc_id, grade)` rows in deterministic order.
    pub fn qrel_rows(&self) -> Vec<(String, String, u32)> {
        let mut rows = Vec::new();
        for t in 0..DEMO_TOPICS {
            for i in 0..DEMO_PASSAGES_PER_TOPIC {
                let qid = format!("eq{t:02}");
                let docid = format!("p{t:02}_{i}");
                let grade = self.qrels.grade(&qid, &docid);
                rows.push((qid, docid, grade));
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(42);
        let b = generate(42);
        assert_eq!(a.passages, b.passages);
        assert_eq!(a.triples, b.triples);
        assert_eq!(a.qrels, b.qrels);
    }

    #[test]
    fn expected_shape() {
        let c = generate(1);
        assert_eq!(c.passages.len(), 100);
        assert_eq!(c.train_queries.len(), 20);
        assert_eq!(c.eval_queries.len(), 20);
        assert_eq!(c.triples.len(), 60);
        assert_eq!(c.qrels.len(), 100);
        assert_eq!(c.vocab.size(), DEMO_VOCAB_SIZE);
    }

    #[test]
    fn queries_share_no_tokens_with_passages() {
        let c = generate(2);
        let passage_tokens: std::collections::HashSet<u32> = c
            .passages
            .iter()
            .flat_map(|(_, s)| s.ids().iter().copied())
            .collect();
        for (_, q) in c.train_queries.iter().chain(&c.eval_queries) {
            for t in q.ids() {
                assert!(!passage_tokens.contains(t));
            }
        }
    }

    #[test]
    fn negatives_come_from_other_topics() {
        let c = generate(3);
        for (i, triple) in c.triples.iter().enumerate() {
            let topic = i / TRIPLES_PER_TRAIN_QUERY;
            let positive_topic_tokens: std::collections::HashSet<u32> = c.passages
                [topic * DEMO_PASSAGES_PER_TOPIC..(topic + 1) * DEMO_PASSAGES_PER_TOPIC]
                .iter()
                .flat_map(|(_, s)| s.ids().iter().copied())
                .filter(|&t| (t as usize) < DEMO_TOPICS * 13)
                .collect();
            for n in &triple.negatives {
                assert!(n
                    .ids()
                    .iter()
                    .all(|t| (*t as usize) >= DEMO_TOPICS * 13
                        || !positive_topic_tokens.contains(t)));
            }
        }
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let c = generate(4);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c.passages).unwrap();
        assert_eq!(read_corpus(&buf[..]).unwrap(), c.passages);
    }
}
