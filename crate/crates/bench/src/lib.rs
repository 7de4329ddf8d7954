//! Shared fixtures for the benchmark suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparselex::SparseVector;

pub fn random_vector(rng: &mut ChaCha8Rng, vocab: u32, nnz: usize) -> SparseVector {
    let mut entries: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    while entries.len() < nnz {
        entries.insert(rng.gen_range(0..vocab), rng.gen_range(1e-3..10.0));
    }
    SparseVector::from_entries(entries.into_iter().collect()).unwrap()
}

pub fn random_corpus(seed: u64, docs: usize, vocab: u32, nnz: usize) -> Vec<(String, SparseVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|i| (format!("d{i}"), random_vector(&mut rng, vocab, nnz)))
        .collect()
}
