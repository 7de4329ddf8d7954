//! Top-k masking and the exponential-decay k scheduler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::SparseVector;

/// Policy for choosing k over training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecaySchedule {
    Constant {
        k: u32,
    },
    Exponential {
        r_decay: f64,
        steps_per_epoch: u32,
        #[serde(default = "default_k_min")]
        k_min: u32,
    },
}

fn default_k_min() -> u32 {
    1
}

impl DecaySchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecaySchedule::Constant { k } => {
                if k == 0 {
                    return Err(Error::InvalidArgument("constant k must be >= 1".into()));
                }
            }
            DecaySchedule::Exponential {
                r_decay,
                steps_per_epoch,
                k_min,
            } => {
                if !(0.0 < r_decay && r_decay < 1.0) {
                    return Err(Error::InvalidArgument("r_decay must be in (0,1)".into()));
                }
                if steps_per_epoch == 0 {
                    return Err(Error::InvalidArgument("steps_per_epoch must be >= 1".into()));
                }
                if k_min == 0 {
                    return Err(Error::InvalidArgument("k_min must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Effective k at a global step. Exponential mode decays continuously:
    /// max(k_min, floor(|V| * (1 - r_decay)^(step / steps_per_epoch))).
    pub fn scheduled_k(&self, step: u64, vocab_size: usize) -> u32 {
        match *self {
            DecaySchedule::Constant { k } => k,
            DecaySchedule::Exponential {
                r_decay,
                steps_per_epoch,
                k_min,
            } => {
                let epochs = step as f64 / steps_per_epoch as f64;
                let k = (vocab_size as f64 * (1.0 - r_decay).powf(epochs)).floor();
                (k as u32).max(k_min)
            }
        }
    }
}

/// Keep the k largest weights, ties broken toward the smallest term_id;
/// retained weights are unchanged.
pub fn top_k_mask(v: &SparseVector, k: u32) -> Result<SparseVector> {
    if k == 0 {
        return Err(Error::InvalidArgument("top_k_mask requires k >= 1".into()));
    }
    let k = k as usize;
    if v.nnz() <= k {
        return Ok(v.clone());
    }
    let mut ranked: Vec<(u32, f64)> = v.entries().to_vec();
    // weight descending, then term_id ascending
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked.sort_by_key(|&(t, _)| t);
    SparseVector::from_entries(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(pairs: &[(u32, f64)]) -> SparseVector {
        SparseVector::from_entries(pairs.to_vec()).unwrap()
    }

    #[test]
    fn keeps_two_largest() {
        let v = sv(&[(0, 0.5), (2, 3.0), (7, 1.0)]);
        assert_eq!(top_k_mask(&v, 2).unwrap(), sv(&[(2, 3.0), (7, 1.0)]));
    }

    #[test]
    fn identity_when_k_exceeds_nnz() {
        let v = sv(&[(1, 2.0)]);
        assert_eq!(top_k_mask(&v, 5).unwrap(), v);
    }

    #[test]
    fn tie_breaks_toward_smallest_term_id() {
        let v = sv(&[(0, 3.0), (4, 3.0), (9, 1.0)]);
        assert_eq!(top_k_mask(&v, 1).unwrap(), sv(&[(0, 3.0)]));
    }

    #[test]
    fn k_zero_is_invalid() {
        assert!(top_k_mask(&sv(&[(1, 1.0)]), 0).is_err());
    }

    #[test]
    fn schedule_step_zero_is_vocab_size() {
        let s = DecaySchedule::Exponential {
            r_decay: 0.2,
            steps_per_epoch: 10,
            k_min: 1,
        };
        assert_eq!(s.scheduled_k(0, 30522), 30522);
    }

    #[test]
    fn schedule_one_epoch_value() {
        let s = DecaySchedule::Exponential {
            r_decay: 0.2,
            steps_per_epoch: 10,
            k_min: 1,
        };
        // floor(30522 * 0.8) = 24417
        assert_eq!(s.scheduled_k(10, 30522), 24417);
    }

    #[test]
    fn constant_schedule() {
        let s = DecaySchedule::Constant { k: 305 };
        for step in [0u64, 1, 100, 10_000] {
            assert_eq!(s.scheduled_k(step, 30522), 305);
        }
    }

    #[test]
    fn schedule_hits_k_min_floor() {
        let s = DecaySchedule::Exponential {
            r_decay: 0.5,
            steps_per_epoch: 1,
            k_min: 7,
        };
        assert_eq!(s.scheduled_k(1000, 1000), 7);
    }

    fn arb_sparse() -> impl Strategy<Value = SparseVector> {
        proptest::collection::btree_map(0u32..300, 0.001f64..10.0, 0..60)
            .prop_map(|m| SparseVector::from_entries(m.into_iter().collect()).unwrap())
    }

    proptest! {
        #[test]
        fn mask_laws(v in arb_sparse(), k in 1u32..80) {
            let masked = top_k_mask(&v, k).unwrap();
            prop_assert_eq!(masked.nnz(), (k as usize).min(v.nnz()));
            // retained entries appear verbatim
            for &(t, w) in masked.entries() {
                prop_assert_eq!(v.weight(t), w);
            }
            // min retained >= max discarded
            let min_retained = masked.entries().iter().map(|&(_, w)| w).fold(f64::INFINITY, f64::min);
            let max_discarded = v.entries().iter()
                .filter(|&&(t, _)| masked.weight(t) == 0.0)
                .map(|&(_, w)| w)
                .fold(f64::NEG_INFINITY, f64::max);
            if masked.nnz() < v.nnz() {
                prop_assert!(min_retained >= max_discarded);
            }
            // idempotence
            prop_assert_eq!(top_k_mask(&masked, k).unwrap(), masked);
        }

        #[test]
        fn masked_inner_product_never_exceeds_unmasked(
            a in arb_sparse(), b in arb_sparse(), k in 1u32..80
        ) {
            let ma = top_k_mask(&a, k).unwrap();
            let mb = top_k_mask(&b, k).unwrap();
            prop_assert!(
                crate::vector::inner_product(&ma, &mb)
                    <= crate::vector::inner_product(&a, &b) + 1e-12
            );
        }

        #[test]
        fn exponential_schedule_monotone(r in 0.01f64..0.9, spe in 1u32..50, steps in 1u64..500) {
            let s = DecaySchedule::Exponential { r_decay: r, steps_per_epoch: spe, k_min: 1 };
            let mut prev = s.scheduled_k(0, 30522);
            for step in 1..=steps {
                let k = s.scheduled_k(step, 30522);
                prop_assert!(k <= prev);
                prop_assert!(k >= 1);
                prev = k;
            }
        }
    }
}
