//! Mini-batch training loop: encode triples, build masked/unmasked
//! similarity rows with in-batch negatives, backpropagate the combined
//! loss, and apply SGD or AdamW updates with optional frozen groups.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_backward, encode_with_cache, EncodeCache, EncoderParams, ParamGrads, ParamGroup,
    TokenSequence, ALL_GROUPS,
};
use crate::error::{Error, Result};
use crate::loss::{loss_gradients, LossBreakdown, SimilarityRow};
use crate::sparsify::{top_k_mask, DecaySchedule};
use crate::vector::{inner_product, SparseVector};

/// One training unit: query, labeled positive, precomputed negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub query: TokenSequence,
    pub positive: TokenSequence,
    pub negatives: Vec<TokenSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    Off,
    PostProcess,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze_projection: bool,
    #[serde(default)]
    pub freeze_projection_bias: bool,
    pub masking: MaskingMode,
    #[serde(default)]
    pub schedule: Option<DecaySchedule>,
    #[serde(default)]
    pub lambda_kl: f64,
    #[serde(default)]
    pub stop_gradient_unmasked: bool,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be finite and >= 0".into()));
        }
        if self.lambda_kl < 0.0 {
            return Err(Error::InvalidArgument("lambda_kl must be >= 0".into()));
        }
        match self.masking {
            MaskingMode::Joint => {
                let schedule = self.schedule.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("joint masking requires a schedule".into())
                })?;
                schedule.validate()?;
            }
            MaskingMode::Off | MaskingMode::PostProcess => {
                if self.lambda_kl > 0.0 {
                    return Err(Error::InvalidArgument(
                        "lambda_kl > 0 requires joint masking".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-step loss history row; `k_effective` is 0 when no mask was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub rank_loss: f64,
    pub kl_loss: f64,
    pub combined: f64,
    pub k_effective: u32,
}

/// AdamW moment buffers; empty until the first AdamW step.
#[derive(Default)]
pub struct OptimizerState {
    t: u64,
    moments: Option<(ParamGrads, ParamGrads)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Masked and unmasked encodings of one triple, as fed to the rows builder.
#[derive(Debug, Clone)]
pub struct EncodedTriple {
    /// (masked, unmasked) query vectors.
    pub query: (SparseVector, SparseVector),
    pub positive: (SparseVector, SparseVector),
    pub negatives: Vec<(SparseVector, SparseVector)>,
}

/// Candidate order for row `i`: own positive, own explicit negatives,
/// then the other rows' positives in index order.
fn candidate_slots(batch: &[EncodedTriple], i: usize) -> Vec<(usize, Slot)> {
    let mut slots = vec![(i, Slot::Positive)];
    for n in 0..batch[i].negatives.len() {
        slots.push((i, Slot::Negative(n)));
    }
    for j in 0..batch.len() {
        if j != i {
            slots.push((j, Slot::Positive));
        }
    }
    slots
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Positive,
    Negative(usize),
}

fn slot_vectors(batch: &[EncodedTriple], slot: (usize, Slot)) -> (&SparseVector, &SparseVector) {
    let triple = &batch[slot.0];
    match slot.1 {
        Slot::Positive => (&triple.positive.0, &triple.positive.1),
        Slot::Negative(n) => (&triple.negatives[n].0, &triple.negatives[n].1),
    }
}

/// Build (masked, unmasked) similarity rows with identical candidate order.
pub fn build_inbatch_rows(
    batch: &[EncodedTriple],
) -> Result<Vec<(SimilarityRow, SimilarityRow)>> {
    let mut rows = Vec::with_capacity(batch.len());
    for (i, triple) in batch.iter().enumerate() {
        let slots = candidate_slots(batch, i);
        let mut masked_scores = Vec::with_capacity(slots.len());
        let mut unmasked_scores = Vec::with_capacity(slots.len());
        for &slot in &slots {
            let (dm, du) = slot_vectors(batch, slot);
            masked_scores.push(inner_product(&triple.query.0, dm));
            unmasked_scores.push(inner_product(&triple.query.1, du));
        }
        let masked = SimilarityRow::new(masked_scores[0], masked_scores[1..].to_vec())?;
        let unmasked = SimilarityRow::new(unmasked_scores[0], unmasked_scores[1..].to_vec())?;
        rows.push((masked, unmasked));
    }
    Ok(rows)
}

/// One encoded sequence plus its gradient accumulator over the full support.
struct Encoded {
    vector: SparseVector,
    masked: SparseVector,
    cache: EncodeCache,
    grad: Vec<f64>,
}

impl Encoded {
    fn new(params: &EncoderParams, seq: &TokenSequence, mask_k: Option<u32>) -> Result<Self> {
        let (vector, cache) = encode_with_cache(params, seq)?;
        let masked = match mask_k {
            Some(k) => top_k_mask(&vector, k)?,
            None => vector.clone(),
        };
        let grad = vec![0.0; vector.nnz()];
        Ok(Self {
            vector,
            masked,
            cache,
            grad,
        })
    }

    fn add_grad(&mut self, term: u32, value: f64) {
        if let Ok(idx) = self
            .vector
            .entries()
            .binary_search_by_key(&term, |&(t, _)| t)
        {
            self.grad[idx] += value;
        }
    }
}

/// d(inner_product)/d(weights) for both sides; `masked` selects which pair
/// of vectors produced the score. Masked gradients flow straight through
/// to the retained entries of the full encoding.
fn accumulate_score_grad(items: &mut [Encoded], qi: usize, di: usize, masked: bool, g: f64) {
    if g == 0.0 {
        return;
    }
    let (qv, dv) = if masked {
        (items[qi].masked.clone(), items[di].masked.clone())
    } else {
        (items[qi].vector.clone(), items[di].vector.clone())
    };
    for &(t, w) in dv.entries() {
        let qw = qv.weight(t);
        if qw != 0.0 {
            items[qi].add_grad(t, g * w);
            items[di].add_grad(t, g * qw);
        }
    }
}

fn is_frozen(group: ParamGroup, config: &TrainConfig) -> bool {
    match group {
        ParamGroup::Projection => config.freeze_projection,
        ParamGroup::ProjectionBias => config.freeze_projection_bias,
        _ => false,
    }
}

fn apply_update(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    config: &TrainConfig,
    state: &mut OptimizerState,
) {
    match config.optimizer {
        Optimizer::Sgd => {
            for g in ALL_GROUPS {
                if is_frozen(g, config) {
                    continue;
                }
                for (p, &grad) in params.group_mut(g).iter_mut().zip(grads.group(g)) {
                    *p -= config.learning_rate * grad;
                }
            }
        }
        Optimizer::Adamw => {
            const BETA1: f64 = 0.9;
            const BETA2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            const WEIGHT_DECAY: f64 = 0.01;
            state.t += 1;
            if state.moments.is_none() {
                state.moments = Some((ParamGrads::zeros_like(params), ParamGrads::zeros_like(params)));
            }
            let (m, v) = state.moments.as_mut().unwrap();
            let bc1 = 1.0 - BETA1.powi(state.t as i32);
            let bc2 = 1.0 - BETA2.powi(state.t as i32);
            for g in ALL_GROUPS {
                if is_frozen(g, config) {
                    continue;
                }
                let ps = params.group_mut(g);
                let gs = grads.group(g);
                let ms = m.group_mut(g);
                let vs = v.group_mut(g);
                for i in 0..ps.len() {
                    ms[i] = BETA1 * ms[i] + (1.0 - BETA1) * gs[i];
                    vs[i] = BETA2 * vs[i] + (1.0 - BETA2) * gs[i] * gs[i];
                    let m_hat = ms[i] / bc1;
                    let v_hat = vs[i] / bc2;
                    ps[i] -= config.learning_rate
                        * (m_hat / (v_hat.sqrt() + EPS) + WEIGHT_DECAY * ps[i]);
                }
            }
        }
    }
}

/// Encode a batch, compute the combined loss over in-batch rows, and apply
/// one optimizer update. Returns the batch-mean loss breakdown and the mask
/// k used (None when masking is off or post-process).
pub fn train_step(
    params: &mut EncoderParams,
    batch: &[TrainingTriple],
    config: &TrainConfig,
    step: u64,
    state: &mut OptimizerState,
) -> Result<(LossBreakdown, Option<u32>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mask_k = match config.masking {
        MaskingMode::Joint => Some(
            config
                .schedule
                .as_ref()
                .expect("validated config")
                .scheduled_k(step, params.vocab_size),
        ),
        MaskingMode::Off | MaskingMode::PostProcess => None,
    };

    // encode everything once; items laid out triple by triple
    let mut items: Vec<Encoded> = Vec::new();
    let mut layout: Vec<(usize, usize, Vec<usize>)> = Vec::new(); // (q, pos, negs)
    for triple in batch {
        let q = items.len();
        items.push(Encoded::new(params, &triple.query, mask_k)?);
        let p = items.len();
        items.push(Encoded::new(params, &triple.positive, mask_k)?);
        let mut negs = Vec::with_capacity(triple.negatives.len());
        for n in &triple.negatives {
            negs.push(items.len());
            items.push(Encoded::new(params, n, mask_k)?);
        }
        layout.push((q, p, negs));
    }

    let encoded_batch: Vec<EncodedTriple> = layout
        .iter()
        .map(|&(q, p, ref negs)| EncodedTriple {
            query: (items[q].masked.clone(), items[q].vector.clone()),
            positive: (items[p].masked.clone(), items[p].vector.clone()),
            negatives: negs
                .iter()
                .map(|&n| (items[n].masked.clone(), items[n].vector.clone()))
                .collect(),
        })
        .collect();
    let rows = build_inbatch_rows(&encoded_batch)?;

    let b = batch.len() as f64;
    let mut total = LossBreakdown {
        lambda_kl: config.lambda_kl,
        ..Default::default()
    };
    for (i, (masked_row, unmasked_row)) in rows.iter().enumerate() {
        let breakdown = crate::loss::combined_loss(masked_row, unmasked_row, config.lambda_kl)?;
        total.rank_loss += breakdown.rank_loss / b;
        total.kl_loss += breakdown.kl_loss / b;
        total.combined += breakdown.combined / b;

        let grads = loss_gradients(
            masked_row,
            unmasked_row,
            config.lambda_kl,
            config.stop_gradient_unmasked,
        )?;
        let (q, _, _) = layout[i];
        let slots = candidate_slots(&encoded_batch, i);
        for (c, &(j, slot)) in slots.iter().enumerate() {
            let d = match slot {
                Slot::Positive => layout[j].1,
                Slot::Negative(n) => layout[j].2[n],
            };
            accumulate_score_grad(&mut items, q, d, true, grads.masked[c] / b);
            accumulate_score_grad(&mut items, q, d, false, grads.unmasked[c] / b);
        }
    }
    if !total.combined.is_finite() {
        return Err(Error::TrainingDiverged { step });
    }

    let mut param_grads = ParamGrads::zeros_like(params);
    for item in &items {
        let output_grads: Vec<(u32, f64)> = item
            .vector
            .entries()
            .iter()
            .zip(&item.grad)
            .filter(|(_, &g)| g != 0.0)
            .map(|(&(t, _), &g)| (t, g))
            .collect();
        if !output_grads.is_empty() {
            encode_backward(params, &item.cache, &output_grads, &mut param_grads);
        }
    }
    apply_update(params, &param_grads, config, state);
    Ok((total, mask_k))
}

/// Full training run: seeded shuffle each epoch, global step counter,
/// per-step loss history.
pub fn train(
    params: &mut EncoderParams,
    dataset: &[TrainingTriple],
    config: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new();
    let mut history = Vec::new();
    let mut step = 0u64;
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainingTriple> =
                chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (breakdown, mask_k) = train_step(params, &batch, config, step, &mut state)?;
            history.push(StepRecord {
                step,
                rank_loss: breakdown.rank_loss,
                kl_loss: breakdown.kl_loss,
                combined: breakdown.combined,
                k_effective: mask_k.unwrap_or(0),
            });
            step += 1;
        }
    }
    Ok(history)
}

/// Triples JSONL: `{"query": [ids], "positive": [ids], "negatives": [[ids], ...]}`.
#[derive(Serialize, Deserialize)]
struct TripleLine {
    query: Vec<u32>,
    positive: Vec<u32>,
    negatives: Vec<Vec<u32>>,
}

pub fn read_triples<R: BufRead>(reader: R) -> Result<Vec<TrainingTriple>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TripleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let to_seq = |ids: Vec<u32>| {
            TokenSequence::new(ids).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })
        };
        out.push(TrainingTriple {
            query: to_seq(raw.query)?,
            positive: to_seq(raw.positive)?,
            negatives: raw
                .negatives
                .into_iter()
                .map(to_seq)
                .collect::<Result<Vec<_>>>()?,
        });
    }
    Ok(out)
}

pub fn write_triples<W: Write>(writer: &mut W, triples: &[TrainingTriple]) -> Result<()> {
    for t in triples {
        let line = TripleLine {
            query: t.query.ids().to_vec(),
            positive: t.positive.ids().to_vec(),
            negatives: t.negatives.iter().map(|n| n.ids().to_vec()).collect(),
        };
        writeln!(writer, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// Loss history CSV: `step,rank_loss,kl_loss,combined,k_effective`.
pub fn write_history<W: Write>(writer: &mut W, history: &[StepRecord]) -> Result<()> {
    writeln!(writer, "step,rank_loss,kl_loss,combined,k_effective")?;
    for r in history {
        writeln!(
            writer,
            "{},{},{},{},{}",
            r.step, r.rank_loss, r.kl_loss, r.combined, r.k_effective
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    fn toy_dataset() -> Vec<TrainingTriple> {
        vec![
            TrainingTriple {
                query: seq(&[1, 2]),
                positive: seq(&[1, 2, 3, 4]),
                negatives: vec![seq(&[10, 11, 12]), seq(&[15, 16])],
            },
            TrainingTriple {
                query: seq(&[5, 6]),
                positive: seq(&[5, 6, 7, 8]),
                negatives: vec![seq(&[20, 21])],
            },
            TrainingTriple {
                query: seq(&[10, 11]),
                positive: seq(&[10, 11, 12, 13]),
                negatives: vec![seq(&[1, 2, 3])],
            },
        ]
    }

    fn sgd_config() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            learning_rate: 0.05,
            epochs: 1,
            seed: 42,
            freeze_projection: false,
            freeze_projection_bias: false,
            masking: MaskingMode::Off,
            schedule: None,
            lambda_kl: 0.0,
            stop_gradient_unmasked: false,
            optimizer: Optimizer::Sgd,
        }
    }

    fn joint_config() -> TrainConfig {
        TrainConfig {
            masking: MaskingMode::Joint,
            schedule: Some(DecaySchedule::Constant { k: 8 }),
            lambda_kl: 1.0,
            ..sgd_config()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = sgd_config();
        c.lambda_kl = 1.0;
        assert!(c.validate().is_err()); // kl without joint masking
        let mut c = sgd_config();
        c.masking = MaskingMode::Joint;
        assert!(c.validate().is_err()); // joint without schedule
        assert!(joint_config().validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut params = EncoderParams::init(30, 8, 1).unwrap();
        let before = params.clone();
        let mut config = sgd_config();
        config.learning_rate = 0.0;
        let mut state = OptimizerState::new();
        let (loss, _) = train_step(&mut params, &toy_dataset(), &config, 0, &mut state).unwrap();
        assert!(loss.combined.is_finite());
        assert_eq!(params, before);
    }

    #[test]
    fn frozen_projection_is_bit_identical_after_training() {
        let mut params = EncoderParams::init(30, 8, 2).unwrap();
        let mut config = sgd_config();
        config.freeze_projection = true;
        config.freeze_projection_bias = true;
        config.epochs = 3;
        let proj_before = params.projection.clone();
        let bias_before = params.projection_bias.clone();
        let emb_before = params.embedding.clone();
        train(&mut params, &toy_dataset(), &config).unwrap();
        assert_eq!(params.projection, proj_before);
        assert_eq!(params.projection_bias, bias_before);
        assert_ne!(params.embedding, emb_before);
    }

    #[test]
    fn repeated_sgd_steps_reduce_loss_on_fixed_batch() {
        let mut params = EncoderParams::init(30, 8, 3).unwrap();
        let config = sgd_config();
        let batch = toy_dataset();
        let mut state = OptimizerState::new();
        let (first, _) = train_step(&mut params, &batch, &config, 0, &mut state).unwrap();
        let mut last = first;
        for step in 1..200 {
            let (l, _) = train_step(&mut params, &batch, &config, step, &mut state).unwrap();
            last = l;
        }
        assert!(
            last.combined < first.combined,
            "loss did not improve: {} -> {}",
            first.combined,
            last.combined
        );
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut params = EncoderParams::init(30, 8, 4).unwrap();
        let before = params.clone();
        let mut config = sgd_config();
        config.epochs = 0;
        let history = train(&mut params, &toy_dataset(), &config).unwrap();
        assert!(history.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn joint_and_post_process_masking_train_differently() {
        let dataset = toy_dataset();
        let mut joint_params = EncoderParams::init(30, 8, 5).unwrap();
        let mut post_params = joint_params.clone();
        let mut joint = joint_config();
        joint.lambda_kl = 0.0;
        joint.epochs = 2;
        let mut post = sgd_config();
        post.masking = MaskingMode::PostProcess;
        post.epochs = 2;
        train(&mut joint_params, &dataset, &joint).unwrap();
        train(&mut post_params, &dataset, &post).unwrap();
        assert_ne!(joint_params, post_params);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dataset = toy_dataset();
        let mut config = joint_config();
        config.epochs = 2;
        config.batch_size = 2;
        let run = |seed: u64| {
            let mut params = EncoderParams::init(30, 8, seed).unwrap();
            let history = train(&mut params, &dataset, &config).unwrap();
            (params, history)
        };
        let (p1, h1) = run(6);
        let (p2, h2) = run(6);
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn adamw_updates_and_respects_freeze() {
        let mut params = EncoderParams::init(30, 8, 7).unwrap();
        let mut config = sgd_config();
        config.optimizer = Optimizer::Adamw;
        config.learning_rate = 1e-3;
        config.freeze_projection = true;
        let proj_before = params.projection.clone();
        let emb_before = params.embedding.clone();
        train(&mut params, &toy_dataset(), &config).unwrap();
        assert_eq!(params.projection, proj_before);
        assert_ne!(params.embedding, emb_before);
    }

    #[test]
    fn inbatch_row_arity() {
        let params = EncoderParams::init(30, 8, 8).unwrap();
        let encode_pair = |ids: &[u32]| {
            let v = crate::encoder::encode(&params, &seq(ids)).unwrap();
            (v.clone(), v)
        };
        // B=1 with two explicit negatives -> arity 3
        let single = vec![EncodedTriple {
            query: encode_pair(&[1, 2]),
            positive: encode_pair(&[3, 4]),
            negatives: vec![encode_pair(&[5]), encode_pair(&[6])],
        }];
        let rows = build_inbatch_rows(&single).unwrap();
        assert_eq!(rows[0].0.arity(), 3);

        // B=3 with no explicit negatives -> each row arity 3
        let batch: Vec<EncodedTriple> = (0..3)
            .map(|i| EncodedTriple {
                query: encode_pair(&[i + 1, i + 2]),
                positive: encode_pair(&[i + 10]),
                negatives: vec![],
            })
            .collect();
        let rows = build_inbatch_rows(&batch).unwrap();
        for (m, u) in &rows {
            assert_eq!(m.arity(), 3);
            assert_eq!(u.arity(), 3);
            assert_eq!(m.arity(), u.arity());
        }
    }

    #[test]
    fn single_triple_without_negatives_is_an_error() {
        let params = EncoderParams::init(30, 8, 9).unwrap();
        let v = crate::encoder::encode(&params, &seq(&[1])).unwrap();
        let batch = vec![EncodedTriple {
            query: (v.clone(), v.clone()),
            positive: (v.clone(), v.clone()),
            negatives: vec![],
        }];
        assert!(build_inbatch_rows(&batch).is_err());
    }

    #[test]
    fn triples_jsonl_round_trip() {
        let triples = toy_dataset();
        let mut buf = Vec::new();
        write_triples(&mut buf, &triples).unwrap();
        assert_eq!(read_triples(&buf[..]).unwrap(), triples);
    }

    #[test]
    fn history_csv_header_and_rows() {
        let history = vec![StepRecord {
            step: 0,
            rank_loss: 1.5,
            kl_loss: 0.25,
            combined: 1.75,
            k_effective: 305,
        }];
        let mut buf = Vec::new();
        write_history(&mut buf, &history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,rank_loss,kl_loss,combined,k_effective\n"));
        assert!(text.contains("0,1.5,0.25,1.75,305"));
    }
}
