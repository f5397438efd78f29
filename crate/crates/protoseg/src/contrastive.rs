//! Dual contrastive training machinery: a fixed-capacity FIFO prototype
//! dictionary spanning past episodes, the InfoNCE loss over cosine logits
//! (positive term in the denominator), and the class-specific /
//! class-agnostic step builders that pair an online-branch anchor with
//! detached momentum-branch targets.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugConfig};
use crate::encoder::{encode_plain, EncoderParams};
use crate::graph::{Graph, Var};
use crate::prototype::{masked_average_pool, sample_negative_keys};
use crate::tensor::{Mask, Tensor};
use crate::{Error, Result};

/// Sentinel label for freshly initialized dictionary entries; it matches no
/// real class, so every class treats them as negatives.
pub const SENTINEL_LABEL: i32 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictEntry {
    pub vector: Vec<f64>,
    pub label: i32,
}

/// Fixed-capacity FIFO queue of (prototype, label) pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrototypeDictionary {
    entries: VecDeque<DictEntry>,
    capacity: usize,
    pushes: u64,
}

impl PrototypeDictionary {
    /// Fill to capacity with unit-normalized random vectors carrying the
    /// sentinel label.
    pub fn init(capacity: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("dictionary capacity must be positive".into()));
        }
        let mut entries = VecDeque::with_capacity(capacity);
        for _ in 0..capacity {
            let mut v: Vec<f64> =
                (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            entries.push_back(DictEntry { vector: v, label: SENTINEL_LABEL });
        }
        Ok(PrototypeDictionary { entries, capacity, pushes: 0 })
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

    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn entries(&self) -> impl Iterator<Item = &DictEntry> {
        self.entries.iter()
    }

    /// Append a (unit-normalized) prototype; the oldest entry is dequeued
    /// once the queue is full.
    pub fn push(&mut self, mut vector: Vec<f64>, label: u16) -> Result<()> {
        if let Some(front) = self.entries.front() {
            if front.vector.len() != vector.len() {
                return Err(Error::Shape(format!(
                    "dictionary holds dim {}, got {}",
                    front.vector.len(),
                    vector.len()
                )));
            }
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            vector.iter_mut().for_each(|x| *x /= norm);
        }
        self.entries.push_back(DictEntry { vector, label: i32::from(label) });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        self.pushes += 1;
        Ok(())
    }

    /// Up to `max_count` entries whose label differs from `target`, sampled
    /// uniformly without replacement (all of them when fewer exist).
    pub fn select_negatives(
        &self,
        target: u16,
        max_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<f64>> {
        let eligible: Vec<&DictEntry> = self
            .entries
            .iter()
            .filter(|e| e.label != i32::from(target))
            .collect();
        if eligible.len() <= max_count {
            return eligible.into_iter().map(|e| e.vector.clone()).collect();
        }
        rand::seq::index::sample(rng, eligible.len(), max_count)
            .iter()
            .map(|i| eligible[i].vector.clone())
            .collect()
    }
}

/// InfoNCE over cosine logits: the positive sits at index 0 and appears in
/// the denominator; gradients flow only through the anchor.
pub fn info_nce_traced(
    g: &Graph,
    anchor: Var,
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Data("info_nce needs at least one negative".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let d = g.shape_of(anchor)[0];
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::Shape("info_nce dimension mismatch".into()));
    }
    let mut bank = Vec::with_capacity((1 + negatives.len()) * d);
    bank.extend_from_slice(positive);
    for n in negatives {
        bank.extend_from_slice(n);
    }
    let bank = Tensor::from_vec(&[1 + negatives.len(), d], bank);
    let logits = g.scale(g.cosine_bank(anchor, bank), 1.0 / temperature);
    Ok(g.cross_entropy_logits(logits, 0))
}

/// Plain-value InfoNCE (used by tests, the Python bindings and callers that
/// do not need gradients).
pub fn info_nce(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    let g = Graph::new();
    let a = g.constant(Tensor::from_vec(&[anchor.len()], anchor.to_vec()));
    let loss = info_nce_traced(&g, a, positive, negatives, temperature)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    /// The augmented mask had no foreground at feature resolution.
    DegenerateMask,
    /// Fewer eligible pixels than the pooling group size.
    TooFewPixels,
    /// Every dictionary entry carried the target label.
    NoNegatives,
}

/// Settings shared by both contrastive steps.
#[derive(Clone, Debug)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    /// Max negatives drawn from the dictionary (class-specific loss).
    pub cs_negatives: usize,
    /// Negative keys sampled from the query (class-agnostic loss).
    pub ca_negatives: usize,
    /// Pixels pooled per negative key.
    pub group_size: usize,
    pub aug: AugConfig,
}

pub struct CsclStep {
    pub loss: Option<Var>,
    pub skip: Option<SkipReason>,
    /// Detached momentum-branch prototype to enqueue after the step commits.
    pub pending_push: Option<(Vec<f64>, u16)>,
}

/// Class-specific contrastive step for one episode class: anchor is the
/// online-branch prototype, the positive is the momentum-branch prototype
/// of the augmented supports, negatives come from the dictionary.
#[allow(clippy::too_many_arguments)]
pub fn class_specific_step(
    g: &Graph,
    anchor: Var,
    supports: &[(&Tensor, &Mask)],
    class_label: u16,
    momentum: &EncoderParams,
    dictionary: &PrototypeDictionary,
    opts: &ContrastiveOptions,
    rng: &mut ChaCha8Rng,
) -> Result<CsclStep> {
    let stride = momentum.config.feature_stride();
    let mut shot_vectors: Vec<Vec<f64>> = Vec::new();
    for (image, mask) in supports {
        let (aug_img, aug_mask) = augment(image, mask, &opts.aug, rng);
        let feats = encode_plain(momentum, &aug_img)?;
        let down = aug_mask.downsample_nearest(
            aug_mask.height() / stride,
            aug_mask.width() / stride,
        )?;
        if down.count(1) == 0 {
            continue;
        }
        shot_vectors.push(masked_average_pool(&feats, &down)?);
    }
    if shot_vectors.is_empty() {
        return Ok(CsclStep {
            loss: None,
            skip: Some(SkipReason::DegenerateMask),
            pending_push: None,
        });
    }
    let d = shot_vectors[0].len();
    let mut positive = vec![0.0; d];
    for v in &shot_vectors {
        for (p, x) in positive.iter_mut().zip(v) {
            *p += x;
        }
    }
    positive.iter_mut().for_each(|v| *v /= shot_vectors.len() as f64);

    let negatives = dictionary.select_negatives(class_label, opts.cs_negatives, rng);
    if negatives.is_empty() {
        // No usable negatives this step; the momentum prototype still joins
        // the queue so the dictionary keeps turning over.
        return Ok(CsclStep {
            loss: None,
            skip: Some(SkipReason::NoNegatives),
            pending_push: Some((positive, class_label)),
        });
    }
    let loss = info_nce_traced(g, anchor, &positive, &negatives, opts.temperature)?;
    Ok(CsclStep {
        loss: Some(loss),
        skip: None,
        pending_push: Some((positive, class_label)),
    })
}

pub struct CaclStep {
    pub loss: Option<Var>,
    pub skip: Option<SkipReason>,
}

/// Class-agnostic contrastive step for one episode class: anchor is the
/// online-branch support prototype, the positive pools the augmented
/// query's momentum features over the class mask, negatives are randomly
/// pooled groups of non-class pixels.
pub fn class_agnostic_step(
    g: &Graph,
    anchor: Var,
    query_image: &Tensor,
    query_class_mask: &Mask,
    momentum: &EncoderParams,
    opts: &ContrastiveOptions,
    rng: &mut ChaCha8Rng,
) -> Result<CaclStep> {
    let stride = momentum.config.feature_stride();
    let (aug_img, aug_mask) = augment(query_image, query_class_mask, &opts.aug, rng);
    let feats = encode_plain(momentum, &aug_img)?;
    let down = aug_mask.downsample_nearest(
        aug_mask.height() / stride,
        aug_mask.width() / stride,
    )?;
    if down.count(1) == 0 {
        return Ok(CaclStep { loss: None, skip: Some(SkipReason::DegenerateMask) });
    }
    let positive = masked_average_pool(&feats, &down)?;
    let keys = sample_negative_keys(&feats, &down, opts.ca_negatives, opts.group_size, rng)?;
    if keys.is_empty() {
        return Ok(CaclStep { loss: None, skip: Some(SkipReason::TooFewPixels) });
    }
    let loss = info_nce_traced(g, anchor, &positive, &keys.keys, opts.temperature)?;
    Ok(CaclStep { loss: Some(loss), skip: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn init_fills_to_capacity_with_sentinels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dict = PrototypeDictionary::init(128, 8, &mut rng).unwrap();
        assert_eq!(dict.len(), 128);
        assert!(dict.entries().all(|e| e.label == SENTINEL_LABEL));
        for e in dict.entries() {
            let norm: f64 = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let d1 = PrototypeDictionary::init(16, 4, &mut a).unwrap();
        let d2 = PrototypeDictionary::init(16, 4, &mut b).unwrap();
        let v1: Vec<_> = d1.entries().collect();
        let v2: Vec<_> = d2.entries().collect();
        assert_eq!(v1, v2);
    }

    #[test]
    fn push_evicts_strictly_fifo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dict = PrototypeDictionary::init(3, 2, &mut rng).unwrap();
        for i in 0..4u16 {
            dict.push(vec![i as f64 + 1.0, 0.0], i).unwrap();
            assert_eq!(dict.len(), 3);
        }
        // capacity 3, 4 pushes: entry with label 0 must be gone
        let labels: Vec<i32> = dict.entries().map(|e| e.label).collect();
        assert_eq!(labels, vec![1, 2, 3]);
    }

    #[test]
    fn fifo_matches_reference_queue_on_random_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let capacity = 16;
        let mut dict = PrototypeDictionary::init(capacity, 3, &mut rng).unwrap();
        let initial: Vec<DictEntry> = dict.entries().cloned().collect();
        let mut reference: VecDeque<DictEntry> = initial.into_iter().collect();
        for i in 0..500u32 {
            let label = (i % 7) as u16;
            let vector = vec![i as f64, 1.0, -1.0];
            dict.push(vector.clone(), label).unwrap();
            let mut v = vector;
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            reference.push_back(DictEntry { vector: v, label: i32::from(label) });
            while reference.len() > capacity {
                reference.pop_front();
            }
            let got: Vec<&DictEntry> = dict.entries().collect();
            let want: Vec<&DictEntry> = reference.iter().collect();
            assert_eq!(got, want, "divergence after push {i}");
        }
    }

    #[test]
    fn push_rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut dict = PrototypeDictionary::init(4, 3, &mut rng).unwrap();
        assert!(dict.push(vec![1.0, 2.0], 1).is_err());
    }

    #[test]
    fn negatives_exclude_target_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut dict = PrototypeDictionary::init(10, 2, &mut rng).unwrap();
        for i in 0..10u16 {
            dict.push(vec![f64::from(i), 1.0], i % 3).unwrap();
        }
        // target label 1 appears; marker coordinate identifies source entries
        let negs = dict.select_negatives(1, 100, &mut rng);
        assert!(!negs.is_empty());
        for n in &negs {
            let idx = dict
                .entries()
                .position(|e| {
                    e.vector
                        .iter()
                        .zip(n)
                        .all(|(a, b)| (a - b).abs() < 1e-12)
                })
                .unwrap();
            let entry: &DictEntry = dict.entries().nth(idx).unwrap();
            assert_ne!(entry.label, 1);
        }
    }

    #[test]
    fn negatives_cap_at_max_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dict = PrototypeDictionary::init(100, 4, &mut rng).unwrap();
        let negs = dict.select_negatives(3, 40, &mut rng);
        assert_eq!(negs.len(), 40);
        let all = dict.select_negatives(3, 1000, &mut rng);
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn all_target_labels_yield_no_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut dict = PrototypeDictionary::init(4, 2, &mut rng).unwrap();
        for _ in 0..4 {
            dict.push(vec![1.0, 0.0], 9).unwrap();
        }
        assert!(dict.select_negatives(9, 10, &mut rng).is_empty());
    }

    #[test]
    fn uniform_cosines_give_log_n_plus_one() {
        let anchor = vec![1.0, 0.0];
        let positive = vec![2.0, 0.0]; // cosine 1 with anchor
        for &n in &[1usize, 10, 100] {
            let negatives = vec![vec![3.0, 0.0]; n];
            let loss = info_nce(&anchor, &positive, &negatives, 0.05).unwrap();
            let expected = ((n + 1) as f64).ln();
            assert!(
                (loss - expected).abs() < 1e-9,
                "n={n}: {loss} vs {expected}"
            );
        }
    }

    #[test]
    fn perfect_positive_with_opposed_negatives_matches_analytic_value() {
        let anchor = vec![1.0, 0.0];
        let positive = vec![1.0, 0.0];
        let n = 8usize;
        let negatives = vec![vec![-1.0, 0.0]; n];
        let loss = info_nce(&anchor, &positive, &negatives, 0.05).unwrap();
        // -log(e^20 / (e^20 + n e^-20))
        let expected = -((20.0f64).exp() / ((20.0f64).exp() + n as f64 * (-20.0f64).exp())).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_positive_aligns() {
        let anchor = vec![1.0, 0.0];
        let negatives = vec![vec![0.3, 0.8], vec![-0.5, 0.2]];
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            // positive sweeps from opposed to aligned
            let t = -1.0 + 2.0 * (i as f64) / 19.0;
            let positive = vec![t, (1.0 - t * t).sqrt().max(0.0)];
            let loss = info_nce(&anchor, &positive, &negatives, 0.1).unwrap();
            assert!(loss < prev, "not strictly decreasing at sweep point {i}");
            prev = loss;
        }
    }

    #[test]
    fn info_nce_rejects_empty_negatives_and_bad_temperature() {
        let a = vec![1.0, 0.0];
        assert!(info_nce(&a, &a, &[], 0.05).is_err());
        assert!(info_nce(&a, &a, &[vec![0.0, 1.0]], 0.0).is_err());
        assert!(info_nce(&a, &a, &[vec![0.0, 1.0]], -1.0).is_err());
    }

    #[test]
    fn info_nce_is_nonnegative_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let rv = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let negatives: Vec<Vec<f64>> = (0..5).map(|_| rv(&mut rng)).collect();
            let loss = info_nce(&rv(&mut rng), &rv(&mut rng), &negatives, 0.2).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn uniform_point_is_temperature_independent() {
        let anchor = vec![0.0, 1.0];
        let positive = vec![0.0, 2.0];
        let negatives = vec![vec![0.0, 3.0]; 6];
        let l1 = info_nce(&anchor, &positive, &negatives, 0.05).unwrap();
        let l2 = info_nce(&anchor, &positive, &negatives, 1.7).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!((l1 - 7.0f64.ln()).abs() < 1e-12);
    }
}
