//! Non-parametric matching of query pixels against prototypes: per-pixel
//! cosine similarity scaled by a temperature, softmax over prototypes,
//! argmax prediction, and IoU/mIoU evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureStack;
use crate::graph::{Graph, Var};
use crate::prototype::PrototypeSet;
use crate::tensor::{Mask, Tensor};
use crate::{Error, Result};

/// Per-pixel class probabilities. Channel order follows `class_order`.
#[derive(Clone, Debug)]
pub struct ProbabilityMap {
    /// [num_classes, h, w]; every pixel's channel vector sums to 1.
    pub values: Tensor,
    pub class_order: Vec<u16>,
}

impl ProbabilityMap {
    pub fn num_channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Traced logits for the prototype match: cosine similarities times alpha,
/// stacked channelwise in prototype order.
pub fn match_logits_traced(g: &Graph, features: Var, prototypes: &[Var], alpha: f64) -> Var {
    assert!(!prototypes.is_empty());
    let maps: Vec<Var> = prototypes.iter().map(|&p| g.cosine_map(features, p)).collect();
    g.scale(g.stack_maps(&maps), alpha)
}

/// Softmax over alpha-scaled cosine similarities between each query pixel
/// and every prototype.
pub fn class_probability_map(
    features: &FeatureStack,
    prototypes: &PrototypeSet,
    alpha: f64,
) -> Result<ProbabilityMap> {
    if prototypes.prototypes.is_empty() {
        return Err(Error::Data("empty prototype set".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let d = features.fused_dim();
    for p in &prototypes.prototypes {
        if p.vector.len() != d {
            return Err(Error::Shape(format!(
                "prototype dim {} vs features dim {d}",
                p.vector.len()
            )));
        }
    }
    let g = Graph::new();
    let f = g.constant(features.values.clone());
    let proto_vars: Vec<Var> = prototypes
        .prototypes
        .iter()
        .map(|p| g.constant(Tensor::from_vec(&[d], p.vector.clone())))
        .collect();
    let logits = match_logits_traced(&g, f, &proto_vars, alpha);
    let probs = g.softmax_channels(logits);
    Ok(ProbabilityMap { values: g.value(probs), class_order: prototypes.labels() })
}

/// Per-pixel argmax over channels, mapped through `class_order`. Ties break
/// toward the lowest channel index.
pub fn predict_mask(prob: &ProbabilityMap) -> Mask {
    let (n, h, w) = (prob.num_channels(), prob.height(), prob.width());
    let data = prob.values.data();
    let mut out = Mask::zeros(h, w);
    for p in 0..h * w {
        let mut best_c = 0;
        let mut best_v = data[p];
        for c in 1..n {
            let v = data[c * h * w + p];
            if v > best_v {
                best_v = v;
                best_c = c;
            }
        }
        out.data_mut()[p] = prob.class_order[best_c];
    }
    out
}

/// Running intersection/union counts per class, accumulated over episodes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IouAccumulator {
    counts: BTreeMap<u16, (u64, u64)>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate one prediction/ground-truth pair for the given classes.
    /// Shapes must match (upsample predictions beforehand).
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, eval_classes: &[u16]) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for &c in eval_classes {
            let entry = self.counts.entry(c).or_insert((0, 0));
            for (&p, &g) in pred.data().iter().zip(gt.data()) {
                let pm = p == c;
                let gm = g == c;
                entry.0 += u64::from(pm && gm);
                entry.1 += u64::from(pm || gm);
            }
        }
        Ok(())
    }

    /// Per-class IoU and their mean. Classes never seen in either mask are
    /// excluded from the mean with a warning.
    pub fn finish(&self) -> (BTreeMap<u16, f64>, f64) {
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&c, &(inter, union)) in &self.counts {
            if union == 0 {
                log::warn!("class {c} absent from predictions and ground truth; excluded from mIoU");
                continue;
            }
            let iou = inter as f64 / union as f64;
            per_class.insert(c, iou);
            sum += iou;
            n += 1;
        }
        let miou = if n == 0 { 0.0 } else { sum / n as f64 };
        (per_class, miou)
    }
}

/// Evaluation outcome over a set of episodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub per_class_iou: BTreeMap<u16, f64>,
    pub miou: f64,
}

/// Dataset-level mIoU over prediction/ground-truth pairs.
pub fn mean_iou(
    pairs: &[(Mask, Mask)],
    eval_classes: &[u16],
) -> Result<SegmentationResult> {
    let mut acc = IouAccumulator::new();
    for (pred, gt) in pairs {
        acc.accumulate(pred, gt, eval_classes)?;
    }
    let (per_class_iou, miou) = acc.finish();
    Ok(SegmentationResult { per_class_iou, miou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::{ProtoSource, Prototype};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(values: Tensor) -> FeatureStack {
        FeatureStack { values, source_levels: vec![1], spatial_scale: 1 }
    }

    fn proto(label: u16, v: Vec<f64>) -> Prototype {
        Prototype { vector: v, class_label: label, source: ProtoSource::Support }
    }

    #[test]
    fn single_prototype_probability_is_one() {
        let fs = stack(Tensor::full(&[2, 3, 3], 0.4));
        let set = PrototypeSet { prototypes: vec![proto(1, vec![1.0, 0.0])] };
        let pm = class_probability_map(&fs, &set, 20.0).unwrap();
        assert!(pm.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn aligned_vs_orthogonal_prototype_matches_analytic_softmax() {
        // pixel feature equals prototype 1 and is orthogonal to prototype 2
        let mut values = Tensor::zeros(&[2, 1, 1]);
        values.data_mut()[0] = 0.8;
        let fs = stack(values);
        let set = PrototypeSet {
            prototypes: vec![proto(1, vec![1.0, 0.0]), proto(2, vec![0.0, 1.0])],
        };
        let pm = class_probability_map(&fs, &set, 20.0).unwrap();
        let expected = (20.0f64).exp() / ((20.0f64).exp() + 1.0);
        assert!((pm.values.data()[0] - expected).abs() < 1e-9);
        assert!((pm.values.data()[1] - (1.0 - expected)).abs() < 1e-9);
    }

    #[test]
    fn identical_prototypes_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let len = 3 * 4 * 4;
        let fs = stack(Tensor::from_vec(
            &[3, 4, 4],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let v = vec![0.3, -0.2, 0.9];
        let set = PrototypeSet { prototypes: vec![proto(1, v.clone()), proto(2, v)] };
        let pm = class_probability_map(&fs, &set, 20.0).unwrap();
        for p in 0..16 {
            assert!((pm.values.data()[p] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_sums_are_one_and_swapping_prototypes_swaps_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let len = 4 * 3 * 3;
        let fs = stack(Tensor::from_vec(
            &[4, 3, 3],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ab = PrototypeSet { prototypes: vec![proto(1, a.clone()), proto(2, b.clone())] };
        let ba = PrototypeSet { prototypes: vec![proto(2, b), proto(1, a)] };
        let pm_ab = class_probability_map(&fs, &ab, 20.0).unwrap();
        let pm_ba = class_probability_map(&fs, &ba, 20.0).unwrap();
        for p in 0..9 {
            let sum: f64 = (0..2).map(|c| pm_ab.values.data()[c * 9 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(
                (pm_ab.values.data()[p] - pm_ba.values.data()[9 + p]).abs() < 1e-12,
                "channel swap mismatch"
            );
        }
    }

    #[test]
    fn argmax_is_invariant_to_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let len = 3 * 5 * 5;
        let fs = stack(Tensor::from_vec(
            &[3, 5, 5],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let set = PrototypeSet {
            prototypes: vec![
                proto(0, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
                proto(1, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
                proto(2, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
            ],
        };
        let base = predict_mask(&class_probability_map(&fs, &set, 1.0).unwrap());
        for &alpha in &[20.0, 100.0] {
            let other = predict_mask(&class_probability_map(&fs, &set, alpha).unwrap());
            assert_eq!(base, other);
        }
    }

    #[test]
    fn uniform_probabilities_take_lowest_channel() {
        let pm = ProbabilityMap {
            values: Tensor::full(&[3, 2, 2], 1.0 / 3.0),
            class_order: vec![0, 4, 9],
        };
        let pred = predict_mask(&pm);
        assert!(pred.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn one_hot_probabilities_recover_labels() {
        let mut values = Tensor::zeros(&[2, 2, 1]);
        values.data_mut()[0] = 1.0; // pixel 0 -> channel 0
        values.data_mut()[3] = 1.0; // pixel 1 -> channel 1
        let pm = ProbabilityMap { values, class_order: vec![0, 5] };
        let pred = predict_mask(&pm);
        assert_eq!(pred.data(), &[0, 5]);
    }

    #[test]
    fn perfect_prediction_has_miou_one() {
        let gt = Mask::from_vec(2, 2, vec![1, 0, 1, 0]);
        let res = mean_iou(&[(gt.clone(), gt)], &[1]).unwrap();
        assert_eq!(res.miou, 1.0);
    }

    #[test]
    fn disjoint_prediction_has_iou_zero() {
        let gt = Mask::from_vec(2, 2, vec![1, 1, 0, 0]);
        let pred = Mask::from_vec(2, 2, vec![0, 0, 1, 1]);
        let res = mean_iou(&[(pred, gt)], &[1]).unwrap();
        assert_eq!(res.per_class_iou[&1], 0.0);
    }

    #[test]
    fn half_plane_against_full_prediction_scores_half() {
        let mut gt = Mask::zeros(4, 4);
        for y in 0..2 {
            for x in 0..4 {
                gt.set(y, x, 1);
            }
        }
        let pred = Mask::from_vec(4, 4, vec![1; 16]);
        let res = mean_iou(&[(pred, gt)], &[1]).unwrap();
        assert_eq!(res.per_class_iou[&1], 0.5);
    }

    #[test]
    fn miou_is_permutation_invariant() {
        let a = (Mask::from_vec(2, 2, vec![1, 0, 0, 0]), Mask::from_vec(2, 2, vec![1, 1, 0, 0]));
        let b = (Mask::from_vec(2, 2, vec![0, 2, 0, 2]), Mask::from_vec(2, 2, vec![0, 2, 2, 2]));
        let fwd = mean_iou(&[a.clone(), b.clone()], &[1, 2]).unwrap();
        let rev = mean_iou(&[b, a], &[1, 2]).unwrap();
        assert_eq!(fwd.miou, rev.miou);
    }

    #[test]
    fn absent_class_is_excluded() {
        let gt = Mask::from_vec(2, 2, vec![1, 0, 0, 0]);
        let pred = Mask::from_vec(2, 2, vec![1, 0, 0, 0]);
        let res = mean_iou(&[(pred, gt)], &[1, 9]).unwrap();
        assert_eq!(res.per_class_iou.len(), 1);
        assert_eq!(res.miou, 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let gt = Mask::zeros(2, 2);
        let pred = Mask::zeros(4, 4);
        assert!(mean_iou(&[(pred, gt)], &[1]).is_err());
    }

    #[test]
    fn empty_prototype_set_is_an_error() {
        let fs = stack(Tensor::zeros(&[2, 2, 2]));
        let set = PrototypeSet { prototypes: vec![] };
        assert!(class_probability_map(&fs, &set, 20.0).is_err());
    }
}
