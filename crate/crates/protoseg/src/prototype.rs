//! Prototype extraction: masked average pooling over feature maps, full
//! prototype-set assembly (background + one per class, averaged over
//! shots), and randomly pooled negative keys for the class-agnostic
//! contrastive loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureStack;
use crate::graph::{Graph, Var};
use crate::tensor::Mask;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtoSource {
    Support,
    Query,
    Augmented,
}

impl ProtoSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtoSource::Support => "support",
            ProtoSource::Query => "query",
            ProtoSource::Augmented => "augmented",
        }
    }
}

/// A class-representative vector (label 0 = background).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub class_label: u16,
    pub source: ProtoSource,
}

/// Prototypes for one episode, background first, then the episode classes.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub prototypes: Vec<Prototype>,
}

impl PrototypeSet {
    pub fn labels(&self) -> Vec<u16> {
        self.prototypes.iter().map(|p| p.class_label).collect()
    }
}

/// Mean feature vector over the set pixels of a binary mask (Eq.-style
/// masked average pooling). Errors on an empty mask rather than dividing
/// by zero.
pub fn masked_average_pool(features: &FeatureStack, mask: &Mask) -> Result<Vec<f64>> {
    let (h, w) = (features.height(), features.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs features {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if mask.data().iter().any(|&v| v > 1) {
        return Err(Error::Data("masked_average_pool expects a binary mask".into()));
    }
    let count = mask.data().iter().filter(|&&v| v != 0).count();
    if count == 0 {
        return Err(Error::DegenerateMask("empty mask in masked_average_pool".into()));
    }
    let d = features.fused_dim();
    let data = features.values.data();
    let mut out = vec![0.0; d];
    for (p, &m) in mask.data().iter().enumerate() {
        if m != 0 {
            for (c, o) in out.iter_mut().enumerate() {
                *o += data[c * h * w + p];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= count as f64);
    Ok(out)
}

/// Traced prototype set: one graph var per channel, background first.
pub struct TracedPrototypes {
    pub labels: Vec<u16>,
    pub vars: Vec<Var>,
}

/// Build the traced prototype set for an episode from per-shot features and
/// per-shot per-class binary masks at feature resolution. Shots where a
/// class has no foreground are skipped for that class; classes empty across
/// all shots are dropped with a warning. The background prototype pools the
/// per-shot complement of the union of class masks.
pub fn build_prototypes_traced(
    g: &Graph,
    shot_features: &[Var],
    shot_class_masks: &[Vec<Mask>],
    classes: &[u16],
) -> Result<TracedPrototypes> {
    assert_eq!(shot_features.len(), shot_class_masks.len());
    if shot_features.is_empty() {
        return Err(Error::Data("no support shots".into()));
    }

    let mut labels = Vec::new();
    let mut vars = Vec::new();

    // background: complement of the union of class masks, per shot
    let mut bg_terms = Vec::new();
    for (k, masks) in shot_class_masks.iter().enumerate() {
        let mut union = masks[0].clone();
        for m in &masks[1..] {
            union = union.union(m);
        }
        let bg = union.complement();
        if bg.count(1) > 0 {
            bg_terms.push(g.masked_mean(shot_features[k], &bg));
        }
    }
    if bg_terms.is_empty() {
        log::warn!("background prototype degenerate in every shot; dropping");
    } else {
        labels.push(0);
        vars.push(g.mean_of(&bg_terms));
    }

    for (i, &c) in classes.iter().enumerate() {
        let mut terms = Vec::new();
        for (k, masks) in shot_class_masks.iter().enumerate() {
            if masks[i].count(1) > 0 {
                terms.push(g.masked_mean(shot_features[k], &masks[i]));
            }
        }
        if terms.is_empty() {
            log::warn!("class {c} has no foreground at feature resolution; dropping prototype");
            continue;
        }
        labels.push(c);
        vars.push(g.mean_of(&terms));
    }

    if vars.is_empty() {
        return Err(Error::DegenerateMask("all prototypes degenerate".into()));
    }
    Ok(TracedPrototypes { labels, vars })
}

/// Plain prototype set (background + classes) from support features.
pub fn build_prototype_set(
    shot_features: &[FeatureStack],
    shot_class_masks: &[Vec<Mask>],
    classes: &[u16],
) -> Result<PrototypeSet> {
    let g = Graph::new();
    let feat_vars: Vec<Var> =
        shot_features.iter().map(|f| g.constant(f.values.clone())).collect();
    let traced = build_prototypes_traced(&g, &feat_vars, shot_class_masks, classes)?;
    Ok(PrototypeSet {
        prototypes: traced
            .labels
            .iter()
            .zip(&traced.vars)
            .map(|(&label, &v)| Prototype {
                vector: g.value(v).data().to_vec(),
                class_label: label,
                source: ProtoSource::Support,
            })
            .collect(),
    })
}

/// Negative keys for the class-agnostic loss: each key is the mean of
/// `group_size` pixels sampled (with replacement) from outside the target
/// mask.
#[derive(Clone, Debug)]
pub struct NegativeKeySet {
    pub keys: Vec<Vec<f64>>,
    pub group_size: usize,
}

impl NegativeKeySet {
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Draw `num_keys` pooled negative keys from the non-target pixels of
/// `features`. Returns an empty set (sampling skipped) when fewer than
/// `group_size` pixels are eligible.
pub fn sample_negative_keys(
    features: &FeatureStack,
    target_mask: &Mask,
    num_keys: usize,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NegativeKeySet> {
    if num_keys == 0 {
        return Err(Error::Data("num_keys must be positive".into()));
    }
    if group_size == 0 {
        return Err(Error::Data("group_size must be positive".into()));
    }
    let (h, w) = (features.height(), features.width());
    if (target_mask.height(), target_mask.width()) != (h, w) {
        return Err(Error::Shape("target mask does not match feature resolution".into()));
    }
    let eligible: Vec<usize> = target_mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 0)
        .map(|(p, _)| p)
        .collect();
    if eligible.len() < group_size {
        log::debug!(
            "negative-key sampling skipped: {} eligible pixels < group size {group_size}",
            eligible.len()
        );
        return Ok(NegativeKeySet { keys: Vec::new(), group_size });
    }

    let d = features.fused_dim();
    let data = features.values.data();
    let mut keys = Vec::with_capacity(num_keys);
    for _ in 0..num_keys {
        let mut key = vec![0.0; d];
        for _ in 0..group_size {
            let p = eligible[rng.random_range(0..eligible.len())];
            for (c, k) in key.iter_mut().enumerate() {
                *k += data[c * h * w + p];
            }
        }
        key.iter_mut().for_each(|v| *v /= group_size as f64);
        keys.push(key);
    }
    Ok(NegativeKeySet { keys, group_size })
}
