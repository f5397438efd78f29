//! Training loop machinery: segmentation + alignment loss, total loss
//! composition, momentum SGD, the per-step pipeline (losses -> gradients ->
//! SGD -> EMA -> dictionary turnover), and checkpointing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::contrastive::{
    class_agnostic_step, class_specific_step, ContrastiveOptions, PrototypeDictionary,
};
use crate::data::{sample_episode, split_folds, Dataset, Episode};
use crate::encoder::{
    encode, init_momentum_encoder, momentum_update, EncoderConfig, EncoderParams, EncoderVars,
};
use crate::graph::{Graph, Var};
use crate::matcher::match_logits_traced;
use crate::prototype::{build_prototypes_traced, TracedPrototypes};
use crate::tensor::{Mask, Tensor};
use crate::{Error, Result};

/// Momentum buffers, parallel to `EncoderParams::tensors()` order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgdState {
    pub bufs: Vec<Tensor>,
}

impl SgdState {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        SgdState { bufs: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }
}

/// Classic momentum SGD with L2 weight decay folded into the gradient:
/// g <- g + wd*theta; buf <- momentum*buf + g; theta <- theta - lr*buf.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &[Tensor],
    opt: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient contains NaN/Inf".into()));
    }
    for ((theta, g), buf) in params.tensors_mut().into_iter().zip(grads).zip(&mut opt.bufs) {
        assert_eq!(theta.shape(), g.shape());
        for ((t, &gv), b) in
            theta.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut())
        {
            let g_eff = gv + weight_decay * *t;
            *b = momentum * *b + g_eff;
            *t -= lr * *b;
        }
    }
    Ok(())
}

/// Per-step loss summary. `total` equals seg + align + lambda1*cs +
/// lambda2*ca with skipped terms omitted; cs/ca are batch means where
/// skipped episodes contribute zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub seg_loss: f64,
    pub align_loss: f64,
    pub cs_loss: Option<f64>,
    pub ca_loss: Option<f64>,
    pub total: f64,
    pub lr: f64,
    /// Class terms skipped this step (degenerate masks, too few pixels, ...).
    pub cs_skipped: usize,
    pub ca_skipped: usize,
}

/// Total loss composition; errors on non-finite inputs.
pub fn total_loss(
    seg: f64,
    align: f64,
    cs: Option<f64>,
    ca: Option<f64>,
    lambda_cs: f64,
    lambda_ca: f64,
) -> Result<f64> {
    let parts = [Some(seg), Some(align), cs, ca];
    if parts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss parts seg={seg} align={align} cs={cs:?} ca={ca:?}"
        )));
    }
    Ok(seg + align + lambda_cs * cs.unwrap_or(0.0) + lambda_ca * ca.unwrap_or(0.0))
}

/// Full training state: online and momentum parameters, optimizer buffers,
/// prototype dictionary, step counter, RNG and the config snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub params: EncoderParams,
    pub momentum_params: EncoderParams,
    pub opt: SgdState,
    pub dictionary: PrototypeDictionary,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub config: ExperimentConfig,
    pub fold_index: usize,
    pub seed: u64,
}

impl TrainState {
    /// Fresh state: parameters, momentum twin (exact copy) and dictionary
    /// all derived from one seeded stream.
    pub fn new(config: ExperimentConfig, fold_index: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if fold_index >= config.data.folds {
            return Err(Error::Config(format!(
                "fold index {fold_index} out of range for {} folds",
                config.data.folds
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(&config.encoder, &mut rng)?;
        let momentum_params = init_momentum_encoder(&params);
        let dictionary =
            PrototypeDictionary::init(config.dict.capacity, config.encoder.fused_dim(), &mut rng)?;
        let opt = SgdState::zeros_like(&params);
        Ok(TrainState {
            params,
            momentum_params,
            opt,
            dictionary,
            step: 0,
            rng,
            config,
            fold_index,
            seed,
        })
    }
}

struct EpisodeLoss {
    total: Var,
    seg: f64,
    align: f64,
    cs: Option<f64>,
    ca: Option<f64>,
    cs_skipped: usize,
    ca_skipped: usize,
}

struct FssParts {
    seg: Var,
    align: Option<Var>,
    protos: TracedPrototypes,
}

/// Map a feature-resolution label mask to prototype channel indices.
/// Labels without a prototype fall back to the background channel.
fn to_channel_targets(mask: &Mask, labels: &[u16]) -> Result<Mask> {
    let bg = labels
        .iter()
        .position(|&l| l == 0)
        .ok_or_else(|| Error::DegenerateMask("no background prototype available".into()))?;
    let mut out = Mask::zeros(mask.height(), mask.width());
    for (o, &v) in out.data_mut().iter_mut().zip(mask.data()) {
        *o = labels.iter().position(|&l| l == v).unwrap_or(bg) as u16;
    }
    Ok(out)
}

/// Segmentation + alignment losses for one episode on the tape.
///
/// Query direction: support prototypes classify the query against its
/// downsampled ground truth. Alignment direction: prototypes built from the
/// query features and its true mask classify each support image.
fn fss_losses(
    g: &Graph,
    theta: &EncoderVars,
    enc_cfg: &EncoderConfig,
    episode: &Episode,
    alpha: f64,
) -> Result<FssParts> {
    let stride = enc_cfg.feature_stride();
    let support_feats: Vec<Var> = episode
        .supports
        .iter()
        .map(|s| encode(g, theta, enc_cfg, &s.image).map(|t| t.var))
        .collect::<Result<_>>()?;
    let query_feat = encode(g, theta, enc_cfg, &episode.query.image)?.var;

    let shot_masks: Vec<Vec<Mask>> = episode
        .supports
        .iter()
        .map(|s| {
            s.class_masks
                .iter()
                .map(|m| m.downsample_nearest(m.height() / stride, m.width() / stride))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let protos = build_prototypes_traced(g, &support_feats, &shot_masks, &episode.classes)?;

    let query_mask_ds = episode.query.mask.downsample_nearest(
        episode.query.mask.height() / stride,
        episode.query.mask.width() / stride,
    )?;
    let query_targets = to_channel_targets(&query_mask_ds, &protos.labels)?;
    let seg_logits = match_logits_traced(g, query_feat, &protos.vars, alpha);
    let seg = g.softmax_ce_map(seg_logits, &query_targets);

    // Alignment direction, skipped when the query cannot supply a prototype
    // for every episode class.
    let query_class_masks: Vec<Mask> =
        episode.classes.iter().map(|&c| query_mask_ds.binarize(c)).collect();
    let align = match build_prototypes_traced(
        g,
        &[query_feat],
        &[query_class_masks],
        &episode.classes,
    ) {
        Ok(qprotos) if qprotos.labels.len() == episode.classes.len() + 1 => {
            let mut terms = Vec::new();
            for (k, feats) in support_feats.iter().enumerate() {
                let mut support_label_mask = Mask::zeros(query_targets.height(), query_targets.width());
                for (i, &c) in episode.classes.iter().enumerate() {
                    for (dst, &src) in support_label_mask
                        .data_mut()
                        .iter_mut()
                        .zip(shot_masks[k][i].data())
                    {
                        if src != 0 {
                            *dst = c;
                        }
                    }
                }
                let targets = to_channel_targets(&support_label_mask, &qprotos.labels)?;
                let logits = match_logits_traced(g, *feats, &qprotos.vars, alpha);
                terms.push(g.softmax_ce_map(logits, &targets));
            }
            Some(g.mean_of(&terms))
        }
        _ => {
            log::warn!("alignment term skipped: query prototypes degenerate");
            None
        }
    };

    Ok(FssParts { seg, align, protos })
}

/// Segmentation and alignment loss values for one episode (no gradients).
pub fn segmentation_loss(
    params: &EncoderParams,
    episode: &Episode,
    alpha: f64,
) -> Result<(f64, f64)> {
    let g = Graph::new();
    let vars = EncoderVars::frozen(&g, params);
    let parts = fss_losses(&g, &vars, &params.config, episode, alpha)?;
    let seg = g.value(parts.seg).item();
    let align = parts.align.map(|a| g.value(a).item()).unwrap_or(0.0);
    Ok((seg, align))
}

#[allow(clippy::too_many_arguments)]
fn episode_loss(
    g: &Graph,
    theta: &EncoderVars,
    params: &EncoderParams,
    momentum_params: &EncoderParams,
    dictionary: &PrototypeDictionary,
    episode: &Episode,
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
    pending_pushes: &mut Vec<(Vec<f64>, u16)>,
) -> Result<EpisodeLoss> {
    let fss = fss_losses(g, theta, &params.config, episode, cfg.matcher.alpha)?;

    let mut total = fss.seg;
    if let Some(a) = fss.align {
        total = g.add(total, a);
    }

    let opts = ContrastiveOptions {
        temperature: cfg.nce.temperature,
        cs_negatives: cfg.cscl.num_negatives,
        ca_negatives: cfg.cacl.num_negatives,
        group_size: cfg.cacl.group_size,
        aug: cfg.aug.clone(),
    };

    let anchor_for = |c: u16| -> Option<Var> {
        fss.protos
            .labels
            .iter()
            .position(|&l| l == c)
            .map(|i| fss.protos.vars[i])
    };

    let mut cs_terms = Vec::new();
    let mut cs_skipped = 0usize;
    if cfg.cscl_active() {
        for (i, &c) in episode.classes.iter().enumerate() {
            let Some(anchor) = anchor_for(c) else {
                cs_skipped += 1;
                continue;
            };
            let supports: Vec<(&Tensor, &Mask)> = episode
                .supports
                .iter()
                .map(|s| (&s.image, &s.class_masks[i]))
                .collect();
            let step = class_specific_step(
                g,
                anchor,
                &supports,
                c,
                momentum_params,
                dictionary,
                &opts,
                rng,
            )?;
            if let Some(push) = step.pending_push {
                pending_pushes.push(push);
            }
            match step.loss {
                Some(l) => cs_terms.push(l),
                None => cs_skipped += 1,
            }
        }
    }

    let mut ca_terms = Vec::new();
    let mut ca_skipped = 0usize;
    if cfg.cacl_active() {
        for &c in &episode.classes {
            let Some(anchor) = anchor_for(c) else {
                ca_skipped += 1;
                continue;
            };
            let class_mask = episode.query.mask.binarize(c);
            let step = class_agnostic_step(
                g,
                anchor,
                &episode.query.image,
                &class_mask,
                momentum_params,
                &opts,
                rng,
            )?;
            match step.loss {
                Some(l) => ca_terms.push(l),
                None => ca_skipped += 1,
            }
        }
    }

    let cs = if cs_terms.is_empty() { None } else { Some(g.mean_of(&cs_terms)) };
    let ca = if ca_terms.is_empty() { None } else { Some(g.mean_of(&ca_terms)) };
    if let Some(c) = cs {
        total = g.add(total, g.scale(c, cfg.cscl.lambda));
    }
    if let Some(c) = ca {
        total = g.add(total, g.scale(c, cfg.cacl.lambda));
    }

    Ok(EpisodeLoss {
        total,
        seg: g.value(fss.seg).item(),
        align: fss.align.map(|a| g.value(a).item()).unwrap_or(0.0),
        cs: cs.map(|v| g.value(v).item()),
        ca: ca.map(|v| g.value(v).item()),
        cs_skipped,
        ca_skipped,
    })
}

/// One optimization step over a batch of episodes, in order: FSS losses,
/// CSCL, CACL, total, gradients, SGD, EMA update, dictionary turnover.
/// On any non-finite abort the state is left unchanged.
pub fn train_step(state: &mut TrainState, episodes: &[Episode]) -> Result<LossReport> {
    assert!(!episodes.is_empty());
    let cfg = state.config.clone();
    let rng_backup = state.rng.clone();

    let staged = (|| -> Result<_> {
        let g = Graph::new();
        let theta = EncoderVars::trainable(&g, &state.params);
        let mut pushes = Vec::new();
        let mut totals = Vec::new();
        let mut seg_sum = 0.0;
        let mut align_sum = 0.0;
        let mut cs_sum = 0.0;
        let mut ca_sum = 0.0;
        let mut cs_present = false;
        let mut ca_present = false;
        let mut cs_skipped = 0;
        let mut ca_skipped = 0;
        for ep in episodes {
            let parts = episode_loss(
                &g,
                &theta,
                &state.params,
                &state.momentum_params,
                &state.dictionary,
                ep,
                &cfg,
                &mut state.rng,
                &mut pushes,
            )?;
            seg_sum += parts.seg;
            align_sum += parts.align;
            if let Some(v) = parts.cs {
                cs_sum += v;
                cs_present = true;
            }
            if let Some(v) = parts.ca {
                ca_sum += v;
                ca_present = true;
            }
            cs_skipped += parts.cs_skipped;
            ca_skipped += parts.ca_skipped;
            totals.push(parts.total);
        }
        let batch_total = g.mean_of(&totals);
        let total_val = g.value(batch_total).item();
        let b = episodes.len() as f64;
        let report = LossReport {
            step: state.step + 1,
            seg_loss: seg_sum / b,
            align_loss: align_sum / b,
            cs_loss: cs_present.then_some(cs_sum / b),
            ca_loss: ca_present.then_some(ca_sum / b),
            total: total_val,
            lr: cfg.trainer.lr,
            cs_skipped,
            ca_skipped,
        };
        if !total_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "total loss is not finite at step {}: {report:?}",
                state.step + 1
            )));
        }
        let mut grads = g.backward(batch_total);
        let grad_tensors = theta.collect_gradients(&mut grads, &state.params);
        if grad_tensors.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradients not finite at step {}: {report:?}",
                state.step + 1
            )));
        }
        Ok((grad_tensors, pushes, report))
    })();

    let (grad_tensors, pushes, report) = match staged {
        Ok(v) => v,
        Err(e) => {
            state.rng = rng_backup;
            return Err(e);
        }
    };

    sgd_step(
        &mut state.params,
        &grad_tensors,
        &mut state.opt,
        cfg.trainer.lr,
        cfg.trainer.momentum,
        cfg.trainer.weight_decay,
    )?;
    momentum_update(&mut state.momentum_params, &state.params, cfg.trainer.ema_momentum)?;
    for (vector, label) in pushes {
        state.dictionary.push(vector, label)?;
    }
    state.step += 1;
    Ok(report)
}

/// Run training until `run.max_iterations`, sampling train-fold episodes
/// from the state's RNG. `on_step` observes every report (logging,
/// checkpoint cadence).
pub fn run_training(
    state: &mut TrainState,
    dataset: &Dataset,
    on_step: &mut dyn FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<()> {
    let cfg = state.config.clone();
    let fold = split_folds(&dataset.class_ids(), cfg.data.folds, state.fold_index)?;
    while state.step < cfg.run.max_iterations {
        let episodes: Vec<Episode> = (0..cfg.trainer.batch_size)
            .map(|_| {
                sample_episode(
                    dataset,
                    &fold.train_classes,
                    cfg.episode.n_way,
                    cfg.episode.k_shot,
                    &mut state.rng,
                )
            })
            .collect::<Result<_>>()?;
        let report = train_step(state, &episodes)?;
        on_step(state, &report)?;
    }
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "protoseg-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config_hash: String,
    state: TrainState,
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: state.config.hash(),
        state: state.clone(),
    };
    let json = serde_json::to_vec(&file)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, json)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT:?})",
            file.format
        )));
    }
    if file.config_hash != file.state.config.hash() {
        return Err(Error::Checkpoint("config hash does not match stored config".into()));
    }
    Ok(file.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AugConfig, QueryExample, SupportExample};
    use rand::Rng;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder = EncoderConfig {
            in_channels: 3,
            stage_channels: vec![3, 4],
            taps: vec![1, 2],
            proj_dim: 4,
        };
        cfg.data.resolution = 32;
        cfg.dict.capacity = 16;
        cfg.cscl.num_negatives = 8;
        cfg.cacl.num_negatives = 6;
        cfg.aug = AugConfig { crop_prob: 0.0, ..AugConfig::default() };
        cfg
    }

    /// Hand-built 1-way 1-shot episode with 8x8 images.
    pub(crate) fn tiny_episode(seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |cx: usize, cy: usize| {
            let len = 3 * 64;
            let image = Tensor::from_vec(
                &[3, 8, 8],
                (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
            );
            let mut mask = Mask::zeros(8, 8);
            for y in cy..(cy + 4).min(8) {
                for x in cx..(cx + 4).min(8) {
                    mask.set(y, x, 1);
                }
            }
            (image, mask)
        };
        let (s_img, s_mask) = make(1, 1);
        let (q_img, q_mask) = make(3, 2);
        Episode {
            supports: vec![SupportExample { image: s_img, class_masks: vec![s_mask] }],
            query: QueryExample { image: q_img, mask: q_mask },
            classes: vec![1],
            episode_seed: seed,
        }
    }

    #[test]
    fn sgd_vanilla_step() {
        let cfg = tiny_config().encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let before = params.clone();
        let grads: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::full(t.shape(), 2.0)).collect();
        let mut opt = SgdState::zeros_like(&params);
        sgd_step(&mut params, &grads, &mut opt, 0.1, 0.0, 0.0).unwrap();
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - (y - 0.2)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sgd_momentum_buffer_decays_geometrically() {
        // zero gradient, no decay: buf_k = m^k buf_0, theta drifts by -lr*buf_k
        let cfg = tiny_config().encoder;
        let mut params = EncoderParams::zeros(&cfg).unwrap();
        let mut opt = SgdState::zeros_like(&params);
        for b in &mut opt.bufs {
            b.fill(1.0);
        }
        let zero_grads: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (m, lr) = (0.9, 0.01);
        let mut expected_theta = 0.0;
        for k in 1..=20 {
            sgd_step(&mut params, &zero_grads, &mut opt, lr, m, 0.0).unwrap();
            let buf_expected = m.powi(k);
            expected_theta -= lr * buf_expected;
            assert!((opt.bufs[0].data()[0] - buf_expected).abs() < 1e-12);
            assert!((params.tensors()[0].data()[0] - expected_theta).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_nonfinite_gradients() {
        let cfg = tiny_config().encoder;
        let mut params = EncoderParams::zeros(&cfg).unwrap();
        let mut grads: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        grads[0].data_mut()[0] = f64::NAN;
        let mut opt = SgdState::zeros_like(&params);
        assert!(sgd_step(&mut params, &grads, &mut opt, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(1.0, 0.5, None, None, 0.02, 0.015).unwrap(), 1.5);
        assert_eq!(
            total_loss(1.0, 0.5, Some(2.0), Some(4.0), 0.02, 0.015).unwrap(),
            1.5 + 0.04 + 0.06
        );
        assert_eq!(
            total_loss(1.0, 0.5, None, Some(4.0), 0.02, 0.015).unwrap(),
            1.5 + 0.06
        );
        assert!(total_loss(f64::NAN, 0.0, None, None, 0.0, 0.0).is_err());
        assert!(total_loss(0.0, 0.0, Some(f64::INFINITY), None, 1.0, 0.0).is_err());
    }

    #[test]
    fn uniform_logits_give_ln2_segmentation_loss() {
        // zero parameters -> all-zero features -> cosine 0 everywhere ->
        // uniform 2-way softmax -> per-pixel CE = ln 2
        let cfg = tiny_config();
        let params = EncoderParams::zeros(&cfg.encoder).unwrap();
        let ep = tiny_episode(3);
        let (seg, align) = segmentation_loss(&params, &ep, cfg.matcher.alpha).unwrap();
        assert!((seg - 2.0f64.ln()).abs() < 1e-12);
        assert!((align - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_equals_segmentation_for_identical_support_and_query() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::init(&cfg.encoder, &mut rng).unwrap();
        let ep0 = tiny_episode(7);
        let ep = Episode {
            supports: vec![SupportExample {
                image: ep0.query.image.clone(),
                class_masks: vec![ep0.query.mask.binarize(1)],
            }],
            query: ep0.query.clone(),
            classes: vec![1],
            episode_seed: 7,
        };
        let (seg, align) = segmentation_loss(&params, &ep, cfg.matcher.alpha).unwrap();
        assert!((seg - align).abs() < 1e-10, "seg {seg} vs align {align}");
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = tiny_config();
        let ep = tiny_episode(11);
        let mut s1 = TrainState::new(cfg.clone(), 0, 42).unwrap();
        let mut s2 = TrainState::new(cfg, 0, 42).unwrap();
        for _ in 0..3 {
            let r1 = train_step(&mut s1, std::slice::from_ref(&ep)).unwrap();
            let r2 = train_step(&mut s2, std::slice::from_ref(&ep)).unwrap();
            assert_eq!(r1, r2);
        }
        assert_eq!(s1.params.max_abs_diff(&s2.params), 0.0);
    }

    #[test]
    fn train_step_updates_moving_parts() {
        let cfg = tiny_config();
        let ep = tiny_episode(13);
        let mut state = TrainState::new(cfg, 0, 1).unwrap();
        let before = state.params.clone();
        let mom_before = state.momentum_params.clone();
        let pushes_before = state.dictionary.pushes();
        let report = train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(report.step, 1);
        assert!(state.params.max_abs_diff(&before) > 0.0);
        assert!(state.momentum_params.max_abs_diff(&mom_before) > 0.0);
        assert_eq!(state.dictionary.pushes(), pushes_before + 1);
        assert!(report.cs_loss.is_some());
        assert!(report.ca_loss.is_some());
        // composition identity
        let recomputed = total_loss(
            report.seg_loss,
            report.align_loss,
            report.cs_loss,
            report.ca_loss,
            state.config.cscl.lambda,
            state.config.cacl.lambda,
        )
        .unwrap();
        assert!((recomputed - report.total).abs() < 1e-12);
    }

    #[test]
    fn disabled_branches_leave_dictionary_untouched() {
        let mut cfg = tiny_config();
        cfg.cscl.lambda = 0.0;
        cfg.cacl.enabled = false;
        let ep = tiny_episode(17);
        let mut state = TrainState::new(cfg, 0, 1).unwrap();
        let report = train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
        assert_eq!(state.dictionary.pushes(), 0);
        assert!(report.cs_loss.is_none());
        assert!(report.ca_loss.is_none());
        assert!((report.total - (report.seg_loss + report.align_loss)).abs() < 1e-12);
    }

    #[test]
    fn consecutive_steps_push_and_exclude_own_class() {
        let cfg = tiny_config();
        let ep = tiny_episode(19);
        let mut state = TrainState::new(cfg, 0, 2).unwrap();
        train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
        // exactly one real entry (class 1) in the dictionary now
        let real: Vec<_> = state.dictionary.entries().filter(|e| e.label == 1).collect();
        assert_eq!(real.len(), 1);
        let stored = real[0].vector.clone();
        train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
        // step 2 drew negatives for class 1: the stored class-1 prototype
        // must never have been eligible
        let negs = state.dictionary.select_negatives(1, 1000, &mut ChaCha8Rng::seed_from_u64(0));
        for n in &negs {
            let same = n.iter().zip(&stored).all(|(a, b)| (a - b).abs() < 1e-12);
            assert!(!same);
        }
    }

    #[test]
    fn checkpoint_roundtrip_resumes_identically() {
        let cfg = tiny_config();
        let ep = tiny_episode(23);
        let mut state = TrainState::new(cfg, 0, 3).unwrap();
        for _ in 0..2 {
            train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        checkpoint_save(&state, &path).unwrap();
        let mut resumed = checkpoint_load(&path).unwrap();
        assert_eq!(resumed.step, 2);
        for _ in 0..3 {
            let a = train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
            let b = train_step(&mut resumed, std::slice::from_ref(&ep)).unwrap();
            assert_eq!(a, b, "post-resume trajectory diverged");
        }
        assert_eq!(state.params.max_abs_diff(&resumed.params), 0.0);
        let d1: Vec<_> = state.dictionary.entries().collect();
        let d2: Vec<_> = resumed.dictionary.entries().collect();
        assert_eq!(d1, d2);
    }

    #[test]
    fn checkpoint_rejects_wrong_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, br#"{"format":"other-v9","config_hash":"x","state":null}"#)
            .unwrap();
        assert!(checkpoint_load(&path).is_err());
    }

    #[test]
    fn overfitting_one_episode_reduces_segmentation_loss() {
        let mut cfg = tiny_config();
        cfg.trainer.lr = 1e-2;
        let ep = tiny_episode(29);
        let mut state = TrainState::new(cfg, 0, 4).unwrap();
        let first = train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
        let mut last = first.clone();
        for _ in 0..60 {
            last = train_step(&mut state, std::slice::from_ref(&ep)).unwrap();
        }
        assert!(
            last.seg_loss < first.seg_loss,
            "seg loss did not decrease: {} -> {}",
            first.seg_loss,
            last.seg_loss
        );
    }
}
