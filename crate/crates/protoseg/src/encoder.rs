//! Feature encoder: a staged convolutional trunk with per-level linear
//! projections. Configured stage outputs are tapped, projected to a common
//! dimension, resampled to the shallowest tapped resolution and fused by
//! channel concatenation. The momentum twin shares the architecture and is
//! updated by exponential moving average of the online weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels per stage; each stage halves the resolution.
    pub stage_channels: Vec<usize>,
    /// 1-based stage indices whose outputs are tapped for fusion.
    pub taps: Vec<usize>,
    /// Per-level projection dimension d; fused dim D = taps.len() * d.
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            taps: vec![1, 2, 3],
            proj_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("at least one tap required".into()));
        }
        let mut sorted = self.taps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.taps.len() || sorted != self.taps {
            return Err(Error::Config("taps must be strictly increasing".into()));
        }
        if self.taps[0] == 0 || *self.taps.last().unwrap() > self.stage_channels.len() {
            return Err(Error::Config(format!(
                "taps {:?} out of range for {} stages",
                self.taps,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Downsampling factor of the full trunk (stride 2 per stage).
    pub fn total_stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    /// Downsampling factor of the fused feature map (the shallowest tap).
    pub fn feature_stride(&self) -> usize {
        1 << self.taps[0]
    }

    pub fn fused_dim(&self) -> usize {
        self.taps.len() * self.proj_dim
    }
}

/// Weights of one trunk stage: conv 3x3 -> relu -> conv 3x3 -> relu -> pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

/// One-layer projection mapping a tapped stage output to `proj_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub stages: Vec<StageParams>,
    pub projections: Vec<ProjParams>,
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-bound..bound)).collect())
}

impl EncoderParams {
    /// Fan-in-scaled uniform initialization.
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for &cout in &config.stage_channels {
            stages.push(StageParams {
                conv1_w: fan_in_uniform(rng, &[cout, cin, 3, 3], cin * 9),
                conv1_b: fan_in_uniform(rng, &[cout], cin * 9),
                conv2_w: fan_in_uniform(rng, &[cout, cout, 3, 3], cout * 9),
                conv2_b: fan_in_uniform(rng, &[cout], cout * 9),
            });
            cin = cout;
        }
        let projections = config
            .taps
            .iter()
            .map(|&t| {
                let c = config.stage_channels[t - 1];
                ProjParams {
                    w: fan_in_uniform(rng, &[config.proj_dim, c], c),
                    b: fan_in_uniform(rng, &[config.proj_dim], c),
                }
            })
            .collect();
        Ok(EncoderParams { config: config.clone(), stages, projections })
    }

    /// Zero-filled parameters (kept mostly for shape/linearity tests).
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for &cout in &config.stage_channels {
            stages.push(StageParams {
                conv1_w: Tensor::zeros(&[cout, cin, 3, 3]),
                conv1_b: Tensor::zeros(&[cout]),
                conv2_w: Tensor::zeros(&[cout, cout, 3, 3]),
                conv2_b: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let projections = config
            .taps
            .iter()
            .map(|&t| ProjParams {
                w: Tensor::zeros(&[config.proj_dim, config.stage_channels[t - 1]]),
                b: Tensor::zeros(&[config.proj_dim]),
            })
            .collect();
        Ok(EncoderParams { config: config.clone(), stages, projections })
    }

    /// All parameter tensors in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([&s.conv1_w, &s.conv1_b, &s.conv2_w, &s.conv2_b]);
        }
        for p in &self.projections {
            out.extend([&p.w, &p.b]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.conv1_w);
            out.push(&mut s.conv1_b);
            out.push(&mut s.conv2_w);
            out.push(&mut s.conv2_b);
        }
        for p in &mut self.projections {
            out.push(&mut p.w);
            out.push(&mut p.b);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Max elementwise |a - b| across all tensors.
    pub fn max_abs_diff(&self, other: &EncoderParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &EncoderParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Deep copy of the online parameters to seed the momentum encoder.
pub fn init_momentum_encoder(params: &EncoderParams) -> EncoderParams {
    params.clone()
}

/// In-place EMA update: each momentum entry becomes m*old + (1-m)*online.
pub fn momentum_update(
    momentum: &mut EncoderParams,
    online: &EncoderParams,
    m: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("momentum coefficient {m} outside [0,1)")));
    }
    for (dst, src) in momentum.tensors_mut().into_iter().zip(online.tensors()) {
        assert_eq!(dst.shape(), src.shape(), "parameter shape drift");
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = m * *d + (1.0 - m) * s;
        }
    }
    Ok(())
}

/// Spatially fused multi-level features for one image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureStack {
    /// [D, h, w]
    pub values: Tensor,
    /// Stage index each block of `proj_dim` channels came from.
    pub source_levels: Vec<usize>,
    /// Input-to-feature downsampling factor.
    pub spatial_scale: usize,
}

impl FeatureStack {
    pub fn fused_dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Graph handles for one encoder's parameters, in `tensors()` order.
pub struct EncoderVars {
    pub vars: Vec<Var>,
    trainable: bool,
}

impl EncoderVars {
    pub fn trainable(g: &Graph, params: &EncoderParams) -> Self {
        EncoderVars {
            vars: params.tensors().into_iter().map(|t| g.var(t.clone())).collect(),
            trainable: true,
        }
    }

    /// Constants: the whole encoded subgraph is detached from gradients.
    pub fn frozen(g: &Graph, params: &EncoderParams) -> Self {
        EncoderVars {
            vars: params.tensors().into_iter().map(|t| g.constant(t.clone())).collect(),
            trainable: false,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Pull gradients out in `tensors()` order (zeros where no path).
    pub fn collect_gradients(&self, grads: &mut Gradients, params: &EncoderParams) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
            .collect()
    }
}

/// Traced features for one image, plus metadata mirroring [`FeatureStack`].
pub struct TracedFeatures {
    pub var: Var,
    pub source_levels: Vec<usize>,
    pub spatial_scale: usize,
}

/// Run the trunk and fuse the tapped levels on the graph.
pub fn encode(
    g: &Graph,
    vars: &EncoderVars,
    config: &EncoderConfig,
    image: &Tensor,
) -> Result<TracedFeatures> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != config.in_channels {
        return Err(Error::Shape(format!(
            "expected [{}, H, W] image, got {:?}",
            config.in_channels, shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let stride = config.total_stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by total stride {stride}"
        )));
    }

    let mut cur = g.constant(image.clone());
    let mut tapped: Vec<(usize, Var)> = Vec::new();
    for (i, _) in config.stage_channels.iter().enumerate() {
        let base = i * 4;
        let c1 = g.relu(g.conv3x3(cur, vars.vars[base], vars.vars[base + 1]));
        let c2 = g.relu(g.conv3x3(c1, vars.vars[base + 2], vars.vars[base + 3]));
        cur = g.avg_pool2(c2);
        let stage = i + 1;
        if config.taps.contains(&stage) {
            tapped.push((stage, cur));
        }
    }

    let proj_base = config.stage_channels.len() * 4;
    let base_h = h / config.feature_stride();
    let base_w = w / config.feature_stride();
    let mut projected = Vec::new();
    for (ti, &(stage, t)) in tapped.iter().enumerate() {
        let p = g.conv1x1(t, vars.vars[proj_base + 2 * ti], vars.vars[proj_base + 2 * ti + 1]);
        let p = if stage == config.taps[0] { p } else { g.bilinear_resize(p, base_h, base_w) };
        projected.push(p);
    }
    let fused = if projected.len() == 1 { projected[0] } else { g.concat_channels(&projected) };
    Ok(TracedFeatures {
        var: fused,
        source_levels: config.taps.clone(),
        spatial_scale: config.feature_stride(),
    })
}

/// Convenience wrapper: run [`encode`] with frozen parameters and return
/// plain features (used for the momentum branch and evaluation).
pub fn encode_plain(params: &EncoderParams, image: &Tensor) -> Result<FeatureStack> {
    let g = Graph::new();
    let vars = EncoderVars::frozen(&g, params);
    let traced = encode(&g, &vars, &params.config, image)?;
    Ok(FeatureStack {
        values: g.value(traced.var),
        source_levels: traced.source_levels,
        spatial_scale: traced.spatial_scale,
    })
}
