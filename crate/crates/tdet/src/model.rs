//! Detector architecture: a shared temporal-convolution backbone feeding a
//! proposal head (per-anchor objectness and offsets at every feature-map
//! location) and a classification head (per-region class posterior and
//! class-specific offsets after region pooling).
//!
//! Parameters live in a [`ParameterStore`] in a fixed order so that
//! checkpoints, gradient updates, and graph leaves all agree. A [`Session`]
//! copies the parameters into a fresh [`Graph`] as leaves and assembles the
//! forward computation; the element type is generic so the exact same
//! assembly can run in `f64` for gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::roipool::PoolGrid;

/// Hyperparameters fixing every tensor shape in the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of the input feature video.
    pub in_channels: usize,
    /// Output channels of the three backbone stages.
    pub stage_channels: [usize; 3],
    /// Channels of the proposal head trunk.
    pub head_channels: usize,
    /// Width of the two fully connected layers in the classification head.
    pub fc_width: usize,
    /// Number of anchor scales scored at each feature-map location.
    pub num_scales: usize,
    /// Number of activity classes, background excluded.
    pub num_classes: usize,
    /// Region pooling lattice.
    pub grid: PoolGrid,
    /// Dilation factors of extra 3-tap convolutions appended after the
    /// third stage, at the /8 resolution. Each factor `d` widens the
    /// temporal receptive field by `16 * d` frames, letting one feature-map
    /// location see across the longest anchors; without them the field
    /// spans about 31 frames. Empty disables the extra stage.
    pub dilations: Vec<usize>,
}

impl ModelConfig {
    pub fn new(in_channels: usize, num_classes: usize, num_scales: usize) -> Result<Self> {
        let cfg = ModelConfig {
            in_channels,
            stage_channels: [16, 24, 32],
            head_channels: 32,
            fc_width: 64,
            num_scales,
            num_classes,
            grid: PoolGrid::new(1, 4, 4)?,
            dilations: vec![2, 4, 8],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.head_channels,
            self.fc_width,
            self.num_scales,
            self.num_classes,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::InvalidConfig(
                "all model dimensions must be positive".into(),
            ));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("dilations must be positive".into()));
        }
        Ok(())
    }

    /// Downsampling factor between input frames and feature-map units
    /// (three pool-by-two stages).
    pub const fn stride(&self) -> usize {
        8
    }

    /// Feature-map length for a buffer of `frames` frames.
    pub fn feature_len(&self, frames: usize) -> Result<usize> {
        if frames == 0 || frames % self.stride() != 0 {
            return Err(Error::InvalidConfig(format!(
                "buffer length {frames} must be a positive multiple of {}",
                self.stride()
            )));
        }
        Ok(frames / self.stride())
    }

    /// Flattened input width of the first fully connected layer.
    pub fn fc_input(&self) -> usize {
        self.stage_channels[2] * self.grid.cells()
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [s1, s2, s3] = self.stage_channels;
        let k2 = 2 * self.num_scales;
        let cp1 = self.num_classes + 1;
        let mut shapes: Vec<(String, Vec<usize>)> = vec![
            ("backbone.conv1.w".into(), vec![s1, self.in_channels, 3]),
            ("backbone.conv1.b".into(), vec![s1]),
            ("backbone.conv2.w".into(), vec![s2, s1, 3]),
            ("backbone.conv2.b".into(), vec![s2]),
            ("backbone.conv3.w".into(), vec![s3, s2, 3]),
            ("backbone.conv3.b".into(), vec![s3]),
        ];
        for i in 0..self.dilations.len() {
            shapes.push((format!("backbone.conv{}.w", 4 + i), vec![s3, s3, 3]));
            shapes.push((format!("backbone.conv{}.b", 4 + i), vec![s3]));
        }
        shapes.extend([
            ("proposal.trunk.w".into(), vec![self.head_channels, s3, 3]),
            ("proposal.trunk.b".into(), vec![self.head_channels]),
            ("proposal.score.w".into(), vec![k2, self.head_channels, 1]),
            ("proposal.score.b".into(), vec![k2]),
            ("proposal.offset.w".into(), vec![k2, self.head_channels, 1]),
            ("proposal.offset.b".into(), vec![k2]),
            ("classifier.fc1.w".into(), vec![self.fc_width, self.fc_input()]),
            ("classifier.fc1.b".into(), vec![self.fc_width]),
            ("classifier.fc2.w".into(), vec![self.fc_width, self.fc_width]),
            ("classifier.fc2.b".into(), vec![self.fc_width]),
            ("classifier.score.w".into(), vec![cp1, self.fc_width]),
            ("classifier.score.b".into(), vec![cp1]),
            ("classifier.offset.w".into(), vec![2 * cp1, self.fc_width]),
            ("classifier.offset.b".into(), vec![2 * cp1]),
        ]);
        shapes
    }

    /// `(weight, bias)` store indices of the `i`-th dilated backbone conv.
    fn p_dilated(&self, i: usize) -> (usize, usize) {
        (P_CONV3_B + 1 + 2 * i, P_CONV3_B + 2 + 2 * i)
    }

    fn head_base(&self) -> usize {
        P_CONV3_B + 1 + 2 * self.dilations.len()
    }

    fn p_trunk(&self) -> (usize, usize) {
        (self.head_base(), self.head_base() + 1)
    }

    fn p_score(&self) -> (usize, usize) {
        (self.head_base() + 2, self.head_base() + 3)
    }

    fn p_offset(&self) -> (usize, usize) {
        (self.head_base() + 4, self.head_base() + 5)
    }

    fn p_fc1(&self) -> (usize, usize) {
        (self.head_base() + 6, self.head_base() + 7)
    }

    fn p_fc2(&self) -> (usize, usize) {
        (self.head_base() + 8, self.head_base() + 9)
    }

    fn p_cls_score(&self) -> (usize, usize) {
        (self.head_base() + 10, self.head_base() + 11)
    }

    fn p_cls_offset(&self) -> (usize, usize) {
        (self.head_base() + 12, self.head_base() + 13)
    }
}

// Indices into the canonical parameter order; entries after the backbone
// stages depend on the configured dilation count and live on [`ModelConfig`].
const P_CONV1_W: usize = 0;
const P_CONV1_B: usize = 1;
const P_CONV2_W: usize = 2;
const P_CONV2_B: usize = 3;
const P_CONV3_W: usize = 4;
const P_CONV3_B: usize = 5;

/// Named `f32` parameter tensors in canonical order.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ParameterStore {
    /// Random initialization: weights are uniform in the symmetric interval
    /// with bound `sqrt(6 / (fan_in + fan_out))`, biases are zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, dims) in config.shapes() {
            let n: usize = dims.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0f32; n]
            } else {
                let (fan_in, fan_out) = match dims.len() {
                    3 => (dims[1] * dims[2], dims[0] * dims[2]),
                    2 => (dims[1], dims[0]),
                    _ => unreachable!("weights are rank 2 or 3"),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n)
                    .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
                    .collect()
            };
            entries.push((name, Tensor::from_vec(&dims, data)?));
        }
        Ok(ParameterStore { entries })
    }

    /// Rebuilds a store from named tensors, enforcing the canonical names
    /// and shapes for `config`.
    pub fn from_entries(
        config: &ModelConfig,
        entries: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self> {
        let expected = config.shapes();
        if entries.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, tensor), (want_name, want_dims)) in entries.iter().zip(&expected) {
            if name != want_name {
                return Err(Error::Format(format!(
                    "parameter {name:?} where {want_name:?} was expected"
                )));
            }
            if tensor.dims() != want_dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: want_dims.clone(),
                    got: tensor.dims().to_vec(),
                });
            }
        }
        Ok(ParameterStore { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, index: usize) -> &Tensor<f32> {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f32> {
        &mut self.entries[index].1
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// The detector: configuration plus current parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterStore::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        // from_entries is the validating path; re-run it for safety.
        let params = ParameterStore::from_entries(&config, params.entries.clone())?;
        config.validate()?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Opens a session: a fresh graph holding one leaf per parameter.
    pub fn session<T: Real>(&self, trainable: bool) -> Session<T> {
        let mut graph = Graph::new();
        let mut param_ids = Vec::with_capacity(self.params.len());
        for (_, tensor) in &self.params.entries {
            let data: Vec<T> = tensor
                .data()
                .iter()
                .map(|&v| T::from_f64(v as f64))
                .collect();
            let t = Tensor::from_vec(tensor.dims(), data).expect("store shapes are consistent");
            param_ids.push(graph.leaf(t, trainable));
        }
        Session {
            graph,
            param_ids,
            config: self.config.clone(),
        }
    }

    /// Gradient step: `p -= lr * dp` for every parameter, using the
    /// gradients accumulated in `session`.
    pub fn apply_gradients<T: Real>(&mut self, session: &Session<T>, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidConfig(format!("bad learning rate {lr}")));
        }
        for (i, &id) in session.param_ids.iter().enumerate() {
            if let Some(grad) = session.graph.grad(id) {
                let tensor = self.params.tensor_mut(i);
                for (p, g) in tensor.data_mut().iter_mut().zip(grad) {
                    let step = lr * g.as_f64();
                    if !step.is_finite() {
                        return Err(Error::NonFinite("parameter update"));
                    }
                    *p -= step as f32;
                }
            }
        }
        Ok(())
    }
}

/// Flat indices of the `(center, log-length)` or `(background, activity)`
/// channel pair for anchor scale `k` at feature-map location `j`, inside a
/// `[2 * num_scales, num_locations]` head output.
pub fn pair_indices(scale_idx: usize, location: usize, num_locations: usize) -> [usize; 2] {
    [
        (2 * scale_idx) * num_locations + location,
        (2 * scale_idx + 1) * num_locations + location,
    ]
}

/// Flat indices of the offset pair predicted for `class_id` inside a
/// `[2 * (num_classes + 1)]` regression output.
pub fn class_offset_slots(class_id: u32) -> [usize; 2] {
    [2 * class_id as usize, 2 * class_id as usize + 1]
}

/// Per-region output nodes of the classification head.
#[derive(Clone, Copy, Debug)]
pub struct RegionOutput {
    /// Logits over `num_classes + 1` classes, background first.
    pub class_logits: NodeId,
    /// Offset pairs for every class: `[2 * (num_classes + 1)]`.
    pub offsets: NodeId,
}

/// A computation graph wired with the model's parameters.
pub struct Session<T: Real> {
    pub graph: Graph<T>,
    param_ids: Vec<NodeId>,
    config: ModelConfig,
}

impl<T: Real> Session<T> {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.param_ids
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Adds the input video (`[in_channels, frames, h, w]`) as a frozen leaf.
    pub fn input(&mut self, video: Tensor<T>) -> Result<NodeId> {
        let dims = video.dims();
        if dims.len() != 4 || dims[0] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.in_channels, 0, 0, 0],
                got: dims.to_vec(),
            });
        }
        self.config.feature_len(dims[1])?;
        Ok(self.graph.leaf(video, false))
    }

    /// Backbone: three (conv3, relu, pool2) stages reaching /8, then the
    /// configured dilated 3-tap convolutions at that resolution. Output is
    /// `[stage_channels[2], frames / 8, h, w]`.
    pub fn backbone(&mut self, input: NodeId) -> Result<NodeId> {
        let stages = [
            (P_CONV1_W, P_CONV1_B),
            (P_CONV2_W, P_CONV2_B),
            (P_CONV3_W, P_CONV3_B),
        ];
        let mut x = input;
        for (w, b) in stages {
            x = self
                .graph
                .temporal_conv(x, self.param_ids[w], self.param_ids[b])?;
            x = self.graph.relu(x);
            x = self.graph.temporal_max_pool(x, 2)?;
        }
        for (i, &d) in self.config.dilations.clone().iter().enumerate() {
            let (w, b) = self.config.p_dilated(i);
            x = self.graph.temporal_conv_dilated(
                x,
                self.param_ids[w],
                self.param_ids[b],
                d,
            )?;
            x = self.graph.relu(x);
        }
        Ok(x)
    }

    /// Proposal head on backbone features: trunk conv and ReLU, spatial
    /// collapse, then two single-tap convs. Returns `(scores, offsets)`,
    /// both `[2 * num_scales, num_locations]`. Score channel pairs are
    /// `(background, activity)` logits per scale; offset channel pairs are
    /// `(center, log-length)` deltas per scale.
    pub fn proposal_head(&mut self, features: NodeId) -> Result<(NodeId, NodeId)> {
        let (tw, tb) = self.config.p_trunk();
        let (sw, sb) = self.config.p_score();
        let (ow, ob) = self.config.p_offset();
        let t = self
            .graph
            .temporal_conv(features, self.param_ids[tw], self.param_ids[tb])?;
        let t = self.graph.relu(t);
        let t = self.graph.spatial_max_pool(t)?;
        let scores = self
            .graph
            .temporal_conv(t, self.param_ids[sw], self.param_ids[sb])?;
        let offsets = self
            .graph
            .temporal_conv(t, self.param_ids[ow], self.param_ids[ob])?;
        Ok((scores, offsets))
    }

    /// Classification head: pools each region out of the backbone features,
    /// then runs the shared fully connected stack per region.
    pub fn classification_head(
        &mut self,
        features: NodeId,
        regions: &[(usize, usize)],
    ) -> Result<Vec<RegionOutput>> {
        let pooled = self.graph.roi_pool(features, regions, self.config.grid)?;
        let block = self.config.fc_input();
        let (f1w, f1b) = self.config.p_fc1();
        let (f2w, f2b) = self.config.p_fc2();
        let (csw, csb) = self.config.p_cls_score();
        let (cow, cob) = self.config.p_cls_offset();
        let mut outputs = Vec::with_capacity(regions.len());
        for ri in 0..regions.len() {
            let indices: Vec<usize> = (ri * block..(ri + 1) * block).collect();
            let x = self.graph.gather(pooled, indices)?;
            let h1 = self
                .graph
                .linear(x, self.param_ids[f1w], self.param_ids[f1b])?;
            let h1 = self.graph.relu(h1);
            let h2 = self
                .graph
                .linear(h1, self.param_ids[f2w], self.param_ids[f2b])?;
            let h2 = self.graph.relu(h2);
            let class_logits = self.graph.linear(
                h2,
                self.param_ids[csw],
                self.param_ids[csb],
            )?;
            let offsets = self.graph.linear(
                h2,
                self.param_ids[cow],
                self.param_ids[cob],
            )?;
            outputs.push(RegionOutput {
                class_logits,
                offsets,
            });
        }
        Ok(outputs)
    }
}
