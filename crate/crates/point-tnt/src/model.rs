//! The two-branch attention model and its naive full-attention baseline.
//!
//! Pipeline (per cloud): normalize -> farthest point sampling -> k-NN ->
//! edge features -> linear embeddings, then L stages of
//!
//! 1. local block: a shared transformer block applied independently to each
//!    anchor's [k, d_edge] patch of edge features,
//! 2. fusion: max/mean aggregation of each patch, projected and added to the
//!    anchor features,
//! 3. global block: a transformer block over the M anchor rows.
//!
//! The per-stage anchor features are concatenated, mixed by a single linear
//! layer with GELU, and aggregated into the cloud feature `z` of width
//! `2 * d_feature`, which feeds either the classifier or the descriptor head.
//!
//! The baseline variant uses every point as an anchor and has no local
//! branch or fusion; it is the quadratic-attention reference the split
//! architecture is measured against.

use serde::{Deserialize, Serialize};

use crate::attention::{
    transformer_block_batched, BranchTag, CapturedProbs, TransformerBlockParams,
};
use crate::geometry::{build_subgraph, normalize, AnchorSubgraph, PointCloud};
use crate::tensor::norm::{BatchNorm, Mode};
use crate::tensor::{flops, io, xavier_uniform, Element, ParamSet, Tensor};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two-branch local/global attention over sampled anchors.
    PointTnT,
    /// All points as anchors, no neighbours, global branch only.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Matching,
}

/// Every knob of the model. Serialized as the checkpoint sidecar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointTnTConfig {
    #[serde(default = "defaults::variant")]
    pub variant: Variant,
    #[serde(default = "defaults::task")]
    pub task: Task,
    /// Anchor count M (ignored by the baseline, which anchors every point).
    #[serde(default = "defaults::anchors")]
    pub anchors: usize,
    /// Neighbours per anchor k.
    #[serde(default = "defaults::neighbors")]
    pub neighbors: usize,
    /// Anchor feature width d_Y.
    #[serde(default = "defaults::anchor_width")]
    pub anchor_width: usize,
    /// Edge feature width d_E.
    #[serde(default = "defaults::edge_width")]
    pub edge_width: usize,
    /// Global feature width d_f; the cloud feature z has length 2 d_f.
    #[serde(default = "defaults::feature_width")]
    pub feature_width: usize,
    /// Stage count L.
    #[serde(default = "defaults::stages")]
    pub stages: usize,
    /// Attention heads h (both branches).
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    /// Block MLP hidden width as a multiple of the block width.
    #[serde(default = "defaults::expansion")]
    pub expansion: usize,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::descriptor_dim")]
    pub descriptor_dim: usize,
    /// Dropout in the classifier head.
    #[serde(default = "defaults::dropout_rate")]
    pub dropout_rate: f64,
    /// Attention ablation switches (MSA sublayers on/off per branch).
    #[serde(default = "defaults::enabled")]
    pub local_attention: bool,
    #[serde(default = "defaults::enabled")]
    pub global_attention: bool,
}

mod defaults {
    use super::{Task, Variant};
    pub fn variant() -> Variant {
        Variant::PointTnT
    }
    pub fn task() -> Task {
        Task::Classification
    }
    pub fn anchors() -> usize {
        192
    }
    pub fn neighbors() -> usize {
        20
    }
    pub fn anchor_width() -> usize {
        192
    }
    pub fn edge_width() -> usize {
        32
    }
    pub fn feature_width() -> usize {
        1024
    }
    pub fn stages() -> usize {
        4
    }
    pub fn heads() -> usize {
        3
    }
    pub fn expansion() -> usize {
        2
    }
    pub fn num_classes() -> usize {
        15
    }
    pub fn descriptor_dim() -> usize {
        32
    }
    pub fn dropout_rate() -> f64 {
        0.5
    }
    pub fn enabled() -> bool {
        true
    }
}

impl Default for PointTnTConfig {
    fn default() -> Self {
        PointTnTConfig {
            variant: defaults::variant(),
            task: defaults::task(),
            anchors: defaults::anchors(),
            neighbors: defaults::neighbors(),
            anchor_width: defaults::anchor_width(),
            edge_width: defaults::edge_width(),
            feature_width: defaults::feature_width(),
            stages: defaults::stages(),
            heads: defaults::heads(),
            expansion: defaults::expansion(),
            num_classes: defaults::num_classes(),
            descriptor_dim: defaults::descriptor_dim(),
            dropout_rate: defaults::dropout_rate(),
            local_attention: true,
            global_attention: true,
        }
    }
}

impl PointTnTConfig {
    /// The small configuration used by the desk-scale experiments.
    pub fn small() -> Self {
        PointTnTConfig {
            anchors: 48,
            neighbors: 10,
            anchor_width: 64,
            edge_width: 16,
            feature_width: 128,
            stages: 2,
            heads: 2,
            num_classes: 8,
            ..Default::default()
        }
    }

    /// Head-count sweep variant: h heads with anchor width 64 h.
    pub fn with_heads(h: usize) -> Self {
        PointTnTConfig {
            heads: h,
            anchor_width: 64 * h,
            ..Default::default()
        }
    }

    pub fn baseline(mut self) -> Self {
        self.variant = Variant::Baseline;
        self
    }

    pub fn for_task(mut self, task: Task) -> Self {
        self.task = task;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.anchors >= 1
            && self.neighbors >= 1
            && self.stages >= 1
            && self.heads >= 1
            && self.expansion >= 1
            && self.anchor_width >= self.heads
            && self.edge_width >= self.heads
            && self.feature_width >= self.heads;
        if !ok {
            return Err(Error::Argument(format!("invalid model config: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Argument(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_output_width(&self) -> usize {
        match self.task {
            Task::Classification => self.num_classes,
            Task::Matching => self.descriptor_dim,
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PointTnTConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Classification head: 2 d_f -> 512 -> 256 -> classes, with batch
/// normalization, GELU and dropout in each hidden layer.
pub struct ClassifyHead<E: Element> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub bn1: BatchNorm<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    pub bn2: BatchNorm<E>,
    pub w3: Tensor<E>,
    pub b3: Tensor<E>,
    pub dropout_rate: f64,
}

pub const HEAD_HIDDEN_1: usize = 512;
pub const HEAD_HIDDEN_2: usize = 256;

impl<E: Element> ClassifyHead<E> {
    fn init(rng: &mut impl rand::RngCore, in_width: usize, classes: usize, dropout: f64) -> Self {
        ClassifyHead {
            w1: xavier_uniform(rng, in_width, HEAD_HIDDEN_1),
            b1: Tensor::zeros(&[HEAD_HIDDEN_1]),
            bn1: BatchNorm::new(HEAD_HIDDEN_1),
            w2: xavier_uniform(rng, HEAD_HIDDEN_1, HEAD_HIDDEN_2),
            b2: Tensor::zeros(&[HEAD_HIDDEN_2]),
            bn2: BatchNorm::new(HEAD_HIDDEN_2),
            w3: xavier_uniform(rng, HEAD_HIDDEN_2, classes),
            b3: Tensor::zeros(&[classes]),
            dropout_rate: dropout,
        }
    }

    fn forward(
        &self,
        z: &Tensor<E>,
        mode: Mode,
        rng: &mut impl rand::RngCore,
    ) -> Result<Tensor<E>> {
        let h1 = z.matmul(&self.w1)?.add_bias(&self.b1)?;
        let h1 = self
            .bn1
            .forward(&h1, mode)?
            .gelu()
            .dropout(self.dropout_rate, mode, rng)?;
        let h2 = h1.matmul(&self.w2)?.add_bias(&self.b2)?;
        let h2 = self
            .bn2
            .forward(&h2, mode)?
            .gelu()
            .dropout(self.dropout_rate, mode, rng)?;
        h2.matmul(&self.w3)?.add_bias(&self.b3)
    }

    fn collect(&self, params: &mut ParamSet<E>, prefix: &str) {
        params.push(format!("{prefix}.w1"), self.w1.clone());
        params.push(format!("{prefix}.b1"), self.b1.clone());
        params.push(format!("{prefix}.bn1.gain"), self.bn1.gain.clone());
        params.push(format!("{prefix}.bn1.bias"), self.bn1.bias.clone());
        params.push(format!("{prefix}.w2"), self.w2.clone());
        params.push(format!("{prefix}.b2"), self.b2.clone());
        params.push(format!("{prefix}.bn2.gain"), self.bn2.gain.clone());
        params.push(format!("{prefix}.bn2.bias"), self.bn2.bias.clone());
        params.push(format!("{prefix}.w3"), self.w3.clone());
        params.push(format!("{prefix}.b3"), self.b3.clone());
    }
}

/// Descriptor head: linear map to `descriptor_dim` followed by L2
/// normalization onto the unit sphere.
pub struct DescribeHead<E: Element> {
    pub w: Tensor<E>,
}

pub const DESCRIPTOR_NORM_EPS: f64 = 1e-12;

impl<E: Element> DescribeHead<E> {
    fn init(rng: &mut impl rand::RngCore, in_width: usize, out: usize) -> Self {
        DescribeHead {
            w: xavier_uniform(rng, in_width, out),
        }
    }

    fn forward(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        z.matmul(&self.w)?.l2_normalize_rows(DESCRIPTOR_NORM_EPS)
    }

    fn collect(&self, params: &mut ParamSet<E>, prefix: &str) {
        params.push(format!("{prefix}.w"), self.w.clone());
    }
}

pub enum TaskHead<E: Element> {
    Classify(ClassifyHead<E>),
    Describe(DescribeHead<E>),
}

/// All weights of the model, in a fixed construction order.
pub struct PointTnT<E: Element> {
    pub config: PointTnTConfig,
    /// Anchor coordinate embedding, 3 x d_anchor.
    pub wy: Tensor<E>,
    /// Edge embedding, 3 x d_edge (absent in the baseline).
    pub we: Option<Tensor<E>>,
    pub local_blocks: Vec<TransformerBlockParams<E>>,
    pub global_blocks: Vec<TransformerBlockParams<E>>,
    /// Per-stage fusion projections, 2 d_edge x d_anchor.
    pub fusion: Vec<Tensor<E>>,
    /// Single-layer feature MLP: (L d_anchor) x d_feature plus bias.
    pub feature_w: Tensor<E>,
    pub feature_b: Tensor<E>,
    pub head: TaskHead<E>,
}

impl<E: Element> PointTnT<E> {
    pub fn init(config: PointTnTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::from_seed(rng::split(seed, 0xC0FFEE));
        let is_tnt = config.variant == Variant::PointTnT;
        let wy = xavier_uniform(&mut r, 3, config.anchor_width);
        let we = is_tnt.then(|| xavier_uniform(&mut r, 3, config.edge_width));
        let mut local_blocks = Vec::new();
        let mut fusion = Vec::new();
        if is_tnt {
            for _ in 0..config.stages {
                let block = TransformerBlockParams::init(
                    &mut r,
                    config.edge_width,
                    config.heads,
                    config.expansion,
                );
                block.msa_enabled.set(config.local_attention);
                local_blocks.push(block);
            }
            for _ in 0..config.stages {
                fusion.push(xavier_uniform(
                    &mut r,
                    2 * config.edge_width,
                    config.anchor_width,
                ));
            }
        }
        let mut global_blocks = Vec::new();
        for _ in 0..config.stages {
            let block = TransformerBlockParams::init(
                &mut r,
                config.anchor_width,
                config.heads,
                config.expansion,
            );
            block.msa_enabled.set(config.global_attention);
            global_blocks.push(block);
        }
        let feature_in = config.stages * config.anchor_width;
        let feature_w = xavier_uniform(&mut r, feature_in, config.feature_width);
        let feature_b = Tensor::zeros(&[config.feature_width]);
        let z_width = 2 * config.feature_width;
        let head = match config.task {
            Task::Classification => TaskHead::Classify(ClassifyHead::init(
                &mut r,
                z_width,
                config.num_classes,
                config.dropout_rate,
            )),
            Task::Matching => TaskHead::Describe(DescribeHead::init(
                &mut r,
                z_width,
                config.descriptor_dim,
            )),
        };
        Ok(PointTnT {
            config,
            wy,
            we,
            local_blocks,
            global_blocks,
            fusion,
            feature_w,
            feature_b,
            head,
        })
    }

    /// Flat parameter list; names are unique and the order is fixed.
    pub fn param_set(&self) -> ParamSet<E> {
        let mut params = ParamSet::new();
        params.push("embed.wy", self.wy.clone());
        if let Some(we) = &self.we {
            params.push("embed.we", we.clone());
        }
        for (i, block) in self.local_blocks.iter().enumerate() {
            block.collect(&mut params, &format!("local.{i}"));
        }
        for (i, w) in self.fusion.iter().enumerate() {
            params.push(format!("fuse.{i}.w"), w.clone());
        }
        for (i, block) in self.global_blocks.iter().enumerate() {
            block.collect(&mut params, &format!("global.{i}"));
        }
        params.push("feature.w", self.feature_w.clone());
        params.push("feature.b", self.feature_b.clone());
        match &self.head {
            TaskHead::Classify(h) => h.collect(&mut params, "head"),
            TaskHead::Describe(h) => h.collect(&mut params, "head"),
        }
        params
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Vec<usize>, Vec<E>)> {
        match &self.head {
            TaskHead::Classify(h) => vec![
                (
                    "head.bn1.running_mean".into(),
                    vec![HEAD_HIDDEN_1],
                    h.bn1.running_mean.borrow().clone(),
                ),
                (
                    "head.bn1.running_var".into(),
                    vec![HEAD_HIDDEN_1],
                    h.bn1.running_var.borrow().clone(),
                ),
                (
                    "head.bn2.running_mean".into(),
                    vec![HEAD_HIDDEN_2],
                    h.bn2.running_mean.borrow().clone(),
                ),
                (
                    "head.bn2.running_var".into(),
                    vec![HEAD_HIDDEN_2],
                    h.bn2.running_var.borrow().clone(),
                ),
            ],
            TaskHead::Describe(_) => Vec::new(),
        }
    }

    fn restore_buffers(&self, entries: &[(String, Vec<usize>, Vec<E>)]) -> Result<()> {
        if let TaskHead::Classify(h) = &self.head {
            for (name, _, data) in entries {
                match name.as_str() {
                    "head.bn1.running_mean" => *h.bn1.running_mean.borrow_mut() = data.clone(),
                    "head.bn1.running_var" => *h.bn1.running_var.borrow_mut() = data.clone(),
                    "head.bn2.running_mean" => *h.bn2.running_mean.borrow_mut() = data.clone(),
                    "head.bn2.running_var" => *h.bn2.running_var.borrow_mut() = data.clone(),
                    other => {
                        return Err(Error::Format(format!("unknown buffer {other}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes `<path>` (binary checkpoint: parameters then buffers) and
    /// `<path>.json` (the config sidecar).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut entries = self.param_set().snapshot();
        entries.extend(self.buffers());
        io::save_checkpoint(path, &entries)?;
        self.config
            .to_json_file(&sidecar_path(path))?;
        Ok(())
    }

    /// Loads a checkpoint written by [`PointTnT::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let config = PointTnTConfig::from_json_file(&sidecar_path(path))?;
        let model = PointTnT::init(config, 0)?;
        let entries = io::load_checkpoint::<E>(path)?;
        let n_params = model.param_set().len();
        if entries.len() < n_params {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model needs {}",
                entries.len(),
                n_params
            )));
        }
        let (params, buffers) = entries.split_at(n_params);
        model.param_set().restore(&params.to_vec())?;
        model.restore_buffers(buffers)?;
        Ok(model)
    }
}

fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Permutation-invariant aggregation: column-wise max concatenated with
/// column-wise mean. `[n, d] -> [2 d]`.
pub fn aggregate<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "aggregate expects [n, d], got {s:?}"
        )));
    }
    let mx = x.reduce_max(0)?;
    let mean = x.reduce_mean(0)?;
    Tensor::concat_last(&[mx, mean])
}

/// Batched aggregation over the row axis: `[B, n, d] -> [B, 2 d]`.
pub fn aggregate_batched<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "aggregate_batched expects [B, n, d], got {s:?}"
        )));
    }
    let mx = x.reduce_max(1)?;
    let mean = x.reduce_mean(1)?;
    Tensor::concat_last(&[mx, mean])
}

/// Linear embeddings of anchors and edges:
/// `([B*M, 3] @ wy, [B*M*k, 3] @ we)` reshaped to `[B, M, d_Y]` and
/// `[B*M, k, d_E]`.
pub fn embed<E: Element>(
    anchors: &Tensor<E>,
    edges: &Tensor<E>,
    wy: &Tensor<E>,
    we: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let _g = flops::scope("embed");
    let sa = anchors.shape(); // [B, M, 3]
    let se = edges.shape(); // [B*M, k, 3]
    let (b, m) = (sa[0], sa[1]);
    let k = se[1];
    let y0 = anchors
        .reshape(&[b * m, 3])?
        .matmul(wy)?
        .reshape(&[b, m, wy.shape()[1]])?;
    let e0 = edges
        .reshape(&[b * m * k, 3])?
        .matmul(we)?
        .reshape(&[b * m, k, we.shape()[1]])?;
    Ok((y0, e0))
}

/// One local stage: the shared block applied to every [k, d_E] patch.
pub fn local_stage<E: Element>(
    edges: &Tensor<E>,
    block: &TransformerBlockParams<E>,
    capture: Option<&mut Option<CapturedProbs<E>>>,
) -> Result<Tensor<E>> {
    let _g = flops::scope("local");
    transformer_block_batched(edges, block, capture)
}

/// Fusion: aggregate each patch of `edges_l` ([B*M, k, d_E]) to [B*M, 2 d_E],
/// project with `w_fuse` and add to the anchor features `y` ([B, M, d_Y]).
/// Returns the fused anchors and the aggregated-edge matrix.
pub fn fuse<E: Element>(
    y: &Tensor<E>,
    edges_l: &Tensor<E>,
    w_fuse: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let _g = flops::scope("fuse");
    let sy = y.shape();
    let (b, m, dy) = (sy[0], sy[1], sy[2]);
    let agg = {
        let _g = flops::scope("agg");
        aggregate_batched(edges_l)?
    };
    let proj = {
        let _g = flops::scope("proj");
        agg.matmul(w_fuse)?.reshape(&[b, m, dy])?
    };
    let _g2 = flops::scope("residual");
    Ok((y.add(&proj)?, agg))
}

/// One global stage: a block over the M anchor rows.
pub fn global_stage<E: Element>(
    y: &Tensor<E>,
    block: &TransformerBlockParams<E>,
    capture: Option<&mut Option<CapturedProbs<E>>>,
) -> Result<Tensor<E>> {
    let _g = flops::scope("global");
    transformer_block_batched(y, block, capture)
}

/// What the forward pass should additionally record.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
    pub capture_trace: bool,
}

/// Values recorded during a forward pass for inspection and export.
pub struct ForwardTrace<E: Element> {
    /// One subgraph per batch element (empty for the baseline).
    pub subgraphs: Vec<AnchorSubgraph<E>>,
    /// Per stage: anchor features Y_l as flat [B, M, d_Y] values.
    pub stage_anchor_features: Vec<Vec<E>>,
    /// Per stage: aggregated edges as flat [B*M, 2 d_E] values.
    pub stage_edge_aggregates: Vec<Vec<E>>,
    /// Attention maps, when captured: every (stage, branch, batch element).
    pub attention: Vec<crate::attention::AttentionMap<E>>,
    /// The cloud feature z, flat [B, 2 d_f].
    pub z: Vec<E>,
    /// Head output values, flat [B, classes or descriptor_dim].
    pub head: Vec<E>,
}

/// Output of a batched forward pass. `head` and `z` are graph tensors, so
/// losses built on them backpropagate into the parameters.
pub struct BatchOutput<E: Element> {
    pub head: Tensor<E>,
    pub z: Tensor<E>,
    pub trace: ForwardTrace<E>,
}

impl<E: Element> PointTnT<E> {
    /// Forward over a batch of clouds (all with the same point count).
    pub fn forward_batch(
        &self,
        clouds: &[PointCloud<E>],
        mode: Mode,
        rng: &mut impl rand::RngCore,
        options: ForwardOptions,
    ) -> Result<BatchOutput<E>> {
        if clouds.is_empty() {
            return Err(Error::Argument("forward on an empty batch".into()));
        }
        let n = clouds[0].len();
        if clouds.iter().any(|c| c.len() != n) {
            return Err(Error::Argument(
                "batched clouds must share a point count (pad or sample upstream)".into(),
            ));
        }
        match self.config.variant {
            Variant::PointTnT => self.forward_tnt(clouds, mode, rng, options),
            Variant::Baseline => self.forward_baseline(clouds, mode, rng, options),
        }
    }

    /// Single-cloud wrapper around [`PointTnT::forward_batch`].
    pub fn forward(
        &self,
        cloud: &PointCloud<E>,
        mode: Mode,
        rng: &mut impl rand::RngCore,
        options: ForwardOptions,
    ) -> Result<BatchOutput<E>> {
        self.forward_batch(std::slice::from_ref(cloud), mode, rng, options)
    }

    fn forward_tnt(
        &self,
        clouds: &[PointCloud<E>],
        mode: Mode,
        rng: &mut impl rand::RngCore,
        options: ForwardOptions,
    ) -> Result<BatchOutput<E>> {
        let cfg = &self.config;
        let b = clouds.len();
        let (m, k) = (cfg.anchors, cfg.neighbors);

        // Geometry per cloud, then stacked into graph leaves.
        let mut anchor_data = Vec::with_capacity(b * m * 3);
        let mut edge_data = Vec::with_capacity(b * m * k * 3);
        let mut subgraphs = Vec::with_capacity(b);
        for cloud in clouds {
            let normed = normalize(cloud)?;
            let sub = build_subgraph(&normed, m, k)?;
            for &a in &sub.anchor_indices {
                anchor_data.extend_from_slice(&normed.points[a]);
            }
            edge_data.extend_from_slice(&sub.edge_features);
            subgraphs.push(sub);
        }
        let anchors = Tensor::from_vec(&[b, m, 3], anchor_data)?;
        let edges = Tensor::from_vec(&[b * m, k, 3], edge_data)?;

        let we = self.we.as_ref().expect("tnt variant has edge embedding");
        let (mut y, mut e) = embed(&anchors, &edges, &self.wy, we)?;

        let mut trace = ForwardTrace {
            subgraphs,
            stage_anchor_features: Vec::new(),
            stage_edge_aggregates: Vec::new(),
            attention: Vec::new(),
            z: Vec::new(),
            head: Vec::new(),
        };

        let mut stage_outputs = Vec::with_capacity(cfg.stages);
        for l in 0..cfg.stages {
            let mut local_probs = options.capture_attention.then_some(None);
            e = local_stage(&e, &self.local_blocks[l], local_probs.as_mut())?;
            if let Some(Some(captured)) = local_probs {
                for bi in 0..b {
                    for pi in 0..m {
                        trace.attention.push(captured.map_for(
                            bi * m + pi,
                            l,
                            BranchTag::LocalPatch(pi),
                        ));
                    }
                }
            }
            let (fused, agg) = fuse(&y, &e, &self.fusion[l])?;
            let mut global_probs = options.capture_attention.then_some(None);
            y = global_stage(&fused, &self.global_blocks[l], global_probs.as_mut())?;
            if let Some(Some(captured)) = global_probs {
                for bi in 0..b {
                    trace
                        .attention
                        .push(captured.map_for(bi, l, BranchTag::Global));
                }
            }
            if options.capture_trace {
                trace.stage_anchor_features.push(y.value());
                trace.stage_edge_aggregates.push(agg.value());
            }
            stage_outputs.push(y.clone());
        }

        let z = self.global_feature(&stage_outputs, b, m)?;
        let head = self.head_forward(&z, mode, rng)?;
        trace.z = z.value();
        trace.head = head.value();
        Ok(BatchOutput { head, z, trace })
    }

    fn forward_baseline(
        &self,
        clouds: &[PointCloud<E>],
        mode: Mode,
        rng: &mut impl rand::RngCore,
        options: ForwardOptions,
    ) -> Result<BatchOutput<E>> {
        let cfg = &self.config;
        let b = clouds.len();
        let n = clouds[0].len();
        let mut data = Vec::with_capacity(b * n * 3);
        for cloud in clouds {
            let normed = normalize(cloud)?;
            for p in &normed.points {
                data.extend_from_slice(p);
            }
        }
        let points = Tensor::from_vec(&[b * n, 3], data)?;
        let mut y = {
            let _g = flops::scope("embed");
            points
                .matmul(&self.wy)?
                .reshape(&[b, n, cfg.anchor_width])?
        };

        let mut trace = ForwardTrace {
            subgraphs: Vec::new(),
            stage_anchor_features: Vec::new(),
            stage_edge_aggregates: Vec::new(),
            attention: Vec::new(),
            z: Vec::new(),
            head: Vec::new(),
        };

        let mut stage_outputs = Vec::with_capacity(cfg.stages);
        for l in 0..cfg.stages {
            let mut probs = options.capture_attention.then_some(None);
            y = global_stage(&y, &self.global_blocks[l], probs.as_mut())?;
            if let Some(Some(captured)) = probs {
                for bi in 0..b {
                    trace
                        .attention
                        .push(captured.map_for(bi, l, BranchTag::Global));
                }
            }
            if options.capture_trace {
                trace.stage_anchor_features.push(y.value());
            }
            stage_outputs.push(y.clone());
        }

        let z = self.global_feature(&stage_outputs, b, n)?;
        let head = self.head_forward(&z, mode, rng)?;
        trace.z = z.value();
        trace.head = head.value();
        Ok(BatchOutput { head, z, trace })
    }

    /// `z = aggregate(GELU([Y_1; ...; Y_L] W + b))`, giving a [B, 2 d_f]
    /// cloud feature.
    fn global_feature(
        &self,
        stage_outputs: &[Tensor<E>],
        b: usize,
        rows: usize,
    ) -> Result<Tensor<E>> {
        let cfg = &self.config;
        let cat = Tensor::concat_last(stage_outputs)?; // [B, rows, L*d_Y]
        let mixed = {
            let _g = flops::scope("feature");
            cat.reshape(&[b * rows, cfg.stages * cfg.anchor_width])?
                .matmul(&self.feature_w)?
                .add_bias(&self.feature_b)?
                .gelu()
                .reshape(&[b, rows, cfg.feature_width])?
        };
        let _g = flops::scope("aggregate");
        aggregate_batched(&mixed)
    }

    fn head_forward(
        &self,
        z: &Tensor<E>,
        mode: Mode,
        rng: &mut impl rand::RngCore,
    ) -> Result<Tensor<E>> {
        let _g = flops::scope("head");
        match &self.head {
            TaskHead::Classify(h) => h.forward(z, mode, rng),
            TaskHead::Describe(h) => h.forward(z),
        }
    }

    /// Class logits for a batch of clouds (classification task only).
    pub fn classify_batch(
        &self,
        clouds: &[PointCloud<E>],
        mode: Mode,
        rng: &mut impl rand::RngCore,
    ) -> Result<BatchOutput<E>> {
        if !matches!(self.head, TaskHead::Classify(_)) {
            return Err(Error::Usage(
                "classify called on a matching-head model".into(),
            ));
        }
        self.forward_batch(clouds, mode, rng, ForwardOptions::default())
    }

    /// Unit-norm descriptors for a batch of patches (matching task only).
    pub fn describe_batch(
        &self,
        clouds: &[PointCloud<E>],
        mode: Mode,
        rng: &mut impl rand::RngCore,
    ) -> Result<BatchOutput<E>> {
        if !matches!(self.head, TaskHead::Describe(_)) {
            return Err(Error::Usage(
                "describe called on a classification-head model".into(),
            ));
        }
        self.forward_batch(clouds, mode, rng, ForwardOptions::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PointTnTConfig {
        PointTnTConfig {
            anchors: 8,
            neighbors: 4,
            anchor_width: 16,
            edge_width: 8,
            feature_width: 32,
            stages: 2,
            heads: 2,
            num_classes: 5,
            ..Default::default()
        }
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud<f32> {
        let mut r = rng::from_seed(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng::uniform(&mut r, -1.0, 1.0) as f32,
                        rng::uniform(&mut r, -1.0, 1.0) as f32,
                        rng::uniform(&mut r, -1.0, 1.0) as f32,
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn aggregate_direct_example() {
        let x = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        assert_eq!(aggregate(&x).unwrap().value(), vec![3.0, 4.0, 2.0, 3.0]);
    }

    #[test]
    fn aggregate_single_row_duplicates() {
        let x = Tensor::<f32>::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(
            aggregate(&x).unwrap().value(),
            vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]
        );
    }

    #[test]
    fn aggregate_permutation_invariant() {
        let mut r = rng::from_seed(1);
        let data: Vec<f32> = (0..24).map(|_| rng::uniform(&mut r, -2.0, 2.0) as f32).collect();
        let x = Tensor::from_vec(&[6, 4], data.clone()).unwrap();
        let perm = rng::permutation(&mut r, 6);
        let mut pdata = vec![0.0f32; 24];
        for (to, &from) in perm.iter().enumerate() {
            pdata[to * 4..(to + 1) * 4].copy_from_slice(&data[from * 4..(from + 1) * 4]);
        }
        let xp = Tensor::from_vec(&[6, 4], pdata).unwrap();
        // The max half is exact; the mean half reorders the summation, so
        // compare within float tolerance.
        for (a, b) in aggregate(&x)
            .unwrap()
            .value()
            .iter()
            .zip(aggregate(&xp).unwrap().value())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_identity_projection_reproduces_coordinates() {
        let cfg = tiny_config();
        let model = PointTnT::<f32>::init(cfg, 7).unwrap();
        // wy = [I3; 0]: first three output channels are the coordinates.
        let dy = model.config.anchor_width;
        let mut eye = vec![0.0f32; 3 * dy];
        for i in 0..3 {
            eye[i * dy + i] = 1.0;
        }
        model.wy.set_value(eye);
        let cloud = random_cloud(3, 32);
        let normed = normalize(&cloud).unwrap();
        let sub = build_subgraph(&normed, 8, 4).unwrap();
        let anchors = sub.anchor_tensor(&normed).reshape(&[1, 8, 3]).unwrap();
        let edges = sub.edge_tensor();
        let (y0, e0) =
            embed(&anchors, &edges, &model.wy, model.we.as_ref().unwrap()).unwrap();
        assert_eq!(y0.shape(), vec![1, 8, dy]);
        assert_eq!(e0.shape(), vec![8, 4, model.config.edge_width]);
        let y0v = y0.value();
        for (ai, &a) in sub.anchor_indices.iter().enumerate() {
            for c in 0..3 {
                assert!((y0v[ai * dy + c] - normed.points[a][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_edge_embeds_to_zero() {
        let mut r = rng::from_seed(11);
        let we = xavier_uniform::<f32>(&mut r, 3, 8);
        let zero_edge = Tensor::zeros(&[1, 1, 3]);
        let anchors = Tensor::zeros(&[1, 1, 3]);
        let wy = xavier_uniform::<f32>(&mut r, 3, 4);
        let (_, e0) = embed(&anchors, &zero_edge, &wy, &we).unwrap();
        assert!(e0.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_zero_projection_is_identity() {
        let y = Tensor::<f32>::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = Tensor::<f32>::from_vec(&[2, 2, 2], vec![0.5; 8]).unwrap();
        let w = Tensor::zeros(&[4, 3]);
        let (fused, agg) = fuse(&y, &e, &w).unwrap();
        assert_eq!(fused.value(), y.value());
        assert_eq!(agg.shape(), vec![2, 4]);
    }

    #[test]
    fn tiny_model_end_to_end_shapes() {
        let cfg = tiny_config();
        let model = PointTnT::<f32>::init(cfg.clone(), 9).unwrap();
        let clouds = vec![random_cloud(20, 32), random_cloud(21, 32)];
        let mut r = rng::from_seed(22);
        let out = model
            .forward_batch(&clouds, Mode::Eval, &mut r, ForwardOptions::default())
            .unwrap();
        assert_eq!(out.head.shape(), vec![2, cfg.num_classes]);
        assert_eq!(out.z.shape(), vec![2, 2 * cfg.feature_width]);
        assert!(out.head.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn z_length_is_twice_feature_width() {
        let cfg = tiny_config();
        let model = PointTnT::<f32>::init(cfg.clone(), 10).unwrap();
        let mut r = rng::from_seed(23);
        let out = model
            .forward(&random_cloud(24, 40), Mode::Eval, &mut r, ForwardOptions::default())
            .unwrap();
        assert_eq!(out.trace.z.len(), 2 * cfg.feature_width);
    }

    #[test]
    fn baseline_has_no_local_parameters() {
        let tnt = PointTnT::<f32>::init(tiny_config(), 1).unwrap();
        let base = PointTnT::<f32>::init(tiny_config().baseline(), 1).unwrap();
        let tnt_names: Vec<String> =
            tnt.param_set().iter().map(|p| p.name.clone()).collect();
        let base_names: Vec<String> =
            base.param_set().iter().map(|p| p.name.clone()).collect();
        assert!(tnt_names.iter().any(|n| n.starts_with("local.")));
        assert!(tnt_names.iter().any(|n| n.starts_with("fuse.")));
        assert!(tnt_names.iter().any(|n| n == "embed.we"));
        assert!(!base_names.iter().any(|n| n.starts_with("local.")));
        assert!(!base_names.iter().any(|n| n.starts_with("fuse.")));
        assert!(!base_names.iter().any(|n| n == "embed.we"));
    }

    #[test]
    fn baseline_attention_maps_cover_all_points() {
        let cfg = PointTnTConfig {
            variant: Variant::Baseline,
            ..tiny_config()
        };
        let model = PointTnT::<f32>::init(cfg, 2).unwrap();
        let mut r = rng::from_seed(25);
        let out = model
            .forward(
                &random_cloud(26, 24),
                Mode::Eval,
                &mut r,
                ForwardOptions {
                    capture_attention: true,
                    capture_trace: false,
                },
            )
            .unwrap();
        // One map per stage; each is [h, N, N].
        assert_eq!(out.trace.attention.len(), 2);
        for map in &out.trace.attention {
            assert_eq!(map.n, 24);
            assert_eq!(map.heads, 2);
            assert_eq!(map.branch, BranchTag::Global);
        }
    }

    #[test]
    fn forward_batch_rejects_ragged_batches() {
        let model = PointTnT::<f32>::init(tiny_config(), 3).unwrap();
        let clouds = vec![random_cloud(27, 32), random_cloud(28, 33)];
        let mut r = rng::from_seed(29);
        assert!(model
            .forward_batch(&clouds, Mode::Eval, &mut r, ForwardOptions::default())
            .is_err());
    }

    #[test]
    fn task_head_guards() {
        let model = PointTnT::<f32>::init(tiny_config(), 4).unwrap();
        let clouds = vec![random_cloud(30, 32)];
        let mut r = rng::from_seed(31);
        assert!(model.describe_batch(&clouds, Mode::Eval, &mut r).is_err());
        let mm = PointTnT::<f32>::init(tiny_config().for_task(Task::Matching), 4).unwrap();
        assert!(mm.classify_batch(&clouds, Mode::Eval, &mut r).is_err());
        let out = mm.describe_batch(&clouds, Mode::Eval, &mut r).unwrap();
        let desc = out.head.value();
        assert_eq!(desc.len(), 32);
        let norm: f32 = desc.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "descriptor norm {norm}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ptnt");
        let model = PointTnT::<f32>::init(tiny_config(), 5).unwrap();
        // Make running stats non-trivial so the buffer round-trip matters.
        if let TaskHead::Classify(h) = &model.head {
            h.bn1.running_mean.borrow_mut()[0] = 0.25;
            h.bn1.running_var.borrow_mut()[0] = 2.0;
        }
        model.save(&path).unwrap();
        let loaded = PointTnT::<f32>::load(&path).unwrap();
        let cloud = random_cloud(33, 32);
        let mut r1 = rng::from_seed(34);
        let mut r2 = rng::from_seed(34);
        let a = model
            .forward(&cloud, Mode::Eval, &mut r1, ForwardOptions::default())
            .unwrap();
        let b = loaded
            .forward(&cloud, Mode::Eval, &mut r2, ForwardOptions::default())
            .unwrap();
        assert_eq!(a.head.value(), b.head.value());
    }

    #[test]
    fn config_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = PointTnTConfig::small();
        cfg.to_json_file(&path).unwrap();
        let back = PointTnTConfig::from_json_file(&path).unwrap();
        assert_eq!(serde_json::to_string(&cfg).unwrap(), serde_json::to_string(&back).unwrap());
        // Partial configs fill in defaults.
        std::fs::write(&path, r#"{"anchors": 12}"#).unwrap();
        let partial = PointTnTConfig::from_json_file(&path).unwrap();
        assert_eq!(partial.anchors, 12);
        assert_eq!(partial.neighbors, 20);
    }
}
