//! End-to-end network: frame dropping, spatial GCN with order attention,
//! positional embedding, stacked transformer blocks and a regression head
//! emitting the 3D pose of the central frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::layers::{BatchNorm, LayerNorm, Linear, Mode};
use crate::params::{Bound, ParamStore};
use crate::skeleton::{OrderedAdjacencySet, SkeletonTopology};
use crate::spatial::{goa_forward, mo_gcn_forward, GoaOutput, GoaParams};
use crate::temporal::{bat_block_forward, BatBlock, BatOutput, BcmaSettings, ScoreScaling};
use crate::tensor::Tensor;

/// Input coordinates per joint.
pub const INPUT_DIM: usize = 2;
/// Exponential-moving-average weight of new batch statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// A builtin topology name (or path, before resolution), or the topology
/// itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Named(String),
    Inline(SkeletonTopology),
}

impl TopologySpec {
    pub fn load(&self) -> Result<SkeletonTopology> {
        match self {
            TopologySpec::Named(name) => SkeletonTopology::resolve(name),
            TopologySpec::Inline(t) => {
                t.validate()?;
                Ok(t.clone())
            }
        }
    }

    /// Keeps builtin names; replaces file paths by the topology they hold.
    pub fn resolved(&self) -> Result<Self> {
        match self {
            TopologySpec::Named(name) if SkeletonTopology::builtin(name).is_some() => Ok(self.clone()),
            other => Ok(TopologySpec::Inline(other.load()?)),
        }
    }
}

/// How the sequence output is reduced to the single frame fed to the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameReduction {
    #[default]
    Central,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pos_std")]
    pub pos_embed_std: f64,
    /// Zero the regression head's linear layer.
    #[serde(default)]
    pub zero_head: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pos_embed_std: default_pos_std(),
            zero_head: false,
        }
    }
}

fn default_pos_std() -> f64 {
    0.02
}
fn default_hidden() -> usize {
    32
}
fn default_order() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_center() -> f64 {
    0.5
}
fn default_pos_scale() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub topology: TopologySpec,
    /// Frames per input sequence, before dropping.
    pub input_frames: usize,
    /// Keep every `(drop_rate + 1)`-th frame.
    #[serde(default)]
    pub drop_rate: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Highest graph order `R`.
    #[serde(default = "default_order")]
    pub max_order: usize,
    #[serde(default = "default_one")]
    pub bat_blocks: usize,
    #[serde(default = "default_one")]
    pub heads: usize,
    #[serde(default = "default_center")]
    pub center: f64,
    #[serde(default = "default_pos_scale")]
    pub pos_scale: f64,
    #[serde(default)]
    pub score_scaling: ScoreScaling,
    #[serde(default)]
    pub reduction: FrameReduction,
    /// Add self-loops to `A^k`, `k ≥ 1`, before normalizing.
    #[serde(default)]
    pub higher_order_self_loops: bool,
    /// Targets and predictions are relative to the root joint.
    #[serde(default = "default_true")]
    pub root_relative: bool,
    #[serde(default)]
    pub init: InitConfig,
}

impl ModelConfig {
    /// Defaults for a topology and input length.
    pub fn new(topology: TopologySpec, input_frames: usize) -> Self {
        Self {
            topology,
            input_frames,
            drop_rate: 0,
            hidden_dim: default_hidden(),
            max_order: default_order(),
            bat_blocks: 1,
            heads: 1,
            center: default_center(),
            pos_scale: default_pos_scale(),
            score_scaling: ScoreScaling::Keys,
            reduction: FrameReduction::Central,
            higher_order_self_loops: false,
            root_relative: true,
            init: InitConfig::default(),
        }
    }

    /// The small configuration used for gradient checks:
    /// T=5, r=0, J=5, D=4, R=2, N=1, n=1.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 4,
            max_order: 2,
            ..Self::new(TopologySpec::Named("tiny5".into()), 5)
        }
    }

    /// Frames left after dropping: `ceil(T_in / (r + 1))`.
    pub fn frames(&self) -> usize {
        self.input_frames.div_ceil(self.drop_rate + 1)
    }

    pub fn central_index(&self) -> usize {
        self.frames() / 2
    }
}

/// Keeps frames `0, r+1, 2(r+1), …` along the first axis.
pub fn drop_frames(frames: &Tensor, drop_rate: usize) -> Result<Tensor> {
    let shape = frames.shape();
    let t_in = shape[0];
    let per: usize = shape[1..].iter().product();
    let step = drop_rate + 1;
    let data: Vec<f64> = (0..t_in)
        .step_by(step)
        .flat_map(|t| frames.data()[t * per..(t + 1) * per].iter().copied())
        .collect();
    let mut out_shape = shape.to_vec();
    out_shape[0] = t_in.div_ceil(step);
    Tensor::new(out_shape, data)
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, J, 3]`
    pub pose: Var,
    pub spatial: GoaOutput,
    pub blocks: Vec<BatOutput>,
    /// Fresh batch statistics per batch-norm prefix (training mode only).
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// The network for one configuration, with its fixed adjacency matrices.
#[derive(Clone, Debug)]
pub struct PoseModel {
    config: ModelConfig,
    topology: SkeletonTopology,
    adjacency: OrderedAdjacencySet,
}

impl PoseModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let topology = config.topology.load()?;
        let c = &config;
        let invalid = |msg: String| Err(Error::Config(msg));
        if c.input_frames == 0 {
            return invalid("input_frames must be at least 1".into());
        }
        if c.hidden_dim == 0 || c.heads == 0 || c.bat_blocks == 0 {
            return invalid("hidden_dim, heads and bat_blocks must be positive".into());
        }
        let width = topology.num_joints * c.hidden_dim;
        if !width.is_multiple_of(c.heads) {
            return invalid(format!(
                "J·D = {width} is not divisible by {} heads",
                c.heads
            ));
        }
        if !(0.0..=1.0).contains(&c.center) {
            return invalid(format!("center {} outside [0, 1]", c.center));
        }
        if !c.pos_scale.is_finite() || c.pos_scale < 0.0 {
            return invalid(format!("pos_scale {} must be finite and non-negative", c.pos_scale));
        }
        if !c.init.pos_embed_std.is_finite() || c.init.pos_embed_std < 0.0 {
            return invalid("init.pos_embed_std must be finite and non-negative".into());
        }
        if c.frames().is_multiple_of(2) && c.reduction == FrameReduction::Central {
            log::warn!(
                "{} frames after dropping has no exact centre; using frame {}",
                c.frames(),
                c.central_index()
            );
        }
        let adjacency = OrderedAdjacencySet::new(&topology, c.max_order, c.higher_order_self_loops)?;
        Ok(Self {
            config,
            topology,
            adjacency,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn adjacency(&self) -> &OrderedAdjacencySet {
        &self.adjacency
    }

    pub fn num_joints(&self) -> usize {
        self.topology.num_joints
    }

    /// The joint targets are made relative to, if any.
    pub fn target_root(&self) -> Option<usize> {
        self.config.root_relative.then_some(self.topology.root)
    }

    /// Per-frame feature width `G = J·D`.
    pub fn width(&self) -> usize {
        self.num_joints() * self.config.hidden_dim
    }

    pub fn bcma_settings(&self) -> BcmaSettings {
        BcmaSettings {
            heads: self.config.heads,
            center: self.config.center,
            pos_scale: self.config.pos_scale,
            scaling: self.config.score_scaling,
        }
    }

    /// Freshly initialized parameters and batch-norm buffers.
    ///
    /// Linear and graph weights are uniform in `±sqrt(1/fan_in)`, biases
    /// zero, norm gains one, `W^F = 1`, `W^J = 1`, and the positional
    /// embedding is normal with the configured standard deviation.
    pub fn init_params(&self) -> ParamStore {
        let c = &self.config;
        let (j, d, t, g) = (self.num_joints(), c.hidden_dim, c.frames(), self.width());
        let mut rng = ChaCha8Rng::seed_from_u64(c.init.seed);
        let mut store = ParamStore::new();
        let mut uniform = |store: &mut ParamStore, path: String, shape: &[usize], fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(path, Tensor::new(shape.to_vec(), data).expect("shape"));
        };
        let norm = |store: &mut ParamStore, prefix: &str, n: usize| {
            store.insert(format!("{prefix}.gain"), Tensor::ones(&[n]));
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[n]));
        };
        let bn_buffers = |store: &mut ParamStore, prefix: &str, n: usize| {
            store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[n]));
            store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[n]));
        };

        for k in 0..=c.max_order {
            uniform(&mut store, format!("spatial.gcn.{k}.weight"), &[INPUT_DIM, d], INPUT_DIM);
        }
        uniform(&mut store, "spatial.goa.w_q".into(), &[d, d], d);
        uniform(&mut store, "spatial.goa.w_k".into(), &[d, d], d);
        uniform(&mut store, "spatial.goa.w_o".into(), &[d], d);
        norm(&mut store, "spatial.bn", g);
        bn_buffers(&mut store, "spatial.bn", g);

        for b in 0..c.bat_blocks {
            let p = format!("bat.{b}");
            norm(&mut store, &format!("{p}.ln_jwa"), g);
            store.insert(format!("{p}.jwa.w_j"), Tensor::ones(&[t, j]));
            norm(&mut store, &format!("{p}.ln_bcma"), g);
            for h in 0..c.heads {
                for w in ["w_q", "w_k", "w_v"] {
                    uniform(&mut store, format!("{p}.bcma.head.{h}.{w}"), &[g, g / c.heads], g);
                }
            }
            uniform(&mut store, format!("{p}.bcma.w_o"), &[g, g], g);
            store.insert(format!("{p}.bcma.w_f"), Tensor::scalar(1.0));
            norm(&mut store, &format!("{p}.bn"), g);
            bn_buffers(&mut store, &format!("{p}.bn"), g);
            uniform(&mut store, format!("{p}.mlp.fc1.weight"), &[g, 2 * g], g);
            store.insert(format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[2 * g]));
            uniform(&mut store, format!("{p}.mlp.fc2.weight"), &[2 * g, g], 2 * g);
            store.insert(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[g]));
        }

        norm(&mut store, "head.ln", g);
        if c.init.zero_head {
            store.insert("head.linear.weight", Tensor::zeros(&[g, 3 * j]));
        } else {
            uniform(&mut store, "head.linear.weight".into(), &[g, 3 * j], g);
        }
        store.insert("head.linear.bias", Tensor::zeros(&[3 * j]));

        // Drawn last so the other parameters do not depend on its size.
        let normal = Normal::new(0.0, c.init.pos_embed_std).expect("validated std");
        let pos: Vec<f64> = (0..t * g).map(|_| normal.sample(&mut rng)).collect();
        store.insert("pos_embed", Tensor::new(vec![t, g], pos).expect("shape"));
        store
    }

    /// Forward pass over `input = [B, T, J, 2]`, already frame-dropped.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        store: &ParamStore,
        input: Var,
        mode: Mode,
    ) -> Result<ModelOutput> {
        let c = &self.config;
        let (j, d, t, width) = (self.num_joints(), c.hidden_dim, c.frames(), self.width());
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != t || shape[2] != j || shape[3] != INPUT_DIM {
            return Err(Error::shape(
                "model",
                format!("input {shape:?} must be [B, {t}, {j}, {INPUT_DIM}]"),
            ));
        }
        if !g.value(input).is_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        let batch = shape[0];
        let mut bn_updates = Vec::new();

        let weights: Vec<Var> = (0..=c.max_order)
            .map(|k| bound.get(&format!("spatial.gcn.{k}.weight")))
            .collect::<Result<_>>()?;
        let ord = mo_gcn_forward(g, input, &self.adjacency, &weights)?;
        let goa = GoaParams {
            w_q: bound.get("spatial.goa.w_q")?,
            w_k: bound.get("spatial.goa.w_k")?,
            w_o: bound.get("spatial.goa.w_o")?,
        };
        let bn = BatchNorm::bind(bound, store, "spatial.bn", mode)?;
        let spatial = goa_forward(g, ord, &goa, Some(&bn))?;
        if let Some(stats) = spatial.bn_stats.clone() {
            bn_updates.push(("spatial.bn".to_string(), stats));
        }

        let flat = g.reshape(spatial.output, &[batch, t, width])?;
        let pos = bound.get("pos_embed")?;
        let embedded = g.add(flat, pos)?;
        let mut x = g.reshape(embedded, &[batch, t, j, d])?;

        let settings = self.bcma_settings();
        let mut blocks = Vec::with_capacity(c.bat_blocks);
        let mut seq = embedded;
        for b in 0..c.bat_blocks {
            let prefix = format!("bat.{b}");
            let block = BatBlock::bind(bound, store, &prefix, &settings, mode)?;
            let out = bat_block_forward(g, x, &block)?;
            if let Some(stats) = out.bn_stats.clone() {
                bn_updates.push((format!("{prefix}.bn"), stats));
            }
            seq = out.output;
            x = g.reshape(seq, &[batch, t, j, d])?;
            blocks.push(out);
        }

        let frame = match c.reduction {
            FrameReduction::Central => {
                let row = g.slice(seq, 1, c.central_index(), 1)?;
                g.reshape(row, &[batch, width])?
            }
            FrameReduction::Mean => g.mean(seq, 1)?,
        };
        let normed = LayerNorm::bind(bound, "head.ln")?.apply(g, frame)?;
        let coords = Linear::bind(bound, "head.linear")?.apply(g, normed)?;
        let pose = g.reshape(coords, &[batch, j, 3])?;
        Ok(ModelOutput {
            pose,
            spatial,
            blocks,
            bn_updates,
        })
    }

    /// Drops frames from raw `[B, T_in, J, 2]` sequences.
    pub fn prepare_input(&self, sequences: &Tensor) -> Result<Tensor> {
        let shape = sequences.shape();
        let (t_in, j) = (self.config.input_frames, self.num_joints());
        if shape.len() != 4 || shape[1] != t_in || shape[2] != j || shape[3] != INPUT_DIM {
            return Err(Error::shape(
                "model",
                format!("sequences {shape:?} must be [B, {t_in}, {j}, {INPUT_DIM}]"),
            ));
        }
        let batch = shape[0];
        let per = t_in * j * INPUT_DIM;
        let mut data = Vec::with_capacity(batch * self.config.frames() * j * INPUT_DIM);
        for b in 0..batch {
            let seq = Tensor::new(
                vec![t_in, j, INPUT_DIM],
                sequences.data()[b * per..(b + 1) * per].to_vec(),
            )?;
            data.extend(drop_frames(&seq, self.config.drop_rate)?.into_data());
        }
        Tensor::new(vec![batch, self.config.frames(), j, INPUT_DIM], data)
    }

    /// Evaluation-mode prediction for raw `[B, T_in, J, 2]` sequences.
    pub fn predict(&self, store: &ParamStore, sequences: &Tensor) -> Result<Tensor> {
        let input = self.prepare_input(sequences)?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let x = g.constant(input);
        let out = self.forward(&mut g, &bound, store, x, Mode::Eval)?;
        Ok(g.value(out.pose).clone())
    }
}

/// Blends fresh batch statistics into the running buffers.
pub fn update_running_stats(store: &mut ParamStore, updates: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, stats) in updates {
        for (name, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let buf = store.buffer_mut(&format!("{prefix}.{name}"))?;
            for (r, f) in buf.data_mut().iter_mut().zip(fresh) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * f;
            }
        }
    }
    Ok(())
}

/// Exact learnable-scalar count with a per-path breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

impl ParamCount {
    /// Sum over paths starting with `prefix`.
    pub fn under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.path.starts_with(prefix))
            .map(|e| e.count)
            .sum()
    }
}

pub fn count_parameters(store: &ParamStore) -> ParamCount {
    let entries: Vec<ParamEntry> = store
        .iter()
        .map(|(path, t)| ParamEntry {
            path: path.to_string(),
            shape: t.shape().to_vec(),
            count: t.numel(),
        })
        .collect();
    ParamCount {
        total: entries.iter().map(|e| e.count).sum(),
        entries,
    }
}
