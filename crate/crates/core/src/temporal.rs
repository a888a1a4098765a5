//! Body-aware temporal transformer: joints weighted attention followed by
//! body-centred multi-head attention, with normalization, residuals and an MLP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::layers::{BatchNorm, LayerNorm, Linear, Mode};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct JwaOutput {
    /// Input features reweighted per joint and frame: `[..., T, J, D]`.
    pub output: Var,
    /// `Jtt`, softmax over frames of the logits: `[..., T, J]`.
    pub weights: Var,
    /// Pre-softmax logits `mean_D(S̃) ⊙ W^J`: `[..., T, J]`.
    pub logits: Var,
}

/// Joints weighted attention over `x = [..., T, J, D]` with `w_j = [T, J]`.
///
/// Each joint's feature vector is reduced to its mean over `D`, modulated by
/// the learned per-(frame, joint) weight, and normalized over frames. The
/// resulting weight scales that joint's features in that frame.
pub fn jwa_forward(g: &mut Graph, x: Var, w_j: Var) -> Result<JwaOutput> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 3 {
        return Err(Error::shape("jwa", format!("expected [..., T, J, D], got {shape:?}")));
    }
    let (t, j, d) = (shape[rank - 3], shape[rank - 2], shape[rank - 1]);
    if g.shape(w_j) != [t, j] {
        return Err(Error::shape(
            "jwa",
            format!("W^J is {:?} but features have T={t}, J={j}", g.shape(w_j)),
        ));
    }
    let mean = g.mean(x, rank - 1)?;
    let logits = g.mul(mean, w_j)?;
    let weights = g.softmax(logits, rank - 3)?;
    let expanded = g.expand(weights, d)?;
    let output = g.mul(x, expanded)?;
    Ok(JwaOutput {
        output,
        weights,
        logits,
    })
}

/// Frame positions `0..=1`, evenly spaced (`[0]` for a single frame).
pub fn frame_positions(t: usize) -> Vec<f64> {
    if t <= 1 {
        return vec![0.0; t];
    }
    (0..t).map(|i| i as f64 / (t - 1) as f64).collect()
}

/// `exp(−F_pos · W^F · (pos − P_c)²)` for each frame position.
pub fn central_scaling(t: usize, center: f64, pos_scale: f64, w_f: f64) -> Vec<f64> {
    frame_positions(t)
        .into_iter()
        .map(|p| (-pos_scale * w_f * (p - center).powi(2)).exp())
        .collect()
}

/// Differentiable [`central_scaling`] with learnable `w_f` of shape `[1]`.
pub fn central_scaling_var(g: &mut Graph, t: usize, center: f64, pos_scale: f64, w_f: Var) -> Result<Var> {
    let dis: Vec<f64> = frame_positions(t)
        .into_iter()
        .map(|p| (p - center).powi(2))
        .collect();
    let dis = g.constant(Tensor::new(vec![t], dis)?);
    let scaled = g.mul(dis, w_f)?;
    let neg = g.scale(scaled, -pos_scale);
    Ok(g.exp(neg))
}

/// Which axis of the attention scores the central scaling multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScaling {
    /// Columns: every query is biased toward central keys.
    #[default]
    Keys,
    /// Rows: each query's scores are tempered by its own position.
    Queries,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadProjection {
    /// `[G, G/n]`
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Debug)]
pub struct BcmaParams {
    pub heads: Vec<HeadProjection>,
    /// `[G, G]`
    pub w_o: Var,
    /// Learnable decay weight `W^F`, shape `[1]`.
    pub w_f: Var,
    /// Fixed decay factor `F_pos`.
    pub pos_scale: f64,
    /// Centre position `P_c` in `[0, 1]`.
    pub center: f64,
    pub scaling: ScoreScaling,
}

#[derive(Clone, Debug)]
pub struct BcmaOutput {
    /// `[..., T, G]`
    pub output: Var,
    /// Per-head attention matrices `[..., T, T]`, rows summing to 1.
    pub attention: Vec<Var>,
    /// `P_scl`, shape `[T]`.
    pub scaling: Var,
}

/// Body-centred multi-head self-attention over `x = [..., T, G]`.
///
/// Per head: `softmax((Q·Kᵀ / √G) ⊙ P_scl) · V`; the heads are concatenated
/// and projected by `W^O`.
pub fn bcma_forward(g: &mut Graph, x: Var, params: &BcmaParams) -> Result<BcmaOutput> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 2 {
        return Err(Error::shape("bcma", format!("expected [..., T, G], got {shape:?}")));
    }
    let (t, width) = (shape[rank - 2], shape[rank - 1]);
    let n = params.heads.len();
    if n == 0 || width % n != 0 {
        return Err(Error::Config(format!(
            "feature width {width} is not divisible by {n} attention heads"
        )));
    }
    let p_scl = central_scaling_var(g, t, params.center, params.pos_scale, params.w_f)?;
    let scaling = match params.scaling {
        ScoreScaling::Keys => p_scl,
        ScoreScaling::Queries => g.expand(p_scl, t)?,
    };
    let inv_sqrt = 1.0 / (width as f64).sqrt();
    let mut heads = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    for h in &params.heads {
        let q = g.matmul(x, h.w_q)?;
        let k = g.matmul(x, h.w_k)?;
        let v = g.matmul(x, h.w_v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, inv_sqrt);
        let scaled = g.mul(scores, scaling)?;
        let att = g.softmax(scaled, rank - 1)?;
        heads.push(g.matmul(att, v)?);
        attention.push(att);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, rank - 1)? };
    let output = g.matmul(cat, params.w_o)?;
    Ok(BcmaOutput {
        output,
        attention,
        scaling: p_scl,
    })
}

/// Fixed attention settings shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcmaSettings {
    pub heads: usize,
    pub center: f64,
    pub pos_scale: f64,
    pub scaling: ScoreScaling,
}

/// Graph handles for one transformer block.
#[derive(Clone, Debug)]
pub struct BatBlock {
    pub ln_jwa: LayerNorm,
    pub w_j: Var,
    pub ln_bcma: LayerNorm,
    pub bcma: BcmaParams,
    pub bn: BatchNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BatBlock {
    pub fn bind(
        bound: &Bound,
        store: &ParamStore,
        prefix: &str,
        settings: &BcmaSettings,
        mode: Mode,
    ) -> Result<Self> {
        let heads = (0..settings.heads)
            .map(|h| {
                let p = format!("{prefix}.bcma.head.{h}");
                Ok(HeadProjection {
                    w_q: bound.get(&format!("{p}.w_q"))?,
                    w_k: bound.get(&format!("{p}.w_k"))?,
                    w_v: bound.get(&format!("{p}.w_v"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ln_jwa: LayerNorm::bind(bound, &format!("{prefix}.ln_jwa"))?,
            w_j: bound.get(&format!("{prefix}.jwa.w_j"))?,
            ln_bcma: LayerNorm::bind(bound, &format!("{prefix}.ln_bcma"))?,
            bcma: BcmaParams {
                heads,
                w_o: bound.get(&format!("{prefix}.bcma.w_o"))?,
                w_f: bound.get(&format!("{prefix}.bcma.w_f"))?,
                pos_scale: settings.pos_scale,
                center: settings.center,
                scaling: settings.scaling,
            },
            bn: BatchNorm::bind(bound, store, &format!("{prefix}.bn"), mode)?,
            fc1: Linear::bind(bound, &format!("{prefix}.mlp.fc1"))?,
            fc2: Linear::bind(bound, &format!("{prefix}.mlp.fc2"))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatOutput {
    /// `[..., T, G]`
    pub output: Var,
    /// Batch-normalized residual sum feeding the MLP: `[..., T, G]`.
    pub normalized: Var,
    pub jwa: JwaOutput,
    pub bcma: BcmaOutput,
    pub bn_stats: Option<BatchStats>,
}

/// One block over `x = [..., T, J, D]`:
///
/// ```text
/// Y1  = JWA(LN(x))
/// Y2  = BCMA(LN(flatten(Y1)))
/// Y3  = BN(Y2 + flatten(x))
/// out = Y3 + MLP(Y3)
/// ```
pub fn bat_block_forward(g: &mut Graph, x: Var, block: &BatBlock) -> Result<BatOutput> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 3 {
        return Err(Error::shape("bat_block", format!("expected [..., T, J, D], got {shape:?}")));
    }
    let width = shape[rank - 2] * shape[rank - 1];
    let mut flat_shape = shape[..rank - 2].to_vec();
    flat_shape.push(width);

    let flat_in = g.reshape(x, &flat_shape)?;
    let n1 = block.ln_jwa.apply(g, flat_in)?;
    let n1 = g.reshape(n1, &shape)?;
    let jwa = jwa_forward(g, n1, block.w_j)?;
    let y1 = g.reshape(jwa.output, &flat_shape)?;
    let n2 = block.ln_bcma.apply(g, y1)?;
    let bcma = bcma_forward(g, n2, &block.bcma)?;

    let residual = g.add(bcma.output, flat_in)?;
    let rows: usize = flat_shape[..flat_shape.len() - 1].iter().product();
    let residual = g.reshape(residual, &[rows, width])?;
    let (normalized, bn_stats) = block.bn.apply(g, residual)?;
    let normalized = g.reshape(normalized, &flat_shape)?;

    let hidden = block.fc1.apply(g, normalized)?;
    let hidden = g.relu(hidden);
    let mlp = block.fc2.apply(g, hidden)?;
    let output = g.add(normalized, mlp)?;
    Ok(BatOutput {
        output,
        normalized,
        jwa,
        bcma,
        bn_stats,
    })
}
