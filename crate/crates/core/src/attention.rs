//! Attention maps of one evaluation-mode forward pass, for inspection.

use serde::Serialize;

use crate::error::Result;
use crate::graph::Graph;
use crate::layers::Mode;
use crate::model::PoseModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockAttention {
    /// `Jtt[t][j]`, summing to 1 over frames per joint.
    pub jtt: Vec<Vec<f64>>,
    /// Pre-softmax joint logits `[t][j]`.
    pub jwa_logits: Vec<Vec<f64>>,
    /// Central scaling factor per frame.
    pub p_scl: Vec<f64>,
    /// Per head, query-by-key attention `[t][t']`.
    pub bcma: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionDump {
    pub id: String,
    /// `Ott[t][j][k]`, summing to 1 over orders `k`.
    pub ott: Vec<Vec<Vec<f64>>>,
    pub blocks: Vec<BlockAttention>,
    /// Predicted `[J][3]` pose.
    pub pose: Vec<Vec<f64>>,
}

fn rows(t: &Tensor, width: usize) -> Vec<Vec<f64>> {
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

/// Runs one `[T_in, J, 2]` sequence and collects every attention map.
pub fn dump_attention(model: &PoseModel, store: &ParamStore, id: &str, sequence: &Tensor) -> Result<AttentionDump> {
    let mut shape = vec![1];
    shape.extend_from_slice(sequence.shape());
    let batch = Tensor::new(shape, sequence.data().to_vec())?;
    let input = model.prepare_input(&batch)?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let x = g.constant(input);
    let out = model.forward(&mut g, &bound, store, x, Mode::Eval)?;

    let (t, j) = (model.config().frames(), model.num_joints());
    let orders = model.config().max_order + 1;
    let ott_vals = g.value(out.spatial.order_weights).data();
    let ott = ott_vals
        .chunks(j * orders)
        .map(|frame| frame.chunks(orders).map(<[f64]>::to_vec).collect())
        .collect();

    let blocks = out
        .blocks
        .iter()
        .map(|b| BlockAttention {
            jtt: rows(g.value(b.jwa.weights), j),
            jwa_logits: rows(g.value(b.jwa.logits), j),
            p_scl: g.value(b.bcma.scaling).data().to_vec(),
            bcma: b
                .bcma
                .attention
                .iter()
                .map(|&h| rows(g.value(h), t))
                .collect(),
        })
        .collect();
    debug_assert!(g.value(out.spatial.order_weights).numel() == t * j * orders);
    Ok(AttentionDump {
        id: id.to_string(),
        ott,
        blocks,
        pose: rows(g.value(out.pose), 3),
    })
}
