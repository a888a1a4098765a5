//! Per-frame spatial features: multi-order graph convolution followed by
//! graph order attention.

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::layers::BatchNorm;
use crate::skeleton::OrderedAdjacencySet;

/// One graph convolution per order `k = 0..=R`, without activation:
/// `S^k = Ã^k · S · W^k`.
///
/// `frames` is `[..., J, C]` and each `weights[k]` is `[C, D]`. The result
/// stacks the order features along a new axis: `[..., J, R+1, D]`.
pub fn mo_gcn_forward(
    g: &mut Graph,
    frames: Var,
    adjacency: &OrderedAdjacencySet,
    weights: &[Var],
) -> Result<Var> {
    let shape = g.shape(frames).to_vec();
    let rank = shape.len();
    if rank < 2 || shape[rank - 2] != adjacency.num_joints() {
        return Err(Error::shape(
            "mo_gcn",
            format!(
                "frames {shape:?} must have {} joints on axis {}",
                adjacency.num_joints(),
                rank.saturating_sub(2)
            ),
        ));
    }
    if weights.len() != adjacency.max_order() + 1 {
        return Err(Error::shape(
            "mo_gcn",
            format!("{} branch weights for orders 0..={}", weights.len(), adjacency.max_order()),
        ));
    }
    let mut per_order = Vec::with_capacity(weights.len());
    for (k, &w) in weights.iter().enumerate() {
        let a = g.constant(adjacency.order(k).clone());
        let projected = g.matmul(frames, w)?;
        let s_k = g.matmul(a, projected)?;
        let mut stacked = g.shape(s_k).to_vec();
        stacked.insert(rank - 1, 1);
        per_order.push(g.reshape(s_k, &stacked)?);
    }
    g.concat(&per_order, rank - 1)
}

/// Query, key and output weights of graph order attention.
#[derive(Clone, Copy, Debug)]
pub struct GoaParams {
    /// `[D, D]`
    pub w_q: Var,
    /// `[D, D]`
    pub w_k: Var,
    /// `[D]`
    pub w_o: Var,
}

#[derive(Clone, Debug)]
pub struct GoaOutput {
    /// `σ(GOA)`, optionally batch-normalized before the activation: `[..., J, D]`.
    pub output: Var,
    /// Attention-weighted sum over orders before normalization/activation.
    pub combined: Var,
    /// Per-joint order weights `Ott`: `[..., J, R+1]`, summing to 1 over orders.
    pub order_weights: Var,
    pub bn_stats: Option<BatchStats>,
}

/// Graph order attention over `ord = [..., J, R+1, D]`.
///
/// `Ott = softmax_orders(tanh(ord·W_q + ord·W_k)·W_o)` and the output is
/// `ReLU(Σ_k S^k ⊙ Ott_k)`. When `norm` is given, batch normalization over
/// the flattened `J·D` features is applied before the ReLU.
pub fn goa_forward(
    g: &mut Graph,
    ord: Var,
    params: &GoaParams,
    norm: Option<&BatchNorm>,
) -> Result<GoaOutput> {
    let shape = g.shape(ord).to_vec();
    let rank = shape.len();
    if rank < 3 {
        return Err(Error::shape("goa", format!("expected [..., J, R+1, D], got {shape:?}")));
    }
    let d = shape[rank - 1];
    let q = g.matmul(ord, params.w_q)?;
    let k = g.matmul(ord, params.w_k)?;
    let qk = g.add(q, k)?;
    let h = g.tanh(qk);
    let w_o = g.reshape(params.w_o, &[d, 1])?;
    let logits = g.matmul(h, w_o)?;
    let logits = g.reshape(logits, &shape[..rank - 1])?;
    let ott = g.softmax(logits, rank - 2)?;
    let weights = g.expand(ott, d)?;
    let weighted = g.mul(ord, weights)?;
    let combined = g.sum(weighted, rank - 2)?;

    let (pre, bn_stats) = match norm {
        Some(bn) => {
            let joints = shape[rank - 3];
            let rows: usize = shape[..rank - 3].iter().product();
            let flat = g.reshape(combined, &[rows, joints * d])?;
            let (normed, stats) = bn.apply(g, flat)?;
            let combined_shape = g.shape(combined).to_vec();
            (g.reshape(normed, &combined_shape)?, stats)
        }
        None => (combined, None),
    };
    let output = g.relu(pre);
    Ok(GoaOutput {
        output,
        combined,
        order_weights: ott,
        bn_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonTopology;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn path3() -> SkeletonTopology {
        SkeletonTopology::new(3, vec![[0, 1], [1, 2]], vec![], 0).unwrap()
    }

    #[test]
    fn order_zero_identity_weight_is_noop() {
        let adj = OrderedAdjacencySet::new(&path3(), 0, false).unwrap();
        let s = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(s.clone());
        let w = g.constant(Tensor::eye(2));
        let out = mo_gcn_forward(&mut g, x, &adj, &[w]).unwrap();
        assert_eq!(g.shape(out), &[3, 1, 2]);
        assert_eq!(g.value(out).data(), s.data());
    }

    #[test]
    fn zero_frame_gives_zero_features() {
        let adj = OrderedAdjacencySet::new(&path3(), 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let ws: Vec<Var> = (0..3).map(|_| g.constant(random(&mut rng, &[2, 4]))).collect();
        let out = mo_gcn_forward(&mut g, x, &adj, &ws).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_order_aggregates_normalized_neighbours() {
        let adj = OrderedAdjacencySet::new(&path3(), 1, false).unwrap();
        let s = Tensor::new(vec![3, 2], vec![1.0, 2.0, 10.0, 20.0, 3.0, 5.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(s);
        let w0 = g.constant(Tensor::eye(2));
        let w1 = g.constant(Tensor::eye(2));
        let out = mo_gcn_forward(&mut g, x, &adj, &[w0, w1]).unwrap();
        // Degrees (1, 2, 1): Ã¹[1][0] = Ã¹[1][2] = 1/√2.
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = g.value(out);
        assert!((v.at(&[1, 1, 0]) - (1.0 + 3.0) * r).abs() < 1e-12);
        assert!((v.at(&[1, 1, 1]) - (2.0 + 5.0) * r).abs() < 1e-12);
        assert!((v.at(&[0, 1, 0]) - 10.0 * r).abs() < 1e-12);
    }

    #[test]
    fn joint_count_mismatch_is_dimension_error() {
        let adj = OrderedAdjacencySet::new(&path3(), 0, false).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        let w = g.constant(Tensor::eye(2));
        assert!(matches!(
            mo_gcn_forward(&mut g, x, &adj, &[w]),
            Err(Error::Shape { op: "mo_gcn", .. })
        ));
    }

    fn goa_params(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize) -> GoaParams {
        GoaParams {
            w_q: g.constant(random(rng, &[d, d])),
            w_k: g.constant(random(rng, &[d, d])),
            w_o: g.constant(random(rng, &[d])),
        }
    }

    #[test]
    fn identical_orders_get_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (j, r, d) = (4, 3, 5);
        let slice = random(&mut rng, &[j, 1, d]);
        let mut data = Vec::new();
        for jj in 0..j {
            for _ in 0..=r {
                data.extend_from_slice(&slice.data()[jj * d..(jj + 1) * d]);
            }
        }
        let mut g = Graph::new();
        let ord = g.constant(Tensor::new(vec![j, r + 1, d], data).unwrap());
        let p = goa_params(&mut g, &mut rng, d);
        let out = goa_forward(&mut g, ord, &p, None).unwrap();
        for v in g.value(out.order_weights).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_order_passes_through_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (j, d) = (3, 4);
        let s0 = random(&mut rng, &[j, 1, d]);
        let mut g = Graph::new();
        let ord = g.constant(s0.clone());
        let p = goa_params(&mut g, &mut rng, d);
        let out = goa_forward(&mut g, ord, &p, None).unwrap();
        assert!(g.value(out.order_weights).data().iter().all(|v| *v == 1.0));
        for (o, s) in g.value(out.output).data().iter().zip(s0.data()) {
            assert_eq!(*o, s.max(0.0));
        }
    }

    /// Direct loop evaluation of the attention-weighted order sum.
    fn goa_oracle(ord: &Tensor, wq: &Tensor, wk: &Tensor, wo: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let s = ord.shape();
        let (j, orders, d) = (s[0], s[1], s[2]);
        let mut ott = vec![0.0; j * orders];
        let mut out = vec![0.0; j * d];
        for jj in 0..j {
            let mut logits = vec![0.0; orders];
            for k in 0..orders {
                for c in 0..d {
                    let mut qk = 0.0;
                    for e in 0..d {
                        let x = ord.at(&[jj, k, e]);
                        qk += x * wq.at(&[e, c]) + x * wk.at(&[e, c]);
                    }
                    logits[k] += qk.tanh() * wo.data()[c];
                }
            }
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..orders {
                ott[jj * orders + k] = logits[k].exp() / z;
                for c in 0..d {
                    out[jj * d + c] += ord.at(&[jj, k, c]) * ott[jj * orders + k];
                }
            }
        }
        (ott, out)
    }

    #[test]
    fn matches_loop_oracle_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let j = rng.random_range(1..=6);
            let r = rng.random_range(0..=3);
            let d = rng.random_range(1..=8);
            let ord_t = random(&mut rng, &[j, r + 1, d]);
            let wq = random(&mut rng, &[d, d]);
            let wk = random(&mut rng, &[d, d]);
            let wo = random(&mut rng, &[d]);
            let mut g = Graph::new();
            let ord = g.constant(ord_t.clone());
            let p = GoaParams {
                w_q: g.constant(wq.clone()),
                w_k: g.constant(wk.clone()),
                w_o: g.constant(wo.clone()),
            };
            let out = goa_forward(&mut g, ord, &p, None).unwrap();
            let (ott, combined) = goa_oracle(&ord_t, &wq, &wk, &wo);
            for (a, b) in g.value(out.order_weights).data().iter().zip(&ott) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in g.value(out.combined).data().iter().zip(&combined) {
                assert!((a - b).abs() < 1e-12);
            }
            for row in g.value(out.order_weights).data().chunks(r + 1) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
            }
        }
    }
}
