//! Finite-difference gradient checks over the spatial stage, one
//! transformer block, and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Mode};
use crate::model::{PoseModel, INPUT_DIM};
use crate::params::{Bound, ParamStore};
use crate::spatial::{goa_forward, mo_gcn_forward, GoaParams};
use crate::temporal::{bat_block_forward, BatBlock};
use crate::tensor::Tensor;
use crate::train::mpjpe_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckTarget {
    All,
    Spatial,
    Temporal,
    Model,
}

impl CheckTarget {
    fn includes(self, other: CheckTarget) -> bool {
        self == CheckTarget::All || self == other
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    /// Names of the checked inputs, indexed like `report.worst.0`.
    pub inputs: Vec<String>,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn worst_input(&self) -> &str {
        &self.inputs[self.report.worst.0]
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Perturbs parameters away from their initial values so that norm gains,
/// zero biases and unit W^J do not hide errors.
fn jittered(store: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = store.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    out
}

/// `Σ out ⊙ probe` with a fixed random probe, a scalar that depends on
/// every output coordinate.
fn project(g: &mut Graph, out: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p)?;
    g.sum_all(prod)
}

fn named_inputs(store: &ParamStore, prefix: &str, lead: &str) -> (Vec<String>, Vec<Tensor>) {
    let mut names = vec![lead.to_string()];
    let mut tensors = vec![];
    for (n, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        names.push(n.to_string());
        tensors.push(t.clone());
    }
    (names, tensors)
}

/// Runs the selected checks with batch size 2 in training mode.
pub fn gradcheck_suite(model: &PoseModel, target: CheckTarget, epsilon: f64, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model.config();
    let (b, t, j, d, width) = (2, cfg.frames(), model.num_joints(), cfg.hidden_dim, model.width());
    let store = jittered(&model.init_params(), &mut rng);
    let mut results = Vec::new();

    if target.includes(CheckTarget::Spatial) {
        let x = random(&mut rng, &[b, t, j, INPUT_DIM], 1.0);
        let probe = random(&mut rng, &[b, t, j, d], 1.0);
        let (names, params) = named_inputs(&store, "spatial.", "input");
        let mut inputs = vec![x];
        inputs.extend(params);
        let adjacency = model.adjacency();
        let orders = cfg.max_order + 1;
        let report = check_gradients(
            |g, vars| {
                let x = vars[0];
                let (weights, rest) = vars[1..].split_at(orders);
                let ord = mo_gcn_forward(g, x, adjacency, weights)?;
                let goa = GoaParams {
                    w_q: rest[0],
                    w_k: rest[1],
                    w_o: rest[2],
                };
                let bn = BatchNorm {
                    gain: rest[3],
                    bias: rest[4],
                    running: None,
                };
                let out = goa_forward(g, ord, &goa, Some(&bn))?;
                project(g, out.output, &probe)
            },
            &inputs,
            epsilon,
        )?;
        results.push(SuiteResult {
            name: "spatial",
            inputs: names,
            report,
        });
    }

    if target.includes(CheckTarget::Temporal) {
        let x = random(&mut rng, &[b, t, j, d], 1.0);
        let probe = random(&mut rng, &[b, t, width], 1.0);
        let block_store = {
            let mut s = ParamStore::new();
            for (n, v) in store.iter().filter(|(n, _)| n.starts_with("bat.0.")) {
                s.insert(n, v.clone());
            }
            s
        };
        let (names, params) = named_inputs(&store, "bat.0.", "input");
        let mut inputs = vec![x];
        inputs.extend(params);
        let settings = model.bcma_settings();
        let report = check_gradients(
            |g, vars| {
                let bound = Bound::from_vars(&block_store, &vars[1..])?;
                let block = BatBlock::bind(&bound, &block_store, "bat.0", &settings, Mode::Train)?;
                let out = bat_block_forward(g, vars[0], &block)?;
                project(g, out.output, &probe)
            },
            &inputs,
            epsilon,
        )?;
        results.push(SuiteResult {
            name: "temporal",
            inputs: names,
            report,
        });
    }

    if target.includes(CheckTarget::Model) {
        let x = random(&mut rng, &[b, t, j, INPUT_DIM], 1.0);
        let y = random(&mut rng, &[b, j, 3], 1.0);
        let (names, params) = named_inputs(&store, "", "input");
        let mut inputs = vec![x];
        inputs.extend(params);
        let report = check_gradients(
            |g, vars| {
                let bound = Bound::from_vars(&store, &vars[1..])?;
                let out = model.forward(g, &bound, &store, vars[0], Mode::Train)?;
                let target = g.constant(y.clone());
                mpjpe_loss(g, out.pose, target)
            },
            &inputs,
            epsilon,
        )?;
        results.push(SuiteResult {
            name: "model",
            inputs: names,
            report,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn tiny_suite_passes() {
        let model = PoseModel::new(ModelConfig::tiny()).unwrap();
        for r in gradcheck_suite(&model, CheckTarget::All, 1e-6, 0).unwrap() {
            assert!(r.report.max_rel_error < 1e-5, "{} {:?} at {}", r.name, r.report, r.worst_input());
        }
    }
}
