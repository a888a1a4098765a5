//! Loss, Adam, flip augmentation, the training loop and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PoseSequenceRecord;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Mode;
use crate::metrics::{mpjpe, p_mpjpe};
use crate::model::{update_running_stats, PoseModel};
use crate::par;
use crate::params::ParamStore;
use crate::skeleton::SkeletonTopology;
use crate::tensor::Tensor;

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T_in, J, 2]`
    pub input: Tensor,
    /// `[J, 3]`
    pub target: Tensor,
}

/// Pairs each record's 2D frames with its central 3D pose, optionally
/// re-expressed relative to joint `root`.
pub fn samples_from_records(records: &[PoseSequenceRecord], root: Option<usize>) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|rec| {
            let mut target = rec
                .central_target()
                .ok_or_else(|| Error::Config(format!("record {} has no frames_3d", rec.id)))??;
            if let Some(r) = root {
                let origin: [f64; 3] = target.data()[3 * r..3 * r + 3].try_into().expect("3 coords");
                for p in target.data_mut().chunks_exact_mut(3) {
                    p.iter_mut().zip(origin).for_each(|(c, o)| *c -= o);
                }
            }
            Ok(Sample {
                id: rec.id.clone(),
                input: rec.input_tensor()?,
                target,
            })
        })
        .collect()
}

/// Mirrors a sample: negates x and swaps each left/right joint pair in both
/// the 2D sequence `[T, J, 2]` and the 3D pose `[J, 3]`.
pub fn flip_augment(seq: &Tensor, pose: &Tensor, topology: &SkeletonTopology) -> Result<(Tensor, Tensor)> {
    if topology.flip_pairs.is_empty() {
        return Err(Error::Config("topology defines no flip_pairs".into()));
    }
    let perm = topology.flip_permutation();
    let flip = |t: &Tensor| -> Result<Tensor> {
        let j = topology.num_joints;
        let c = *t.shape().last().unwrap();
        if !t.numel().is_multiple_of(j * c) || t.shape()[t.rank() - 2] != j {
            return Err(Error::shape("flip", format!("{:?} has no J={j} axis", t.shape())));
        }
        let mut out = t.clone();
        for (dst, src) in out.data_mut().chunks_exact_mut(j * c).zip(t.data().chunks_exact(j * c)) {
            for (a, &b) in perm.iter().enumerate() {
                dst[a * c..(a + 1) * c].copy_from_slice(&src[b * c..(b + 1) * c]);
                dst[a * c] = -dst[a * c];
            }
        }
        Ok(out)
    };
    Ok((flip(seq)?, flip(pose)?))
}

/// Mean per-joint Euclidean distance between `[B, J, 3]` nodes.
pub fn mpjpe_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("mpjpe_loss", format!("{:?} vs {:?}", g.shape(pred), g.shape(target))));
    }
    let count = g.value(diff).numel() / 3;
    let dist = g.norm(diff);
    let total = g.sum_all(dist)?;
    Ok(g.scale(total, 1.0 / count as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate factor applied after every epoch.
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.95,
        }
    }
}

/// Adam with per-epoch exponential learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let c = &config;
        let ok = c.lr >= 0.0
            && c.lr.is_finite()
            && (0.0..1.0).contains(&c.beta1)
            && (0.0..1.0).contains(&c.beta2)
            && c.eps > 0.0
            && c.decay > 0.0
            && c.decay <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {c:?}")));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            lr: config.lr,
            config,
            step: 0,
            names: store.names().map(String::from).collect(),
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update. `grads` follows store order. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.names.len() || store.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.names.len()
            )));
        }
        for ((name, grad), (_, t)) in self.names.iter().zip(grads).zip(store.iter()) {
            if grad.len() != t.numel() {
                return Err(Error::Contract(format!("gradient size mismatch for {name}")));
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, t)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.config.decay;
    }
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_flip_prob() -> f64 {
    0.5
}
fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    /// Evaluate every this many epochs (and always after the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Worker threads; unset uses every core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: AdamConfig::default(),
            seed: 0,
            augment: true,
            flip_prob: default_flip_prob(),
            eval_every: default_eval_every(),
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_mpjpe: Option<f64>,
    pub eval_pmpjpe: Option<f64>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from("epoch,lr,train_loss,eval_mpjpe,eval_pmpjpe\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.epoch,
            p.lr,
            p.train_loss,
            opt(p.eval_mpjpe),
            opt(p.eval_pmpjpe)
        );
    }
    out
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    std::fs::write(path, curve_csv(curve))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// Parameters at the epoch with the lowest evaluation MPJPE.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_mpjpe: f64,
}

/// Independent random stream for `(seed, epoch, slot)`.
fn stream(seed: u64, epoch: usize, slot: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&slot.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(tensors[0].shape());
    let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn check_samples(model: &PoseModel, samples: &[Sample], what: &str) -> Result<()> {
    let (t_in, j) = (model.config().input_frames, model.num_joints());
    for s in samples {
        if s.input.shape() != [t_in, j, 2] || s.target.shape() != [j, 3] {
            return Err(Error::Config(format!(
                "{what} sample {} has input {:?} and target {:?}; the model expects [{t_in}, {j}, 2] and [{j}, 3]",
                s.id,
                s.input.shape(),
                s.target.shape()
            )));
        }
    }
    Ok(())
}

/// One optimizer step on a minibatch; returns the batch loss.
pub fn train_step(
    model: &PoseModel,
    store: &mut ParamStore,
    adam: &mut Adam,
    inputs: &Tensor,
    targets: &Tensor,
) -> Result<f64> {
    let input = model.prepare_input(inputs)?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let x = g.constant(input);
    let y = g.constant(targets.clone());
    let out = model.forward(&mut g, &bound, store, x, Mode::Train)?;
    let loss = mpjpe_loss(&mut g, out.pose, y)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = bound
        .iter()
        .map(|(_, v)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    adam.step(store, &grads)?;
    update_running_stats(store, &out.bn_updates)?;
    Ok(value)
}

/// Minibatch training with seeded shuffling and flip augmentation. The
/// evaluation set defaults to the training set.
pub fn train(
    model: &PoseModel,
    store: &mut ParamStore,
    train_set: &[Sample],
    eval_set: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_samples(model, train_set, "training")?;
    let eval_set = eval_set.unwrap_or(train_set);
    check_samples(model, eval_set, "evaluation")?;
    if cfg.augment && cfg.flip_prob > 0.0 && model.topology().flip_pairs.is_empty() {
        return Err(Error::Config("augmentation needs topology flip_pairs".into()));
    }
    par::with_threads(cfg.threads, || {
        let mut adam = Adam::new(store, cfg.optimizer.clone())?;
        let mut outcome = TrainOutcome {
            curve: Vec::with_capacity(cfg.epochs),
            best: store.clone(),
            best_epoch: 0,
            best_mpjpe: f64::INFINITY,
        };
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut stream(cfg.seed, epoch, u64::MAX));
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut flipped = Vec::with_capacity(batch.len());
                for &i in batch {
                    let s = &train_set[i];
                    let flip = cfg.augment && stream(cfg.seed, epoch, i as u64).random_bool(cfg.flip_prob);
                    flipped.push(if flip {
                        flip_augment(&s.input, &s.target, model.topology())?
                    } else {
                        (s.input.clone(), s.target.clone())
                    });
                }
                let inputs = stack(&flipped.iter().map(|p| &p.0).collect::<Vec<_>>())?;
                let targets = stack(&flipped.iter().map(|p| &p.1).collect::<Vec<_>>())?;
                loss_sum += batch.len() as f64 * train_step(model, store, &mut adam, &inputs, &targets)?;
            }
            let mut point = CurvePoint {
                epoch,
                lr: adam.lr,
                train_loss: loss_sum / train_set.len() as f64,
                eval_mpjpe: None,
                eval_pmpjpe: None,
            };
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let report = evaluate(model, store, eval_set, cfg.batch_size)?;
                point.eval_mpjpe = Some(report.mpjpe);
                point.eval_pmpjpe = report.p_mpjpe;
                if report.mpjpe < outcome.best_mpjpe {
                    outcome.best_mpjpe = report.mpjpe;
                    outcome.best_epoch = epoch;
                    outcome.best = store.clone();
                }
            }
            log::info!(
                "epoch {epoch}: lr {:.3e} loss {:.6} eval {:?}",
                point.lr,
                point.train_loss,
                point.eval_mpjpe
            );
            outcome.curve.push(point);
            adam.end_epoch();
        }
        Ok(outcome)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub id: String,
    pub mpjpe: f64,
    /// Absent when the ground truth cannot be aligned (collinear pose).
    pub p_mpjpe: Option<f64>,
}

/// Errors averaged over joints, then sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_sequences: usize,
    pub mpjpe: f64,
    pub p_mpjpe: Option<f64>,
    pub skipped_alignment: usize,
    pub sequences: Vec<SequenceEval>,
}

/// Evaluation-mode predictions for every sample, batched in parallel.
pub fn predict_samples(model: &PoseModel, store: &ParamStore, samples: &[Sample], batch_size: usize) -> Result<Vec<Tensor>> {
    let batch_size = batch_size.max(1);
    let batches = samples.len().div_ceil(batch_size);
    let j = model.num_joints();
    let per_batch = par::map_range(batches, |b| -> Result<Vec<Tensor>> {
        let chunk = &samples[b * batch_size..((b + 1) * batch_size).min(samples.len())];
        let inputs = stack(&chunk.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        let poses = model.predict(store, &inputs)?;
        poses
            .data()
            .chunks_exact(j * 3)
            .map(|p| Tensor::new(vec![j, 3], p.to_vec()))
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for batch in per_batch {
        out.extend(batch?);
    }
    Ok(out)
}

pub fn evaluate(model: &PoseModel, store: &ParamStore, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    check_samples(model, samples, "evaluation")?;
    let preds = predict_samples(model, store, samples, batch_size)?;
    let mut sequences = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for (s, pred) in samples.iter().zip(&preds) {
        let p = match p_mpjpe(pred, &s.target) {
            Ok(v) => Some(v),
            Err(Error::Alignment(msg)) => {
                log::warn!("skipping P-MPJPE for {}: {msg}", s.id);
                skipped += 1;
                None
            }
            Err(e) => return Err(e),
        };
        sequences.push(SequenceEval {
            id: s.id.clone(),
            mpjpe: mpjpe(pred, &s.target)?,
            p_mpjpe: p,
        });
    }
    let n = sequences.len();
    let aligned: Vec<f64> = sequences.iter().filter_map(|s| s.p_mpjpe).collect();
    Ok(EvalReport {
        num_sequences: n,
        mpjpe: sequences.iter().map(|s| s.mpjpe).sum::<f64>() / n as f64,
        p_mpjpe: (!aligned.is_empty()).then(|| aligned.iter().sum::<f64>() / aligned.len() as f64),
        skipped_alignment: skipped,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        adam.step(&mut store, &[vec![1.0]]).unwrap();
        assert!((store.get("w").unwrap().data()[0] + 3e-4).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[3], 0.7));
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        adam.step(&mut store, &[vec![0.0; 3]]).unwrap();
        assert_eq!(store, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn nan_gradient_aborts_with_path() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b.weight", Tensor::scalar(1.0));
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        let err = adam.step(&mut store, &[vec![1.0], vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("b.weight"), "{err}");
        assert_eq!(store, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn decay_schedule() {
        let store = ParamStore::new();
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        for _ in 0..3 {
            adam.end_epoch();
        }
        assert!((adam.lr - 3e-4 * 0.95f64.powi(3)).abs() < 1e-18);
    }

    #[test]
    fn flip_is_an_involution_and_needs_pairs() {
        let topo = SkeletonTopology::builtin("tiny5").unwrap();
        let seq = Tensor::new(vec![2, 5, 2], (0..20).map(|i| i as f64 * 0.1).collect()).unwrap();
        let pose = Tensor::new(vec![5, 3], (0..15).map(|i| i as f64).collect()).unwrap();
        let (s1, p1) = flip_augment(&seq, &pose, &topo).unwrap();
        assert_eq!(s1.at(&[0, 1, 0]), -seq.at(&[0, 2, 0]));
        assert_eq!(s1.at(&[0, 1, 1]), seq.at(&[0, 2, 1]));
        let (s2, p2) = flip_augment(&s1, &p1, &topo).unwrap();
        assert_eq!((s2, p2), (seq.clone(), pose.clone()));
        let mut bare = topo.clone();
        bare.flip_pairs.clear();
        assert!(matches!(flip_augment(&seq, &pose, &bare), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lr_keeps_params_and_loss() {
        let model = PoseModel::new(ModelConfig::tiny()).unwrap();
        let mut store = model.init_params();
        let sample = Sample {
            id: "s".into(),
            input: Tensor::new(vec![5, 5, 2], (0..50).map(|i| (i as f64).cos()).collect()).unwrap(),
            target: Tensor::new(vec![5, 3], (0..15).map(|i| (i as f64).sin()).collect()).unwrap(),
        };
        let cfg = TrainConfig {
            epochs: 3,
            optimizer: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            augment: false,
            ..TrainConfig::default()
        };
        let before: Vec<Tensor> = store.tensors();
        let out = train(&model, &mut store, &[sample], None, &cfg).unwrap();
        assert_eq!(store.tensors(), before);
        assert!(out.curve.iter().all(|p| p.train_loss == out.curve[0].train_loss));
    }

    #[test]
    fn empty_training_set_rejected() {
        let model = PoseModel::new(ModelConfig::tiny()).unwrap();
        let mut store = model.init_params();
        assert!(train(&model, &mut store, &[], None, &TrainConfig::default()).is_err());
    }
}
