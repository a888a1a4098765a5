//! Line-delimited JSON pose sequences and a synthetic articulated-motion
//! generator.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;
use crate::tensor::Tensor;

/// 3D supervision: either the central frame alone or every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Frames3d {
    Central(Vec<[f64; 3]>),
    Sequence(Vec<Vec<[f64; 3]>>),
}

/// One input sequence with its optional 3D target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSequenceRecord {
    pub id: String,
    pub topology_id: String,
    pub frames_2d: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_3d: Option<Frames3d>,
}

impl PoseSequenceRecord {
    pub fn num_frames(&self) -> usize {
        self.frames_2d.len()
    }

    pub fn num_joints(&self) -> usize {
        self.frames_2d.first().map_or(0, Vec::len)
    }

    /// Checks frame counts, joint counts and finiteness.
    pub fn validate(&self, num_joints: usize) -> std::result::Result<(), String> {
        if self.frames_2d.is_empty() {
            return Err("frames_2d is empty".into());
        }
        for (t, frame) in self.frames_2d.iter().enumerate() {
            if frame.len() != num_joints {
                return Err(format!(
                    "frame {t} of frames_2d has {} joints, expected J={num_joints}",
                    frame.len()
                ));
            }
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("non-finite coordinate in frame {t} of frames_2d"));
            }
        }
        let check3 = |frame: &[[f64; 3]], what: &str| {
            if frame.len() != num_joints {
                return Err(format!("{what} has {} joints, expected J={num_joints}", frame.len()));
            }
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("non-finite coordinate in {what}"));
            }
            Ok(())
        };
        match &self.frames_3d {
            None => {}
            Some(Frames3d::Central(pose)) => check3(pose, "frames_3d")?,
            Some(Frames3d::Sequence(seq)) => {
                if seq.len() != self.frames_2d.len() {
                    return Err(format!(
                        "frames_3d has {} frames but frames_2d has {}",
                        seq.len(),
                        self.frames_2d.len()
                    ));
                }
                for (t, frame) in seq.iter().enumerate() {
                    check3(frame, &format!("frame {t} of frames_3d"))?;
                }
            }
        }
        Ok(())
    }

    /// `[T_in, J, 2]`
    pub fn input_tensor(&self) -> Result<Tensor> {
        let data = self.frames_2d.iter().flatten().flatten().copied().collect();
        Tensor::new(vec![self.num_frames(), self.num_joints(), 2], data)
    }

    /// The `[J, 3]` target of the central frame (`T_in / 2`).
    pub fn central_target(&self) -> Option<Result<Tensor>> {
        let pose = match self.frames_3d.as_ref()? {
            Frames3d::Central(p) => p,
            Frames3d::Sequence(s) => &s[s.len() / 2],
        };
        let data = pose.iter().flatten().copied().collect();
        Some(Tensor::new(vec![pose.len(), 3], data))
    }
}

/// Reads one record per non-blank line, validating each against `topology`.
pub fn load_dataset(path: &Path, topology: Option<&SkeletonTopology>) -> Result<Vec<PoseSequenceRecord>> {
    let file = fs::File::open(path)?;
    let data_err = |line: usize, msg: String| Error::Data {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseSequenceRecord =
            serde_json::from_str(&line).map_err(|e| data_err(line_no, e.to_string()))?;
        let joints = topology.map_or(rec.num_joints(), |t| t.num_joints);
        rec.validate(joints).map_err(|m| data_err(line_no, m))?;
        if let Some(first) = records.first().map(|r: &PoseSequenceRecord| r.num_frames()) {
            if rec.num_frames() != first {
                return Err(data_err(
                    line_no,
                    format!("{} frames, but earlier records have {first}", rec.num_frames()),
                ));
            }
        }
        records.push(rec);
    }
    if records.is_empty() {
        log::warn!("{} contains no records", path.display());
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[PoseSequenceRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn default_noise() -> f64 {
    0.01
}
fn default_amplitude() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sequences: usize,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of 2D noise, in units of skeleton scale.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Peak joint rotation in radians; zero gives static poses.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

impl SyntheticConfig {
    pub fn new(sequences: usize, frames: usize, seed: u64) -> Self {
        Self {
            sequences,
            frames,
            seed,
            noise: default_noise(),
            amplitude: default_amplitude(),
        }
    }
}

/// Rest-pose bone vectors (child minus parent), indexed by child joint.
/// The largest distance between two joints of the rest pose is 1.
pub fn rest_bones(topology: &SkeletonTopology) -> Vec<Vector3<f64>> {
    let parents = topology.parents();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1_ab1e ^ topology.num_joints as u64);
    let mut bones = vec![Vector3::zeros(); topology.num_joints];
    for j in topology.traversal_order() {
        if parents[j].is_none() {
            continue;
        }
        let v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let len = rng.random_range(0.6..1.0);
        bones[j] = v.normalize() * len;
    }
    let pose = forward_kinematics(topology, &bones, &vec![Rotation3::identity(); topology.num_joints]);
    let mut extent: f64 = 0.0;
    for a in &pose {
        for b in &pose {
            extent = extent.max((a - b).norm());
        }
    }
    if extent > 0.0 {
        bones.iter_mut().for_each(|b| *b /= extent);
    }
    bones
}

/// Joint positions with the root at the origin; `local[j]` rotates the
/// subtree below joint `j`.
pub fn forward_kinematics(
    topology: &SkeletonTopology,
    bones: &[Vector3<f64>],
    local: &[Rotation3<f64>],
) -> Vec<Vector3<f64>> {
    let parents = topology.parents();
    let mut global = vec![Rotation3::identity(); topology.num_joints];
    let mut pos = vec![Vector3::zeros(); topology.num_joints];
    for j in topology.traversal_order() {
        match parents[j] {
            None => global[j] = local[j],
            Some(p) => {
                global[j] = global[p] * local[j];
                pos[j] = pos[p] + global[p] * (local[j] * bones[j]);
            }
        }
    }
    pos
}

struct JointMotion {
    axis: Unit<Vector3<f64>>,
    amplitude: f64,
    freq: f64,
    phase: f64,
}

fn check_synthetic(cfg: &SyntheticConfig) -> Result<()> {
    if cfg.frames == 0 {
        return Err(Error::Config("synthetic sequences need at least one frame".into()));
    }
    if !cfg.noise.is_finite() || cfg.noise < 0.0 || !cfg.amplitude.is_finite() {
        return Err(Error::Config("noise must be non-negative and amplitude finite".into()));
    }
    Ok(())
}

/// 3D joint trajectories `[sequence][frame][joint]`: each joint swings
/// sinusoidally about its own axis and positions follow by forward
/// kinematics from fixed bone vectors, root at the origin.
pub fn synthetic_motion(cfg: &SyntheticConfig, topology: &SkeletonTopology) -> Result<Vec<Vec<Vec<Vector3<f64>>>>> {
    check_synthetic(cfg)?;
    let bones = rest_bones(topology);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.sequences);
    for _ in 0..cfg.sequences {
        let motions: Vec<JointMotion> = (0..topology.num_joints)
            .map(|_| {
                let v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                JointMotion {
                    axis: Unit::new_normalize(v),
                    amplitude: cfg.amplitude * rng.random_range(0.3..1.0),
                    freq: rng.random_range(0.05..0.3),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let frames = (0..cfg.frames)
            .map(|t| {
                let local: Vec<Rotation3<f64>> = motions
                    .iter()
                    .map(|m| {
                        let angle = m.amplitude * (m.freq * t as f64 + m.phase).sin();
                        Rotation3::from_axis_angle(&m.axis, angle)
                    })
                    .collect();
                forward_kinematics(topology, &bones, &local)
            })
            .collect();
        out.push(frames);
    }
    Ok(out)
}

/// Synthetic records from [`synthetic_motion`]: the 2D input is the
/// orthographic projection onto `(x, y)` plus Gaussian noise, and the
/// target is the root-relative central frame.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    topology: &SkeletonTopology,
    topology_id: &str,
) -> Result<Vec<PoseSequenceRecord>> {
    let motion = synthetic_motion(cfg, topology)?;
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let central = cfg.frames / 2;
    let records = motion
        .iter()
        .enumerate()
        .map(|(s, frames)| {
            let root = frames[central][topology.root];
            let target = frames[central]
                .iter()
                .map(|p| {
                    let q = p - root;
                    [q.x, q.y, q.z]
                })
                .collect();
            let frames_2d = frames
                .iter()
                .map(|pose| {
                    pose.iter()
                        .map(|p| {
                            let mut xy = [p.x, p.y];
                            if cfg.noise > 0.0 {
                                xy.iter_mut().for_each(|c| *c += noise.sample(&mut rng));
                            }
                            xy
                        })
                        .collect()
                })
                .collect();
            PoseSequenceRecord {
                id: format!("seq{s:05}"),
                topology_id: topology_id.to_string(),
                frames_2d,
                frames_3d: Some(Frames3d::Central(target)),
            }
        })
        .collect();
    Ok(records)
}
