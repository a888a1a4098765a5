//! Pose error metrics: MPJPE and MPJPE after similarity alignment.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<usize> {
    if pred.shape() != gt.shape() || pred.rank() < 2 || *pred.shape().last().unwrap() != 3 {
        return Err(Error::shape(
            "mpjpe",
            format!("pred {:?} and gt {:?} must both be [.., J, 3]", pred.shape(), gt.shape()),
        ));
    }
    Ok(pred.numel() / 3)
}

fn joints(t: &Tensor) -> impl Iterator<Item = Vector3<f64>> + '_ {
    t.data().chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2]))
}

/// Mean Euclidean distance over all joints (and poses, for batched input).
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let n = check_pair(pred, gt)?;
    let total: f64 = joints(pred).zip(joints(gt)).map(|(p, q)| (p - q).norm()).sum();
    Ok(total / n as f64)
}

/// The similarity transform `x ↦ s·R·x + t` best mapping `pred` onto `gt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Least-squares similarity alignment of one `[J, 3]` pose onto another
/// (Umeyama). Fails when `gt` has fewer than three joints or is collinear.
pub fn align_similarity(pred: &Tensor, gt: &Tensor) -> Result<Similarity> {
    let n = check_pair(pred, gt)?;
    if pred.rank() != 2 {
        return Err(Error::shape("p_mpjpe", format!("expected one [J, 3] pose, got {:?}", pred.shape())));
    }
    if n < 3 {
        return Err(Error::Alignment(format!("{n} joints; at least 3 are needed")));
    }
    if !pred.is_finite() || !gt.is_finite() {
        return Err(Error::NonFinite("pose coordinates".into()));
    }
    let mu_p = joints(pred).sum::<Vector3<f64>>() / n as f64;
    let mu_g = joints(gt).sum::<Vector3<f64>>() / n as f64;

    let mut cov = Matrix3::zeros();
    let mut gt_scatter = Matrix3::zeros();
    let mut pred_var = 0.0;
    for (p, q) in joints(pred).zip(joints(gt)) {
        let (p, q) = (p - mu_p, q - mu_g);
        cov += q * p.transpose();
        gt_scatter += q * q.transpose();
        pred_var += p.norm_squared();
    }

    let spread = gt_scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= f64::MIN_POSITIVE || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Alignment("ground-truth pose is collinear".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let signs = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * signs * v_t;
    let scale = if pred_var > 0.0 {
        (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / pred_var
    } else {
        0.0
    };
    let translation = mu_g - scale * (rotation * mu_p);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// MPJPE after aligning `pred` to `gt` by translation, rotation and uniform
/// scale. Reflections are excluded.
pub fn p_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let sim = align_similarity(pred, gt)?;
    let n = pred.numel() / 3;
    let total: f64 = joints(pred)
        .zip(joints(gt))
        .map(|(p, q)| (sim.apply(&p) - q).norm())
        .sum();
    Ok(total / n as f64)
}
