//! Error measures between a fit and ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{as_points, MorphableModel};
use crate::params::ParameterVector;

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(a: &nalgebra::UnitQuaternion<f64>, b: &nalgebra::UnitQuaternion<f64>) -> f64 {
    a.angle_to(b).to_degrees()
}

/// `‖t − t_gt‖ / ‖t_gt‖`.
pub fn translation_error(t: &nalgebra::Vector3<f64>, t_gt: &nalgebra::Vector3<f64>) -> f64 {
    (t - t_gt).norm() / t_gt.norm().max(f64::MIN_POSITIVE)
}

/// Mean landmark distance divided by `sqrt(w·h)` of the ground-truth bounding box.
pub fn nme(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_dim("landmarks", gt.len(), pred.len())?;
    if gt.is_empty() {
        return Err(Error::invalid("landmarks", "empty set"));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in gt {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let size = ((hi[0] - lo[0]) * (hi[1] - lo[1])).sqrt();
    if !(size > 0.0) {
        return Err(Error::Degenerate("landmark bounding box has zero area"));
    }
    let mean = pred.iter().zip(gt).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / gt.len() as f64;
    Ok(mean / size)
}

/// Root-mean-square vertex distance, in model units.
pub fn vertex_rmse(a: &[nalgebra::Vector3<f64>], b: &[nalgebra::Vector3<f64>]) -> Result<f64> {
    check_dim("vertices", b.len(), a.len())?;
    if a.is_empty() {
        return Err(Error::invalid("vertices", "empty set"));
    }
    Ok((a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / a.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub rotation_error_deg: Vec<f64>,
    pub translation_error: Vec<f64>,
    pub nme: Vec<f64>,
    pub max_rotation_error_deg: f64,
    pub mean_rotation_error_deg: f64,
    pub max_translation_error: f64,
    pub mean_nme: f64,
    pub vertex_rmse: f64,
}

/// Compares `fit` with `gt`; landmarks are projected through each view's camera.
pub fn evaluate_fit(model: &MorphableModel, intrinsics: &[crate::CameraIntrinsics], fit: &ParameterVector, gt: &ParameterVector) -> Result<FitMetrics> {
    fit.check_model(model)?;
    gt.check_model(model)?;
    check_dim("views", gt.views.len(), fit.views.len())?;
    check_dim("intrinsics", gt.views.len(), intrinsics.len())?;
    let vf = as_points(model.synthesize_shape(&fit.alpha, &fit.beta)?.as_slice());
    let vg = as_points(model.synthesize_shape(&gt.alpha, &gt.beta)?.as_slice());
    let lm = model.landmark_vertices();
    let project = |verts: &[nalgebra::Vector3<f64>], p: &ParameterVector, v: usize| -> Result<Vec<[f64; 2]>> {
        let pose = p.views[v].pose();
        lm.iter()
            .map(|&i| {
                let q = crate::camera::project(&verts[i], &pose, &intrinsics[v])?;
                Ok([q.u, q.v])
            })
            .collect()
    };
    let mut out = FitMetrics {
        rotation_error_deg: vec![],
        translation_error: vec![],
        nme: vec![],
        max_rotation_error_deg: 0.0,
        mean_rotation_error_deg: 0.0,
        max_translation_error: 0.0,
        mean_nme: 0.0,
        vertex_rmse: vertex_rmse(&vf, &vg)?,
    };
    for v in 0..gt.views.len() {
        out.rotation_error_deg.push(rotation_error_deg(&fit.views[v].rotation, &gt.views[v].rotation));
        out.translation_error.push(translation_error(&fit.views[v].translation, &gt.views[v].translation));
        out.nme.push(nme(&project(&vf, fit, v)?, &project(&vg, gt, v)?)?);
    }
    let n = gt.views.len().max(1) as f64;
    out.max_rotation_error_deg = out.rotation_error_deg.iter().copied().fold(0.0, f64::max);
    out.mean_rotation_error_deg = out.rotation_error_deg.iter().sum::<f64>() / n;
    out.max_translation_error = out.translation_error.iter().copied().fold(0.0, f64::max);
    out.mean_nme = out.nme.iter().sum::<f64>() / n;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    #[test]
    fn rotation_error_is_the_geodesic_angle() {
        let a = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3);
        let b = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -0.2);
        assert!((rotation_error_deg(&a, &b) - 0.5f64.to_degrees()).abs() < 1e-12);
        assert_eq!(rotation_error_deg(&a, &a), 0.0);
    }

    #[test]
    fn nme_normalizes_by_box_size() {
        let gt = [[0.0, 0.0], [4.0, 0.0], [0.0, 9.0]];
        let pred = [[0.6, 0.0], [4.0, 0.6], [0.0, 9.6]];
        assert!((nme(&pred, &gt).unwrap() - 0.1).abs() < 1e-12);
        assert!(nme(&pred, &[[1.0, 1.0]; 3]).is_err());
    }

    #[test]
    fn translation_error_is_relative() {
        let t = Vector3::new(0.0, 0.0, 5.0);
        assert!((translation_error(&Vector3::new(0.0, 0.05, 5.0), &t) - 0.01).abs() < 1e-12);
    }
}
