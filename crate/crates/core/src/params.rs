//! Per-subject coefficients and per-view pose and lighting.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{euler_from_rotation, rotation_from_euler, PoseSE3};
use crate::error::{check_dim, Error, Result};
use crate::model::MorphableModel;
use crate::sh::SH_COEFFS;

/// Flat size of one view's parameters: quaternion (4), translation (3), lighting (27).
pub const VIEW_PACKED_DIM: usize = 4 + 3 + SH_COEFFS;
/// Local (tangent) size of one view's parameters: rotation vector (3), translation (3), lighting (27).
pub const VIEW_TANGENT_DIM: usize = 3 + 3 + SH_COEFFS;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewParams {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub sh: [f64; SH_COEFFS],
}

impl ViewParams {
    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::from_quaternion(&self.rotation, self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub views: Vec<ViewParams>,
}

/// What a tangent coordinate controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Identity,
    Expression,
    Albedo,
    Rotation { view: usize },
    Translation { view: usize },
    Lighting { view: usize },
}

impl ParamGroup {
    pub fn view(&self) -> Option<usize> {
        match *self {
            ParamGroup::Rotation { view } | ParamGroup::Translation { view } | ParamGroup::Lighting { view } => {
                Some(view)
            }
            _ => None,
        }
    }
}

impl ParameterVector {
    pub fn zeros_for(model: &MorphableModel, views: Vec<ViewParams>) -> Self {
        Self {
            alpha: vec![0.0; model.n_id()],
            beta: vec![0.0; model.n_exp()],
            gamma: vec![0.0; model.n_alb()],
            views,
        }
    }

    pub fn n_coefficients(&self) -> usize {
        self.alpha.len() + self.beta.len() + self.gamma.len()
    }

    pub fn packed_dim(&self) -> usize {
        self.n_coefficients() + VIEW_PACKED_DIM * self.views.len()
    }

    pub fn tangent_dim(&self) -> usize {
        self.n_coefficients() + VIEW_TANGENT_DIM * self.views.len()
    }

    pub fn check_model(&self, model: &MorphableModel) -> Result<()> {
        check_dim("alpha", model.n_id(), self.alpha.len())?;
        check_dim("beta", model.n_exp(), self.beta.len())?;
        check_dim("gamma", model.n_alb(), self.gamma.len())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            let n = v.rotation.quaternion().norm();
            if (n - 1.0).abs() >= 1e-9 {
                return Err(Error::invalid("parameters", format!("view {i} quaternion norm {n}")));
            }
        }
        let finite = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain(&self.gamma)
            .chain(self.views.iter().flat_map(|v| v.translation.iter().chain(v.sh.iter())))
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("parameters", "non-finite value"));
        }
        Ok(())
    }

    /// Flat array: `alpha, beta, gamma`, then per view `q (w, x, y, z), t, sh`.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.packed_dim());
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.gamma);
        for v in &self.views {
            let q = v.rotation.quaternion();
            out.extend_from_slice(&[q.w, q.i, q.j, q.k]);
            out.extend_from_slice(v.translation.as_slice());
            out.extend_from_slice(&v.sh);
        }
        out
    }

    pub fn unpack(flat: &[f64], n_id: usize, n_exp: usize, n_alb: usize) -> Result<Self> {
        let nc = n_id + n_exp + n_alb;
        if flat.len() < nc || !(flat.len() - nc).is_multiple_of(VIEW_PACKED_DIM) {
            return Err(Error::DimensionMismatch {
                what: "packed parameters",
                expected: nc,
                got: flat.len(),
            });
        }
        let views = flat[nc..]
            .chunks_exact(VIEW_PACKED_DIM)
            .map(|c| {
                let mut sh = [0.0; SH_COEFFS];
                sh.copy_from_slice(&c[7..]);
                ViewParams {
                    rotation: UnitQuaternion::new_unchecked(Quaternion::new(c[0], c[1], c[2], c[3])),
                    translation: Vector3::new(c[4], c[5], c[6]),
                    sh,
                }
            })
            .collect();
        let p = Self {
            alpha: flat[..n_id].to_vec(),
            beta: flat[n_id..n_id + n_exp].to_vec(),
            gamma: flat[n_id + n_exp..nc].to_vec(),
            views,
        };
        p.validate()?;
        Ok(p)
    }

    /// Group of every tangent coordinate, in tangent order.
    pub fn tangent_groups(&self) -> Vec<ParamGroup> {
        let mut g = Vec::with_capacity(self.tangent_dim());
        g.extend(std::iter::repeat_n(ParamGroup::Identity, self.alpha.len()));
        g.extend(std::iter::repeat_n(ParamGroup::Expression, self.beta.len()));
        g.extend(std::iter::repeat_n(ParamGroup::Albedo, self.gamma.len()));
        for view in 0..self.views.len() {
            g.extend(std::iter::repeat_n(ParamGroup::Rotation { view }, 3));
            g.extend(std::iter::repeat_n(ParamGroup::Translation { view }, 3));
            g.extend(std::iter::repeat_n(ParamGroup::Lighting { view }, SH_COEFFS));
        }
        g
    }

    /// Moves along a tangent vector. Rotations are updated on the left by
    /// the exponential of the rotation-vector block and renormalized.
    pub fn retract(&self, delta: &[f64]) -> Self {
        assert_eq!(delta.len(), self.tangent_dim(), "tangent vector dimension");
        let mut out = self.clone();
        let (na, nb, ng) = (self.alpha.len(), self.beta.len(), self.gamma.len());
        for (x, d) in out.alpha.iter_mut().zip(&delta[..na]) {
            *x += d;
        }
        for (x, d) in out.beta.iter_mut().zip(&delta[na..na + nb]) {
            *x += d;
        }
        for (x, d) in out.gamma.iter_mut().zip(&delta[na + nb..na + nb + ng]) {
            *x += d;
        }
        let base = na + nb + ng;
        for (v, chunk) in out.views.iter_mut().zip(delta[base..].chunks_exact(VIEW_TANGENT_DIM)) {
            let w = Vector3::new(chunk[0], chunk[1], chunk[2]);
            if w != Vector3::zeros() {
                let q = UnitQuaternion::from_scaled_axis(w) * v.rotation;
                v.rotation = UnitQuaternion::new_normalize(q.into_inner());
            }
            v.translation += Vector3::new(chunk[3], chunk[4], chunk[5]);
            for (s, d) in v.sh.iter_mut().zip(&chunk[6..]) {
                *s += d;
            }
        }
        out
    }

    /// Short hex digest of the packed representation.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.pack() {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> ParamsJson {
        ParamsJson {
            model_digest: None,
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            views: self
                .views
                .iter()
                .map(|v| ViewParamsJson {
                    rotation_euler_rad: euler_from_rotation(&v.rotation),
                    translation: [v.translation.x, v.translation.y, v.translation.z],
                    sh: v.sh.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_json(j: &ParamsJson) -> Result<Self> {
        let views = j
            .views
            .iter()
            .map(|v| {
                check_dim("lighting coefficients", SH_COEFFS, v.sh.len())?;
                let mut sh = [0.0; SH_COEFFS];
                sh.copy_from_slice(&v.sh);
                Ok(ViewParams {
                    rotation: rotation_from_euler(v.rotation_euler_rad),
                    translation: Vector3::from(v.translation),
                    sh,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = Self {
            alpha: j.alpha.clone(),
            beta: j.beta.clone(),
            gamma: j.gamma.clone(),
            views,
        };
        p.validate()?;
        Ok(p)
    }

    /// The value that survives a JSON round trip (rotations pass through Euler angles).
    pub fn canonicalized(&self) -> Result<Self> {
        Self::from_json(&self.to_json())
    }
}

/// External JSON form; rotations are Euler angles `(x, y, z)` in radians, `Rz * Ry * Rx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    /// Digest of the model the parameters belong to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_digest: Option<String>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub views: Vec<ViewParamsJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewParamsJson {
    pub rotation_euler_rad: [f64; 3],
    pub translation: [f64; 3],
    pub sh: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_params() -> impl Strategy<Value = ParameterVector> {
        (
            prop::collection::vec(-3.0f64..3.0, 0..5),
            prop::collection::vec(-3.0f64..3.0, 0..4),
            prop::collection::vec(-3.0f64..3.0, 0..4),
            prop::collection::vec(
                (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-5.0f64..5.0), prop::array::uniform27(-4.0f64..4.0)),
                1..4,
            ),
        )
            .prop_map(|(alpha, beta, gamma, views)| ParameterVector {
                alpha,
                beta,
                gamma,
                views: views
                    .into_iter()
                    .map(|(r, t, sh)| ViewParams {
                        rotation: UnitQuaternion::from_scaled_axis(Vector3::from(r)),
                        translation: Vector3::from(t),
                        sh,
                    })
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn pack_unpack_is_lossless(p in arb_params()) {
            let flat = p.pack();
            prop_assert_eq!(flat.len(), p.n_coefficients() + VIEW_PACKED_DIM * p.views.len());
            let back = ParameterVector::unpack(&flat, p.alpha.len(), p.beta.len(), p.gamma.len()).unwrap();
            prop_assert_eq!(back.pack(), flat);
            for v in &back.views {
                prop_assert!((v.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn retract_keeps_unit_quaternions(p in arb_params(), scale in -1.0f64..1.0) {
            let delta: Vec<f64> = (0..p.tangent_dim()).map(|i| scale * ((i as f64) * 0.37).sin()).collect();
            let q = p.retract(&delta);
            prop_assert!(q.validate().is_ok());
        }
    }

    #[test]
    fn unpack_rejects_bad_lengths() {
        assert!(ParameterVector::unpack(&[0.0; 10], 1, 1, 1).is_err());
        let mut flat = vec![0.0; 3 + VIEW_PACKED_DIM];
        flat[3] = 2.0;
        assert!(ParameterVector::unpack(&flat, 1, 1, 1).is_err());
    }

    #[test]
    fn retract_rotation_block_rotates_by_the_vector_norm() {
        let p = ParameterVector {
            alpha: vec![],
            beta: vec![],
            gamma: vec![],
            views: vec![ViewParams {
                rotation: UnitQuaternion::identity(),
                translation: Vector3::zeros(),
                sh: [0.0; SH_COEFFS],
            }],
        };
        let mut d = vec![0.0; p.tangent_dim()];
        d[1] = 0.25;
        let q = p.retract(&d);
        assert!((q.views[0].rotation.angle() - 0.25).abs() < 1e-15);
        assert_eq!(p.tangent_groups()[1], ParamGroup::Rotation { view: 0 });
        assert_eq!(p.tangent_groups()[6], ParamGroup::Lighting { view: 0 });
    }

    #[test]
    fn json_round_trip_is_close_and_stable() {
        let p = ParameterVector {
            alpha: vec![0.1, -0.2],
            beta: vec![0.3],
            gamma: vec![],
            views: vec![ViewParams {
                rotation: UnitQuaternion::from_euler_angles(0.2, -0.4, 3.0),
                translation: Vector3::new(0.1, 0.2, 5.0),
                sh: [0.5; SH_COEFFS],
            }],
        };
        let c = p.canonicalized().unwrap();
        assert!(c.views[0].rotation.angle_to(&p.views[0].rotation) < 1e-12);
        let text = serde_json::to_string(&c.to_json()).unwrap();
        let back = ParameterVector::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, c.canonicalized().unwrap());
    }
}
