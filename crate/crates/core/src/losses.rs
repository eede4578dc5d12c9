//! Loss terms: 2D feature losses per view and multi-view geometry losses per
//! view pair, plus the weights and report types of the combined objective.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{skew, CameraIntrinsics, PoseSE3};
use crate::error::{check_dim, Error, Result};
use crate::image::{DepthMap, Image, Mask, RgbImage};

/// Relative translations shorter than this make the essential matrix vanish.
pub const MIN_BASELINE: f64 = 1e-9;

/// Trade-off weights of the combined objective. Missing JSON fields take the
/// defaults; unknown fields are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_render: f64,
    pub w_lm: f64,
    pub w_id: f64,
    pub w_reg: f64,
    pub w_id_reg: f64,
    pub w_exp_reg: f64,
    pub w_tex_reg: f64,
    #[serde(rename = "w_2D")]
    pub w_2d: f64,
    pub w_mul: f64,
    pub w_pixel: f64,
    pub w_depth: f64,
    pub w_epi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_render: 1.9,
            w_lm: 1e-3,
            w_id: 0.2,
            w_reg: 1e-4,
            w_id_reg: 1.0,
            w_exp_reg: 0.8,
            w_tex_reg: 3e-3,
            w_2d: 1.0,
            w_mul: 1.0,
            w_pixel: 0.15,
            w_depth: 1e-4,
            w_epi: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_render: 0.0,
            w_lm: 0.0,
            w_id: 0.0,
            w_reg: 0.0,
            w_id_reg: 0.0,
            w_exp_reg: 0.0,
            w_tex_reg: 0.0,
            w_2d: 0.0,
            w_mul: 0.0,
            w_pixel: 0.0,
            w_depth: 0.0,
            w_epi: 0.0,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 12] {
        [
            ("w_render", self.w_render),
            ("w_lm", self.w_lm),
            ("w_id", self.w_id),
            ("w_reg", self.w_reg),
            ("w_id_reg", self.w_id_reg),
            ("w_exp_reg", self.w_exp_reg),
            ("w_tex_reg", self.w_tex_reg),
            ("w_2D", self.w_2d),
            ("w_mul", self.w_mul),
            ("w_pixel", self.w_pixel),
            ("w_depth", self.w_depth),
            ("w_epi", self.w_epi),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.fields() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("loss weights", format!("{name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }
}

/// Mean over `mask` of `w_skin · ‖I − I_re‖₂` (RGB norm per pixel).
pub fn render_loss(image: &RgbImage, rendered: &RgbImage, mask: &Mask, skin: Option<&Image<f64>>) -> Result<f64> {
    check_dim("rendered image", image.data.len(), rendered.data.len())?;
    check_dim("render mask", image.data.len(), mask.data.len())?;
    if let Some(s) = skin {
        check_dim("skin weights", image.data.len(), s.data.len())?;
    }
    let mut sum = 0.0;
    let mut m = 0usize;
    for i in 0..mask.data.len() {
        if !mask.data[i] {
            continue;
        }
        let w = skin.map_or(1.0, |s| s.data[i]);
        sum += w * rgb_distance(&image.data[i], &rendered.data[i]);
        m += 1;
    }
    if m == 0 {
        return Err(Error::EmptyMask("render mask"));
    }
    Ok(sum / m as f64)
}

#[inline]
pub(crate) fn rgb_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// `Σ c_i ‖q_gt,i − q_i‖²`.
pub fn landmark_loss(q_gt: &[[f64; 2]], q: &[[f64; 2]], confidence: &[f64]) -> Result<f64> {
    check_dim("landmarks", q_gt.len(), q.len())?;
    check_dim("landmark confidences", q_gt.len(), confidence.len())?;
    Ok(q_gt
        .iter()
        .zip(q)
        .zip(confidence)
        .map(|((a, b), c)| c * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)))
        .sum())
}

pub fn regularization_loss(alpha: &[f64], beta: &[f64], gamma: &[f64], w: &LossWeights) -> f64 {
    let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    w.w_id_reg * sq(alpha) + w.w_exp_reg * sq(beta) + w.w_tex_reg * sq(gamma)
}

/// Image embedding used by the identity term.
pub trait EmbeddingProvider: Send + Sync {
    /// `None` when the provider is inactive.
    fn embed(&self, image: &RgbImage, mask: &Mask) -> Option<Vec<f64>>;
}

/// Provider that disables the identity term.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullEmbedding;

impl EmbeddingProvider for NullEmbedding {
    fn embed(&self, _: &RgbImage, _: &Mask) -> Option<Vec<f64>> {
        None
    }
}

/// Mean RGB over the mask; a stand-in for a learned face descriptor.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanColorEmbedding;

impl EmbeddingProvider for MeanColorEmbedding {
    fn embed(&self, image: &RgbImage, mask: &Mask) -> Option<Vec<f64>> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (p, &m) in image.data.iter().zip(&mask.data) {
            if m {
                for c in 0..3 {
                    acc[c] += p[c];
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.iter().map(|a| a / n as f64).collect())
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Cosine distance of embeddings; `None` when the provider is inactive.
pub fn identity_loss(provider: &dyn EmbeddingProvider, image: &RgbImage, rendered: &RgbImage, mask: &Mask) -> Option<f64> {
    let a = provider.embed(image, mask)?;
    let b = provider.embed(rendered, mask)?;
    Some(cosine_distance(&a, &b))
}

/// Mean absolute difference over the mask, averaged over channels.
/// `None` when the mask is empty.
pub fn pixel_consistency_loss(synth: &RgbImage, target: &RgbImage, mask: &Mask) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..mask.data.len() {
        if mask.data[i] {
            let (a, b) = (synth.data[i], target.data[i]);
            sum += ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// `S = Σ D_t / Σ D̃` over the mask, then the mean of `|S·D̃ − D_t|`.
/// `None` for an empty mask or a non-positive denominator.
pub fn depth_consistency_loss(synth: &DepthMap, target: &DepthMap, mask: &Mask) -> Option<f64> {
    let idx: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
    let (num, den) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + target.data[i], b + synth.data[i]));
    if idx.is_empty() || !(den > 0.0) {
        return None;
    }
    let s = num / den;
    Some(idx.iter().map(|&i| (s * synth.data[i] - target.data[i]).abs()).sum::<f64>() / idx.len() as f64)
}

/// Fundamental matrix mapping target pixels to source epipolar lines,
/// `F = K_s^-T [t]x R K_t^-1`.
pub fn fundamental_matrix(rel: &PoseSE3, k_t: &CameraIntrinsics, k_s: &CameraIntrinsics) -> Matrix3<f64> {
    k_s.inverse_matrix().transpose() * skew(&rel.translation) * rel.rotation * k_t.inverse_matrix()
}

/// Distance of `p'` to the epipolar line `F p`; `None` if the line is degenerate.
#[inline]
pub fn epipolar_distance(f: &Matrix3<f64>, p: &[f64; 2], p_prime: &[f64; 2]) -> Option<f64> {
    let l = f * Vector3::new(p[0], p[1], 1.0);
    let den = (l.x * l.x + l.y * l.y).sqrt();
    if !(den > 0.0) {
        return None;
    }
    Some((p_prime[0] * l.x + p_prime[1] * l.y + l.z).abs() / den)
}

/// Per correspondence, forward and reverse epipolar distances (flattened,
/// two entries per pair; degenerate lines contribute 0).
/// `None` when the baseline is too short for an essential matrix.
pub fn epipolar_residuals(
    q_t: &[[f64; 2]],
    q_s: &[[f64; 2]],
    rel: &PoseSE3,
    k_t: &CameraIntrinsics,
    k_s: &CameraIntrinsics,
) -> Option<Vec<f64>> {
    if rel.translation.norm() < MIN_BASELINE {
        return None;
    }
    let f = fundamental_matrix(rel, k_t, k_s);
    let ft = f.transpose();
    let mut out = Vec::with_capacity(2 * q_t.len());
    for (p, pp) in q_t.iter().zip(q_s) {
        out.push(epipolar_distance(&f, p, pp).unwrap_or(0.0));
        out.push(epipolar_distance(&ft, pp, p).unwrap_or(0.0));
    }
    Some(out)
}

/// Symmetric epipolar distance summed over correspondences.
pub fn epipolar_loss(
    q_t: &[[f64; 2]],
    q_s: &[[f64; 2]],
    rel: &PoseSE3,
    k_t: &CameraIntrinsics,
    k_s: &CameraIntrinsics,
) -> Result<Option<f64>> {
    check_dim("epipolar correspondences", q_t.len(), q_s.len())?;
    Ok(epipolar_residuals(q_t, q_s, rel, k_t, k_s).map(|r| r.iter().sum()))
}

/// 2D feature losses of one view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewLossReport {
    pub view: usize,
    pub render: f64,
    pub landmark: f64,
    pub identity: f64,
    pub mask_pixels: usize,
}

/// Multi-view losses of one (target, source) pair. Skipped terms are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairLossReport {
    pub target: usize,
    pub source: usize,
    pub covisible_pixels: usize,
    pub valid_pixels: usize,
    pub pixel: Option<f64>,
    pub depth: Option<f64>,
    pub epipolar: Option<f64>,
    pub notes: Vec<String>,
}

/// Every term of the combined objective. Aggregates: 2D terms are means over
/// views; multi-view terms are means over the pairs where they are defined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_2d: f64,
    pub l_mul: f64,
    pub render: f64,
    pub landmark: f64,
    pub identity: f64,
    pub identity_active: bool,
    pub regularization: f64,
    pub pixel: f64,
    pub depth: f64,
    pub epipolar: f64,
    pub pixel_pairs: usize,
    pub depth_pairs: usize,
    pub epipolar_pairs: usize,
    pub views: Vec<ViewLossReport>,
    pub pairs: Vec<PairLossReport>,
    pub warnings: Vec<String>,
}

impl LossReport {
    /// Fills the aggregates and total from the per-view and per-pair entries.
    pub fn finalize(&mut self, w: &LossWeights) {
        let nv = self.views.len().max(1) as f64;
        self.render = self.views.iter().map(|v| v.render).sum::<f64>() / nv;
        self.landmark = self.views.iter().map(|v| v.landmark).sum::<f64>() / nv;
        self.identity = self.views.iter().map(|v| v.identity).sum::<f64>() / nv;
        let mean = |xs: Vec<f64>| -> (f64, usize) {
            let n = xs.len();
            (if n == 0 { 0.0 } else { xs.iter().sum::<f64>() / n as f64 }, n)
        };
        (self.pixel, self.pixel_pairs) = mean(self.pairs.iter().filter_map(|p| p.pixel).collect());
        (self.depth, self.depth_pairs) = mean(self.pairs.iter().filter_map(|p| p.depth).collect());
        (self.epipolar, self.epipolar_pairs) = mean(self.pairs.iter().filter_map(|p| p.epipolar).collect());
        self.l_2d = w.w_render * self.render + w.w_lm * self.landmark + w.w_id * self.identity + w.w_reg * self.regularization;
        self.l_mul = w.w_pixel * self.pixel + w.w_depth * self.depth + w.w_epi * self.epipolar;
        self.total = w.w_2d * self.l_2d + w.w_mul * self.l_mul;
    }

    pub fn recomputed_total(&self, w: &LossWeights) -> f64 {
        let l2 = w.w_render * self.render + w.w_lm * self.landmark + w.w_id * self.identity + w.w_reg * self.regularization;
        let lm = w.w_pixel * self.pixel + w.w_depth * self.depth + w.w_epi * self.epipolar;
        w.w_2d * l2 + w.w_mul * lm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, p: [f64; 3]) -> RgbImage {
        Image::filled(w, h, p)
    }

    #[test]
    fn default_weights_round_trip_json() {
        let w = LossWeights::default();
        let s = serde_json::to_string(&w).unwrap();
        assert!(s.contains("\"w_2D\":1.0"));
        assert_eq!(LossWeights::from_json_str(&s).unwrap(), w);
        assert_eq!(LossWeights::from_json_str("{\"w_pixel\": 0.5}").unwrap().w_pixel, 0.5);
        assert!(LossWeights::from_json_str("{\"w_pixel\": -1}").is_err());
        assert!(LossWeights::from_json_str("{\"w_pixle\": 1}").is_err());
        assert!(LossWeights::from_json_str("{\"w_pixel\": ").is_err());
    }

    #[test]
    fn render_loss_examples() {
        let mask = Image::filled(4, 4, true);
        let a = img(4, 4, [0.5, 0.4, 0.3]);
        assert_eq!(render_loss(&a, &a, &mask, None).unwrap(), 0.0);
        let b = img(4, 4, [0.6, 0.4, 0.3]);
        assert!((render_loss(&b, &a, &mask, None).unwrap() - 0.1).abs() < 1e-12);
        let skin = Image::filled(4, 4, 2.0);
        assert!((render_loss(&b, &a, &mask, Some(&skin)).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(
            render_loss(&a, &a, &Image::filled(4, 4, false), None),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn landmark_loss_examples() {
        let gt = [[10.0, 10.0], [20.0, 5.0]];
        assert_eq!(landmark_loss(&gt, &gt, &[1.0, 1.0]).unwrap(), 0.0);
        let q = [[13.0, 14.0], [20.0, 5.0]];
        assert_eq!(landmark_loss(&gt, &q, &[1.0, 1.0]).unwrap(), 25.0);
        assert_eq!(landmark_loss(&gt, &q, &[10.0, 1.0]).unwrap(), 250.0);
        assert!(landmark_loss(&gt, &q[..1], &[1.0]).is_err());
    }

    #[test]
    fn regularization_examples() {
        let w = LossWeights::default();
        assert_eq!(regularization_loss(&[0.0; 3], &[0.0; 2], &[0.0; 4], &w), 0.0);
        assert_eq!(regularization_loss(&[1.0, 0.0], &[0.0], &[0.0], &w), 1.0);
        assert_eq!(regularization_loss(&[0.0], &[1.0, 0.0], &[0.0], &w), 0.8);
        assert_eq!(regularization_loss(&[0.0], &[0.0], &[1.0], &w), 3e-3);
    }

    #[test]
    fn identity_examples() {
        let mask = Image::filled(2, 2, true);
        let a = img(2, 2, [0.2, 0.5, 0.1]);
        assert_eq!(identity_loss(&NullEmbedding, &a, &a, &mask), None);
        assert!(identity_loss(&MeanColorEmbedding, &a, &a, &mask).unwrap().abs() < 1e-12);
        let r = img(2, 2, [1.0, 0.0, 0.0]);
        let g = img(2, 2, [0.0, 1.0, 0.0]);
        assert!((identity_loss(&MeanColorEmbedding, &r, &g, &mask).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_consistency_examples() {
        let mask = Image::filled(3, 3, true);
        let a = img(3, 3, [0.3, 0.3, 0.3]);
        assert_eq!(pixel_consistency_loss(&a, &a, &mask), Some(0.0));
        let b = img(3, 3, [0.5, 0.3, 0.3]);
        assert!((pixel_consistency_loss(&b, &a, &mask).unwrap() - 0.2 / 3.0).abs() < 1e-12);
        assert_eq!(pixel_consistency_loss(&a, &b, &Image::filled(3, 3, false)), None);
    }

    #[test]
    fn depth_consistency_examples() {
        let mask = Image::filled(2, 1, true);
        let dt = Image { width: 2, height: 1, data: vec![2.0, 2.0] };
        let ds = Image { width: 2, height: 1, data: vec![1.0, 3.0] };
        assert!((depth_consistency_loss(&ds, &dt, &mask).unwrap() - 1.0).abs() < 1e-12);
        let dt = Image { width: 2, height: 1, data: vec![2.0, 5.0] };
        let twice = Image { width: 2, height: 1, data: vec![4.0, 10.0] };
        assert!(depth_consistency_loss(&twice, &dt, &mask).unwrap().abs() < 1e-12);
        assert_eq!(depth_consistency_loss(&dt, &dt, &mask), Some(0.0));
        assert_eq!(depth_consistency_loss(&dt, &dt, &Image::filled(2, 1, false)), None);
    }

    fn unit_k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 1, height: 1 }
    }

    #[test]
    fn epipolar_hand_examples() {
        let rel = PoseSE3 { rotation: Matrix3::identity(), translation: Vector3::new(1.0, 0.0, 0.0) };
        let k = unit_k();
        let f = fundamental_matrix(&rel, &k, &k);
        let e = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((f - e).abs().max() < 1e-15);
        let d = epipolar_distance(&f, &[0.2, 0.1], &[0.5, 0.3]).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
        assert!(epipolar_distance(&f, &[0.2, 0.1], &[0.5, 0.1]).unwrap().abs() < 1e-15);
        let none = PoseSE3 { rotation: Matrix3::identity(), translation: Vector3::zeros() };
        assert_eq!(epipolar_loss(&[[0.2, 0.1]], &[[0.5, 0.3]], &none, &k, &k).unwrap(), None);
    }

    #[test]
    fn epipolar_zero_for_true_correspondences() {
        let kt = CameraIntrinsics::centered(300.0, 128);
        let ks = CameraIntrinsics::new(280.0, 290.0, 60.0, 66.0, 128, 128).unwrap();
        let rel = PoseSE3::from_quaternion(
            &nalgebra::UnitQuaternion::from_euler_angles(0.1, -0.3, 0.05),
            Vector3::new(0.8, -0.1, 0.4),
        );
        let pts = [Vector3::new(0.1, 0.2, 5.0), Vector3::new(-0.4, 0.1, 5.5), Vector3::new(0.3, -0.5, 4.8)];
        let (mut qt, mut qs) = (vec![], vec![]);
        for x in pts {
            let a = kt.project_camera(&x).unwrap();
            let b = ks.project_camera(&rel.transform(&x)).unwrap();
            qt.push([a.x, a.y]);
            qs.push([b.x, b.y]);
        }
        assert!(epipolar_loss(&qt, &qs, &rel, &kt, &ks).unwrap().unwrap() < 1e-6);
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let mut r = LossReport {
            regularization: 2.0,
            views: vec![
                ViewLossReport { view: 0, render: 0.1, landmark: 3.0, ..Default::default() },
                ViewLossReport { view: 1, render: 0.3, landmark: 1.0, ..Default::default() },
            ],
            pairs: vec![PairLossReport { pixel: Some(0.05), depth: None, epipolar: Some(2.0), ..Default::default() }],
            ..Default::default()
        };
        let w = LossWeights::default();
        r.finalize(&w);
        assert!((r.total - r.recomputed_total(&w)).abs() < 1e-12);
        assert_eq!(r.depth_pairs, 0);
        r.finalize(&LossWeights::zero());
        assert_eq!(r.total, 0.0);
    }

    proptest! {
        #[test]
        fn depth_loss_is_scale_invariant(
            d in prop::collection::vec(0.5f64..10.0, 2..40),
            noise in prop::collection::vec(-0.3f64..0.3, 40),
            c in 0.01f64..100.0,
        ) {
            let n = d.len();
            let target = Image { width: n, height: 1, data: d.clone() };
            let synth = Image { width: n, height: 1, data: d.iter().zip(&noise).map(|(a, e)| a + e).collect() };
            let scaled = Image { width: n, height: 1, data: synth.data.iter().map(|x| c * x).collect() };
            let mask = Image::filled(n, 1, true);
            let a = depth_consistency_loss(&synth, &target, &mask).unwrap();
            let b = depth_consistency_loss(&scaled, &target, &mask).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300));
        }

        #[test]
        fn epipolar_loss_is_baseline_scale_invariant(
            t in prop::array::uniform3(-1.0f64..1.0),
            e in prop::array::uniform3(-0.5f64..0.5),
            pts in prop::collection::vec(prop::array::uniform4(0.0f64..128.0), 1..20),
            c in 0.05f64..20.0,
        ) {
            let tv = Vector3::from(t);
            prop_assume!(tv.norm() > 1e-3);
            let k = CameraIntrinsics::centered(300.0, 128);
            let rot = nalgebra::UnitQuaternion::from_euler_angles(e[0], e[1], e[2]);
            let qt: Vec<_> = pts.iter().map(|p| [p[0], p[1]]).collect();
            let qs: Vec<_> = pts.iter().map(|p| [p[2], p[3]]).collect();
            let a = epipolar_loss(&qt, &qs, &PoseSE3::from_quaternion(&rot, tv), &k, &k).unwrap().unwrap();
            let b = epipolar_loss(&qt, &qs, &PoseSE3::from_quaternion(&rot, tv * c), &k, &k).unwrap().unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300));
        }
    }
}
