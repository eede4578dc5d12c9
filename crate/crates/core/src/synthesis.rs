//! Occlusion-aware correspondence between a target and a source view.
//!
//! Vertices seen by both views are covisible; triangles touching a covisible
//! vertex are covisible; the covisible map marks target pixels owned by a
//! covisible triangle. Target pixels are then warped into the source view
//! through the target depth and the relative pose, and the source image and
//! depth are bilinearly sampled there.

use nalgebra::Vector3;

use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::error::{check_dim, Error, Result};
use crate::image::{DepthMap, Image, Mask, RgbImage};
use crate::raster::{FragmentBuffer, EMPTY_TRIANGLE};

/// Target pixels whose surface is visible in both views.
#[derive(Debug, Clone, PartialEq)]
pub struct CovisibleMap {
    pub mask: Mask,
    pub count: usize,
}

impl CovisibleMap {
    pub fn from_mask(mask: Mask) -> Self {
        let count = mask.count();
        Self { mask, count }
    }
}

/// How a triangle qualifies as covisible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriangleRule {
    /// At least one covisible vertex.
    #[default]
    AnyVertex,
    /// All three vertices covisible.
    AllVertices,
}

pub fn covisible_vertices(vis_t: &[bool], vis_s: &[bool]) -> Result<Vec<bool>> {
    check_dim("vertex visibility", vis_t.len(), vis_s.len())?;
    Ok(vis_t.iter().zip(vis_s).map(|(a, b)| *a && *b).collect())
}

pub fn covisible_triangles(covisible: &[bool], triangles: &[[u32; 3]], rule: TriangleRule) -> Vec<bool> {
    triangles
        .iter()
        .map(|t| {
            let mut it = t.iter().map(|&v| covisible[v as usize]);
            match rule {
                TriangleRule::AnyVertex => it.any(|c| c),
                TriangleRule::AllVertices => it.all(|c| c),
            }
        })
        .collect()
}

pub fn covisible_map(covisible_tris: &[bool], target: &FragmentBuffer) -> CovisibleMap {
    let mask = Image {
        width: target.width,
        height: target.height,
        data: target
            .triangle
            .iter()
            .map(|&t| t != EMPTY_TRIANGLE && covisible_tris[t as usize])
            .collect(),
    };
    CovisibleMap::from_mask(mask)
}

/// A target pixel carried into the source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedPixel {
    pub u: f64,
    pub v: f64,
    /// Depth of the warped point in the source camera.
    pub depth: f64,
}

/// `p_s ~ K_s [R | t] D_t(p_t) K_t^-1 p_t`.
#[inline]
pub fn warp_pixel(
    u: f64,
    v: f64,
    depth_t: f64,
    rel: &PoseSE3,
    k_t: &CameraIntrinsics,
    k_s: &CameraIntrinsics,
) -> Result<WarpedPixel> {
    if !(depth_t > 0.0) {
        return Err(Error::invalid("target depth", format!("{depth_t} is not positive")));
    }
    let xs = rel.transform(&k_t.back_project(u, v, depth_t));
    if xs.z <= 0.0 {
        return Err(Error::BehindCamera { depth: xs.z });
    }
    Ok(WarpedPixel {
        u: k_s.fx * xs.x / xs.z + k_s.cx,
        v: k_s.fy * xs.y / xs.z + k_s.cy,
        depth: xs.z,
    })
}

/// Pixel types that can be bilinearly interpolated.
pub trait Sampleable: Copy {
    fn zero() -> Self;
    fn add_scaled(self, other: Self, w: f64) -> Self;
    /// Whether the value may participate in interpolation.
    fn is_valid(&self) -> bool {
        true
    }
}

impl Sampleable for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add_scaled(self, other: Self, w: f64) -> Self {
        self + other * w
    }
    /// Depth maps mark empty pixels with non-positive values.
    fn is_valid(&self) -> bool {
        *self > 0.0
    }
}

impl Sampleable for [f64; 3] {
    fn zero() -> Self {
        [0.0; 3]
    }
    fn add_scaled(self, other: Self, w: f64) -> Self {
        [self[0] + other[0] * w, self[1] + other[1] * w, self[2] + other[2] * w]
    }
}

/// Four-neighbor bilinear interpolation at a continuous pixel. Returns `None`
/// when a contributing neighbor is outside the image or invalid.
/// Neighbors with zero weight are not consulted, so integer positions on
/// the last row or column are sampled exactly.
#[inline]
pub fn bilinear_sample<T: Sampleable>(img: &Image<T>, u: f64, v: f64) -> Option<T> {
    if !(u >= 0.0 && v >= 0.0) {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    if x1 >= img.width || y1 >= img.height {
        return None;
    }
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    let mut acc = T::zero();
    for (x, y, w) in taps {
        if w == 0.0 {
            continue;
        }
        let p = *img.get(x, y);
        if !p.is_valid() {
            return None;
        }
        acc = acc.add_scaled(p, w);
    }
    Some(acc)
}

/// Synthesized target view from one source view.
#[derive(Debug, Clone)]
pub struct SynthesizedView {
    /// Source colors resampled onto the target pixel grid.
    pub image: RgbImage,
    /// Source surface depths resampled and expressed in the target camera.
    pub depth: DepthMap,
    /// Mask pixels whose warp and samples are all valid.
    pub valid: Mask,
    pub valid_count: usize,
}

/// Options for [`synthesize_target`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    /// Drop samples whose source depth disagrees with the warped depth by
    /// more than this (source occluded the warped point). `None` disables.
    pub occlusion_tolerance: Option<f64>,
}

/// Warps every masked target pixel into the source view and samples the
/// source image and depth.
///
/// The synthesized depth is the sampled source surface point transformed
/// back into the target camera, so that it is directly comparable with the
/// target depth map.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_target(
    source_image: &RgbImage,
    source_depth: &DepthMap,
    target_depth: &DepthMap,
    mask: &Mask,
    rel: &PoseSE3,
    k_t: &CameraIntrinsics,
    k_s: &CameraIntrinsics,
    options: SynthesisOptions,
) -> SynthesizedView {
    let (w, h) = (target_depth.width, target_depth.height);
    let mut image = Image::filled(w, h, [0.0; 3]);
    let mut depth = Image::filled(w, h, crate::image::EMPTY_DEPTH);
    let mut valid = Image::filled(w, h, false);
    let back = rel.inverse();
    let mut valid_count = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.data[i] {
                continue;
            }
            let Some(s) = sample_source(x as f64, y as f64, target_depth.data[i], source_image, source_depth, rel, &back, k_t, k_s, options)
            else {
                continue;
            };
            image.data[i] = s.color;
            depth.data[i] = s.depth_in_target;
            valid.data[i] = true;
            valid_count += 1;
        }
    }
    SynthesizedView {
        image,
        depth,
        valid,
        valid_count,
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SourceSample {
    pub color: [f64; 3],
    pub depth_in_target: f64,
}

/// Warp one target pixel and sample the source; `None` if anything is invalid.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn sample_source(
    u: f64,
    v: f64,
    depth_t: f64,
    source_image: &RgbImage,
    source_depth: &DepthMap,
    rel: &PoseSE3,
    back: &PoseSE3,
    k_t: &CameraIntrinsics,
    k_s: &CameraIntrinsics,
    options: SynthesisOptions,
) -> Option<SourceSample> {
    let p = warp_pixel(u, v, depth_t, rel, k_t, k_s).ok()?;
    let sampled_depth = bilinear_sample(source_depth, p.u, p.v)?;
    if let Some(tol) = options.occlusion_tolerance {
        if (sampled_depth - p.depth).abs() >= tol {
            return None;
        }
    }
    let color = bilinear_sample(source_image, p.u, p.v)?;
    let xs: Vector3<f64> = k_s.back_project(p.u, p.v, sampled_depth);
    let depth_in_target = back.transform(&xs).z;
    if !(depth_in_target > 0.0) {
        return None;
    }
    Some(SourceSample { color, depth_in_target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covisible_vertices_is_elementwise_and() {
        assert_eq!(covisible_vertices(&[true, true], &[true, true]).unwrap(), vec![true, true]);
        assert_eq!(covisible_vertices(&[true, false], &[false, true]).unwrap(), vec![false, false]);
        assert!(covisible_vertices(&[true], &[true, false]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<bool> = (0..100).map(|_| rng.random()).collect();
        let b: Vec<bool> = (0..100).map(|_| rng.random()).collect();
        let c = covisible_vertices(&a, &b).unwrap();
        for i in 0..100 {
            assert_eq!(c[i], a[i] && b[i]);
        }
    }

    #[test]
    fn covisible_triangles_follow_incidence() {
        let tris = [[0u32, 1, 2], [1, 2, 3], [3, 4, 5], [0, 4, 5]];
        assert_eq!(covisible_triangles(&[false; 6], &tris, TriangleRule::AnyVertex), vec![false; 4]);
        let mut one = vec![false; 6];
        one[1] = true;
        assert_eq!(covisible_triangles(&one, &tris, TriangleRule::AnyVertex), vec![true, true, false, false]);
        assert_eq!(covisible_triangles(&one, &tris, TriangleRule::AllVertices), vec![false; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mesh: Vec<[u32; 3]> = (0..200).map(|_| [0, 1, 2].map(|_| rng.random_range(0..50u32))).collect();
        let cov: Vec<bool> = (0..50).map(|_| rng.random_bool(0.3)).collect();
        let got = covisible_triangles(&cov, &mesh, TriangleRule::AnyVertex);
        for (t, g) in mesh.iter().zip(got) {
            let want = (0..50).any(|v| cov[v] && t.contains(&(v as u32)));
            assert_eq!(g, want);
        }
    }

    #[test]
    fn identity_warp_is_identity() {
        let k = CameraIntrinsics::centered(100.0, 64);
        let p = warp_pixel(12.3, 40.0, 4.5, &PoseSE3::identity(), &k, &k).unwrap();
        assert!((p.u - 12.3).abs() < 1e-12 && (p.v - 40.0).abs() < 1e-12);
        assert_eq!(p.depth, 4.5);
    }

    #[test]
    fn forward_translation_halves_depth_and_doubles_offset() {
        let k = CameraIntrinsics::centered(100.0, 64);
        let rel = PoseSE3 {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, -2.0),
        };
        let p = warp_pixel(k.cx + 5.0, k.cy - 3.0, 4.0, &rel, &k, &k).unwrap();
        assert!((p.depth - 2.0).abs() < 1e-12);
        assert!((p.u - (k.cx + 10.0)).abs() < 1e-12);
        assert!((p.v - (k.cy - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn warp_behind_source_is_an_error() {
        let k = CameraIntrinsics::centered(100.0, 64);
        let rel = PoseSE3 {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, -5.0),
        };
        assert!(warp_pixel(10.0, 10.0, 4.0, &rel, &k, &k).is_err());
        assert!(warp_pixel(10.0, 10.0, 0.0, &PoseSE3::identity(), &k, &k).is_err());
    }

    #[test]
    fn bilinear_basics() {
        let img = Image {
            width: 2,
            height: 2,
            data: vec![0.0, 1.0, 2.0, 3.0],
        };
        let ramp = Image {
            width: 2,
            height: 1,
            data: vec![[0.0; 3], [1.0; 3]],
        };
        assert_eq!(bilinear_sample(&ramp, 0.5, 0.0), Some([0.5; 3]));
        assert_eq!(bilinear_sample(&img, 1.0, 1.0), Some(3.0));
        assert_eq!(bilinear_sample(&img, 1.5, 0.0), None);
        assert_eq!(bilinear_sample(&img, -0.1, 0.0), None);
        let holes = Image {
            width: 2,
            height: 1,
            data: vec![2.0, -1.0],
        };
        assert_eq!(bilinear_sample(&holes, 0.0, 0.0), Some(2.0));
        assert_eq!(bilinear_sample(&holes, 0.5, 0.0), None);
    }

    #[test]
    fn bilinear_reproduces_bilinear_ramps() {
        let (w, h) = (9, 7);
        let f = |x: f64, y: f64| 1.3 + 0.1 * x - 0.05 * y + 0.02 * x * y;
        let img = Image {
            width: w,
            height: h,
            data: (0..w * h).map(|i| f((i % w) as f64, (i / w) as f64)).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let u = rng.random_range(0.0..(w - 1) as f64);
            let v = rng.random_range(0.0..(h - 1) as f64);
            let got = bilinear_sample(&img, u, v).unwrap();
            assert!((got - f(u, v)).abs() < 1e-12);
        }
    }
}
