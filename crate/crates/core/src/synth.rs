//! Procedural morphable model, camera rigs and ground-truth scenes.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64`, and Gaussian
//! draws use the Ziggurat sampler of `rand_distr::StandardNormal`, so a seed
//! fixes every generated number on every platform.
//!
//! The mean shape is an open face mask: a patch of the ellipsoid with
//! semi-axes (0.75, 1.0, 0.7) spanning longitudes ±100° about +y and
//! latitudes -70°..75°, with +z as the facing direction and +y up. A nose
//! ridge, eye sockets and lips are displaced along the ellipsoid normal; the
//! nose occludes the cheeks once the head turns.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::error::{Error, Result};
use crate::model::{as_points, vertex_normals, Landmark, MorphableModel};
use crate::objective::{Objective, ObjectiveConfig, ObservedView, ViewRig};
use crate::params::{ParameterVector, ViewParams};
use crate::raster::{render, RenderOutputs};
use crate::sh::{unit_irradiance, SH_BANDS, SH_COEFFS};
use crate::synthesis::{covisible_map, covisible_triangles, covisible_vertices, TriangleRule};

const SEMI_AXES: [f64; 3] = [0.75, 1.0, 0.7];
const LON_RANGE: (f64, f64) = (-100.0, 100.0);
const LAT_RANGE: (f64, f64) = (-70.0, 75.0);

/// Minimum covisible fraction of the target mask for every view pair.
pub const MIN_OVERLAP: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub seed: u64,
    /// Requested vertex count; the grid uses the nearest rows × columns.
    pub vertices: usize,
    pub n_id: usize,
    pub n_exp: usize,
    pub n_alb: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            vertices: 1500,
            n_id: 16,
            n_exp: 8,
            n_alb: 8,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gauss2(x: f64, y: f64, cx: f64, cy: f64, sx: f64, sy: f64) -> f64 {
    (-(x - cx).powi(2) / (2.0 * sx * sx) - (y - cy).powi(2) / (2.0 * sy * sy)).exp()
}

/// Grid dimensions with rows × cols close to `v` and a roughly square cell.
fn grid_dims(v: usize) -> (usize, usize) {
    let rows = ((v as f64 / 1.3).sqrt().round() as usize).max(3);
    let cols = ((v as f64 / rows as f64).round() as usize).max(4);
    (rows, cols)
}

/// Latitude/longitude (radians) of a front-surface point with base
/// ellipsoid coordinates `(x, y)`.
fn latlon_of(x: f64, y: f64) -> (f64, f64) {
    let lat = (y / SEMI_AXES[1]).clamp(-1.0, 1.0).asin();
    let lon = (x / (SEMI_AXES[0] * lat.cos())).clamp(-1.0, 1.0).asin();
    (lat, lon)
}

/// Landmark layout: base-ellipsoid `(x, y)` on the face front, or explicit
/// `(lat°, lon°)` for points on the sides, and a confidence.
enum Site {
    Front(f64, f64),
    Side(f64, f64),
}

fn landmark_sites() -> Vec<(Site, f64)> {
    use Site::*;
    let mut s = vec![
        // Nose tip, bridge and base.
        (Front(0.0, -0.05), 10.0),
        (Front(0.0, 0.25), 10.0),
        (Front(0.0, 0.15), 10.0),
        (Front(0.0, 0.05), 10.0),
        (Front(-0.11, -0.2), 10.0),
        (Front(0.0, -0.22), 10.0),
        (Front(0.11, -0.2), 10.0),
        // Inner mouth.
        (Front(-0.13, -0.45), 10.0),
        (Front(0.13, -0.45), 10.0),
        (Front(0.0, -0.41), 10.0),
        (Front(0.0, -0.49), 10.0),
    ];
    for (x, y) in [(-0.42, 0.25), (-0.17, 0.25), (0.17, 0.25), (0.42, 0.25), (-0.4, 0.42), (-0.15, 0.45), (0.15, 0.45), (0.4, 0.42)] {
        s.push((Front(x, y), 1.0));
    }
    for (lat, lon) in [(10.0, -85.0), (-20.0, -70.0), (-45.0, -60.0), (-58.0, -30.0), (-58.0, 30.0), (-45.0, 60.0), (-20.0, 70.0), (10.0, 85.0)] {
        s.push((Side(lat, lon), 1.0));
    }
    s
}

/// Random smooth displacement: a sum of Gaussian bumps with random vector
/// weights at random vertices.
fn rbf_field(rng: &mut ChaCha8Rng, points: &[Vector3<f64>], centers: usize, sigma: f64, bias: impl Fn(&Vector3<f64>) -> bool) -> DVector<f64> {
    let mut field = DVector::zeros(3 * points.len());
    let mut placed = 0;
    while placed < centers {
        let c = points[rng.random_range(0..points.len())];
        if !bias(&c) {
            continue;
        }
        placed += 1;
        let w = Vector3::new(normal(rng), normal(rng), normal(rng));
        for (i, p) in points.iter().enumerate() {
            let g = (-(p - c).norm_squared() / (2.0 * sigma * sigma)).exp();
            for k in 0..3 {
                field[3 * i + k] += g * w[k];
            }
        }
    }
    field
}

/// Modified Gram-Schmidt, applied twice for orthogonality to rounding level.
fn orthonormalize(m: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for i in 0..j {
                let d = m.column(i).dot(&m.column(j));
                let ci = m.column(i).clone_owned();
                m.column_mut(j).axpy(-d, &ci, 1.0);
            }
            let n = m.column(j).norm();
            m.column_mut(j).scale_mut(1.0 / n);
        }
    }
}

/// Builds the procedural face model.
pub fn generate_model(spec: &ModelSpec) -> Result<MorphableModel> {
    if spec.vertices < 12 {
        return Err(Error::invalid("model spec", "at least 12 vertices are required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols) = grid_dims(spec.vertices);
    let [a, b, c] = SEMI_AXES;
    let lerp = |r: (f64, f64), t: f64| (r.0 + (r.1 - r.0) * t).to_radians();

    let mut base = Vec::with_capacity(rows * cols);
    let mut latlon = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let lat = lerp(LAT_RANGE, i as f64 / (rows - 1) as f64);
        for j in 0..cols {
            let lon = lerp(LON_RANGE, j as f64 / (cols - 1) as f64);
            base.push(Vector3::new(a * lat.cos() * lon.sin(), b * lat.sin(), c * lat.cos() * lon.cos()));
            latlon.push((lat, lon));
        }
    }
    let relief = |p: &Vector3<f64>| -> f64 {
        let front = (p.z / c).max(0.0);
        let nose = 0.35 * gauss2(p.x, p.y, 0.0, -0.05, 0.12, 0.22) * front;
        let eyes = -0.08 * (gauss2(p.x, p.y, -0.3, 0.25, 0.1, 0.08) + gauss2(p.x, p.y, 0.3, 0.25, 0.1, 0.08)) * front;
        let lips = 0.04 * gauss2(p.x, p.y, 0.0, -0.45, 0.18, 0.05) * front;
        nose + eyes + lips
    };
    let mean: Vec<Vector3<f64>> = base
        .iter()
        .map(|p| {
            let n = Vector3::new(p.x / (a * a), p.y / (b * b), p.z / (c * c)).normalize();
            p + n * relief(p)
        })
        .collect();

    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            let at = |r: usize, q: usize| (r * cols + q) as u32;
            triangles.push([at(i, j), at(i, j + 1), at(i + 1, j)]);
            triangles.push([at(i, j + 1), at(i + 1, j + 1), at(i + 1, j)]);
        }
    }

    // Albedo: skin with darker eyes, brows and lips plus random smooth blotches.
    let skin = [0.72, 0.53, 0.43];
    let mut albedo = vec![0.0; 3 * base.len()];
    let blotches: Vec<(Vector3<f64>, f64, [f64; 3])> = (0..16)
        .map(|_| {
            let center = base[rng.random_range(0..base.len())];
            let sigma = rng.random_range(0.05..0.15);
            let tone = normal(&mut rng) * 0.08;
            let tint = [tone + normal(&mut rng) * 0.02, tone + normal(&mut rng) * 0.02, tone + normal(&mut rng) * 0.02];
            (center, sigma, tint)
        })
        .collect();
    for (i, p) in base.iter().enumerate() {
        let front = (p.z / c).max(0.0);
        let eye = (gauss2(p.x, p.y, -0.3, 0.25, 0.09, 0.05) + gauss2(p.x, p.y, 0.3, 0.25, 0.09, 0.05)) * front;
        let brow = (gauss2(p.x, p.y, -0.28, 0.43, 0.14, 0.03) + gauss2(p.x, p.y, 0.28, 0.43, 0.14, 0.03)) * front;
        let lip = gauss2(p.x, p.y, 0.0, -0.45, 0.16, 0.045) * front;
        for k in 0..3 {
            let mut v = skin[k];
            v += eye * ([0.25, 0.2, 0.18][k] - skin[k]);
            v += brow * ([0.3, 0.2, 0.14][k] - skin[k]);
            v += lip * ([0.68, 0.32, 0.32][k] - skin[k]);
            for (bc, bs, bt) in &blotches {
                v += bt[k] * (-(p - bc).norm_squared() / (2.0 * bs * bs)).exp();
            }
            albedo[3 * i + k] = v.clamp(0.05, 0.95);
        }
    }

    // Shape bases: identity fields anywhere, expression fields on the lower face.
    let nv = mean.len() as f64;
    let mut shape = DMatrix::zeros(3 * mean.len(), spec.n_id + spec.n_exp);
    for j in 0..spec.n_id {
        shape.set_column(j, &rbf_field(&mut rng, &mean, 5, 0.35, |_| true));
    }
    for j in 0..spec.n_exp {
        shape.set_column(spec.n_id + j, &rbf_field(&mut rng, &mean, 4, 0.25, |p| p.y < 0.1 && p.z > 0.0));
    }
    orthonormalize(&mut shape);
    // Column norm 1 means per-vertex RMS displacement 1/sqrt(V).
    for j in 0..spec.n_id {
        shape.column_mut(j).scale_mut(0.04 * 0.85f64.powi(j as i32) * nv.sqrt());
    }
    for j in 0..spec.n_exp {
        shape.column_mut(spec.n_id + j).scale_mut(0.03 * 0.85f64.powi(j as i32) * nv.sqrt());
    }
    let basis_id = shape.columns(0, spec.n_id).into_owned();
    let basis_exp = shape.columns(spec.n_id, spec.n_exp).into_owned();

    let mut alb = DMatrix::zeros(3 * mean.len(), spec.n_alb);
    for j in 0..spec.n_alb {
        let tone = rbf_field(&mut rng, &mean, 5, 0.3, |_| true);
        let tint = rbf_field(&mut rng, &mean, 3, 0.3, |_| true);
        let mut col = DVector::zeros(3 * mean.len());
        for i in 0..mean.len() {
            let t = tone[3 * i];
            for k in 0..3 {
                col[3 * i + k] = t + 0.3 * tint[3 * i + k];
            }
        }
        alb.set_column(j, &col);
    }
    orthonormalize(&mut alb);
    // Column norm 1 means per-entry RMS 1/sqrt(3V).
    for j in 0..spec.n_alb {
        alb.column_mut(j).scale_mut(0.03 * 0.85f64.powi(j as i32) * (3.0 * nv).sqrt());
    }

    let mut used = vec![false; mean.len()];
    let mut landmarks = Vec::new();
    for (site, confidence) in landmark_sites() {
        let (lat, lon) = match site {
            Site::Front(x, y) => latlon_of(x, y),
            Site::Side(la, lo) => (la.to_radians(), lo.to_radians()),
        };
        let best = (0..mean.len())
            .filter(|&i| !used[i])
            .min_by(|&i, &j| {
                let d = |k: usize| (latlon[k].0 - lat).powi(2) + (latlon[k].1 - lon).powi(2);
                d(i).total_cmp(&d(j))
            })
            .ok_or_else(|| Error::invalid("model spec", "too few vertices for the landmark set"))?;
        used[best] = true;
        landmarks.push(Landmark {
            vertex: best as u32,
            confidence,
        });
    }

    let model = MorphableModel {
        mean_shape: DVector::from_iterator(3 * mean.len(), mean.iter().flat_map(|p| [p.x, p.y, p.z])),
        mean_albedo: DVector::from_vec(albedo),
        basis_id,
        basis_exp,
        basis_albedo: alb,
        triangles,
        landmarks,
    };
    model.validate()?;
    Ok(model)
}

/// Where the cameras rotate about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pivot {
    /// Cameras orbit the head center.
    #[default]
    Head,
    /// Cameras turn in place; every relative translation is zero.
    Camera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub n_views: usize,
    /// Yaw step between neighboring views, in degrees.
    pub yaw_deg: f64,
    pub image_size: usize,
    /// Focal length in pixels; `None` uses 2.35 × image size.
    pub focal: Option<f64>,
    /// Camera distance from the head center.
    pub distance: f64,
    /// Standard deviation of random pitch and roll per view, in degrees.
    pub jitter_deg: f64,
    pub pivot: Pivot,
    /// Scale of the random non-constant lighting bands.
    pub lighting_variation: f64,
    pub seed: u64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            n_views: 3,
            yaw_deg: 20.0,
            image_size: 128,
            focal: None,
            distance: 5.5,
            jitter_deg: 2.0,
            pivot: Pivot::Head,
            lighting_variation: 0.3,
            seed: 0,
        }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("rig spec", r.to_string()));
        if self.n_views == 0 {
            return bad("at least one view is required");
        }
        if self.image_size < 8 {
            return bad("image size must be at least 8");
        }
        if !(self.distance > 1.5) {
            return bad("camera distance must exceed 1.5 model units");
        }
        if !self.yaw_deg.is_finite() || self.yaw_deg.abs() >= 180.0 {
            return bad("yaw step must be finite and below 180 degrees");
        }
        if self.focal.is_some_and(|f| !(f > 0.0)) {
            return bad("focal length must be positive");
        }
        if !(self.jitter_deg >= 0.0 && self.lighting_variation >= 0.0) {
            return bad("jitter and lighting variation must be non-negative");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.focal.unwrap_or(2.35 * self.image_size as f64), self.image_size)
    }

    /// Yaw of each view in degrees, symmetric about zero.
    pub fn yaws(&self) -> Vec<f64> {
        let mid = (self.n_views as f64 - 1.0) / 2.0;
        (0..self.n_views).map(|i| (i as f64 - mid) * self.yaw_deg).collect()
    }
}

/// Camera rotation looking at the face front: model +y up maps to image up.
fn front_rotation() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

fn view_pose(spec: &RigSpec, yaw_deg: f64, pitch: f64, roll: f64) -> PoseSE3 {
    let jitter = UnitQuaternion::from_euler_angles(pitch, 0.0, roll);
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw_deg.to_radians());
    let rf = front_rotation();
    let center_t = Vector3::new(0.0, 0.0, spec.distance);
    match spec.pivot {
        Pivot::Head => PoseSE3 {
            rotation: jitter.to_rotation_matrix().into_inner() * rf * yaw.to_rotation_matrix().into_inner(),
            translation: center_t,
        },
        Pivot::Camera => {
            // Camera center of the frontal view, kept fixed.
            let center = -rf.transpose() * center_t;
            let turn = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -yaw_deg.to_radians());
            let r = jitter.to_rotation_matrix().into_inner() * turn.to_rotation_matrix().into_inner() * rf;
            PoseSE3 {
                rotation: r,
                translation: -r * center,
            }
        }
    }
}

/// A model, its ground truth and the rendered views.
#[derive(Debug, Clone)]
pub struct Scene {
    pub model: MorphableModel,
    pub spec: RigSpec,
    pub params: ParameterVector,
    pub rig: ViewRig,
    pub renders: Vec<RenderOutputs>,
}

/// Ground-truth lighting: unit irradiance with random low-order variation
/// and a mild per-channel tint, shared by every view.
fn draw_lighting(rng: &mut ChaCha8Rng, variation: f64) -> [f64; SH_COEFFS] {
    let mut sh = unit_irradiance();
    let dc = sh[0];
    let tint: [f64; 3] = std::array::from_fn(|_| 1.0 + 0.05 * normal(rng));
    let bands: [f64; SH_BANDS] = std::array::from_fn(|b| match b {
        0 => 0.0,
        1..=3 => variation * normal(rng),
        _ => 0.3 * variation * normal(rng),
    });
    for ch in 0..3 {
        sh[SH_BANDS * ch] = dc * tint[ch];
        for b in 1..SH_BANDS {
            sh[SH_BANDS * ch + b] = dc * bands[b] * tint[ch];
        }
    }
    sh
}

/// Covisible fraction of the target mask for every ordered view pair, as
/// `(target, source, fraction)`.
pub fn pairwise_overlap(model: &MorphableModel, renders: &[RenderOutputs]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for t in 0..renders.len() {
        for s in (0..renders.len()).filter(|&s| s != t) {
            let cv = covisible_vertices(&renders[t].visible_vertices, &renders[s].visible_vertices)
                .expect("renders share one model");
            let ct = covisible_triangles(&cv, &model.triangles, TriangleRule::AnyVertex);
            let map = covisible_map(&ct, &renders[t].fragments);
            let m = renders[t].fragments.covered_count().max(1);
            out.push((t, s, map.count as f64 / m as f64));
        }
    }
    out
}

const POSE_ATTEMPTS: usize = 8;

/// Draws ground truth for `model` and renders every view.
pub fn generate_scene(model: &MorphableModel, spec: &RigSpec, coeff_scale: f64) -> Result<Scene> {
    spec.validate()?;
    if !(coeff_scale >= 0.0) {
        return Err(Error::invalid("coefficient scale", "must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| normal(rng).clamp(-2.0, 2.0) * coeff_scale).collect()
    };
    let alpha = draw(model.n_id(), &mut rng);
    let beta = draw(model.n_exp(), &mut rng);
    let gamma = draw(model.n_alb(), &mut rng);
    let sh = draw_lighting(&mut rng, spec.lighting_variation);

    let shape = model.synthesize_shape(&alpha, &beta)?;
    let vertices = as_points(shape.as_slice());
    let normals = vertex_normals(&vertices, &model.triangles).normals;
    let albedo = model.synthesize_albedo(&gamma)?;
    let k = spec.intrinsics();
    let lm = model.landmark_vertices();

    let mut last_err = None;
    for _ in 0..POSE_ATTEMPTS {
        let poses: Vec<PoseSE3> = spec
            .yaws()
            .into_iter()
            .map(|y| {
                let pitch = (spec.jitter_deg * normal(&mut rng)).to_radians();
                let roll = (spec.jitter_deg * normal(&mut rng)).to_radians();
                view_pose(spec, y, pitch, roll)
            })
            .collect();
        let renders: Vec<RenderOutputs> = poses
            .iter()
            .map(|p| render(&vertices, &normals, albedo.as_slice(), &model.triangles, p, &k, &sh))
            .collect();
        if let Some(v) = renders.iter().position(|r| r.fragments.covered_count() == 0) {
            last_err = Some(Error::EmptyRender { view: v });
            continue;
        }
        let mut views = Vec::with_capacity(poses.len());
        let mut ok = true;
        for (p, r) in poses.iter().zip(&renders) {
            let mut q = Vec::with_capacity(lm.len());
            for &i in &lm {
                let c = p.transform(&vertices[i]);
                let uv = k.project_camera(&c);
                match uv {
                    Some(uv) if uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= (k.width - 1) as f64 && uv.y <= (k.height - 1) as f64 => {
                        q.push([uv.x, uv.y])
                    }
                    _ => ok = false,
                }
            }
            views.push(ObservedView {
                intrinsics: k,
                image: r.image.clone(),
                landmarks: q,
                skin: None,
            });
        }
        if !ok {
            last_err = Some(Error::invalid("scene", "a landmark projects outside an image"));
            continue;
        }
        if let Some(&(a, b, fraction)) = pairwise_overlap(model, &renders)
            .iter()
            .filter(|o| o.2 < MIN_OVERLAP)
            .min_by(|x, y| x.2.total_cmp(&y.2))
        {
            // Overlap is decided by the yaw layout, which retries do not change.
            return Err(Error::NoOverlap { a, b, fraction });
        }
        let params = ParameterVector {
            alpha: alpha.clone(),
            beta: beta.clone(),
            gamma: gamma.clone(),
            views: poses
                .iter()
                .map(|p| ViewParams {
                    rotation: p.quaternion(),
                    translation: p.translation,
                    sh,
                })
                .collect(),
        };
        return Ok(Scene {
            model: model.clone(),
            spec: *spec,
            params,
            rig: ViewRig { views },
            renders,
        });
    }
    Err(last_err.unwrap_or(Error::Degenerate("scene generation failed")))
}

/// Per-term ceilings that a generated scene must meet at ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFloors {
    pub landmark: f64,
    pub epipolar: f64,
    pub pixel: f64,
    pub depth: f64,
    pub render: f64,
}

impl Default for GroundTruthFloors {
    fn default() -> Self {
        Self {
            landmark: 1e-9,
            epipolar: 1e-6,
            pixel: 0.02,
            depth: 1e-2,
            render: 1e-6,
        }
    }
}

impl Scene {
    /// Evaluates the default objective at ground truth and checks every term
    /// against `floors`.
    pub fn self_check(&self, floors: &GroundTruthFloors) -> Result<crate::losses::LossReport> {
        let obj = Objective::new(&self.model, &self.rig, ObjectiveConfig::default())?;
        let r = obj.total_loss(&self.params)?;
        let checks = [
            ("landmark", r.landmark, floors.landmark),
            ("epipolar", r.epipolar, floors.epipolar),
            ("pixel", r.pixel, floors.pixel),
            ("depth", r.depth, floors.depth),
            ("render", r.render, floors.render),
        ];
        for (name, value, ceiling) in checks {
            if !(value < ceiling) {
                return Err(Error::invalid("scene", format!("ground-truth {name} loss {value:e} exceeds {ceiling:e}")));
            }
        }
        Ok(r)
    }
}

/// Perturbation magnitudes for initializing a fit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub rotation_deg: f64,
    /// Translation offset as a fraction of each view's camera distance.
    pub translation_frac: f64,
    pub coeff_sigma: f64,
    pub seed: u64,
}

/// Rotates every view by exactly `rotation_deg` about a random axis, shifts
/// it by `translation_frac · ‖t‖` in a random direction and adds Gaussian
/// noise to the coefficients. Lighting is left unchanged.
pub fn perturb(params: &ParameterVector, p: &Perturbation) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut out = params.clone();
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(normal(rng), normal(rng), normal(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    };
    for v in &mut out.views {
        let axis = unit(&mut rng);
        let dir = unit(&mut rng);
        if p.rotation_deg != 0.0 {
            let q = UnitQuaternion::from_scaled_axis(axis * p.rotation_deg.to_radians()) * v.rotation;
            v.rotation = UnitQuaternion::new_normalize(q.into_inner());
        }
        v.translation += dir * (p.translation_frac * v.translation.norm());
    }
    for x in out.alpha.iter_mut().chain(out.beta.iter_mut()).chain(out.gamma.iter_mut()) {
        *x += p.coeff_sigma * normal(&mut rng);
    }
    out
}
