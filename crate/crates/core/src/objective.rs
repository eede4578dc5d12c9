//! The combined multi-view objective over a rig of observed views.
//!
//! Evaluation happens in two stages. [`Objective::freeze`] rasterizes every
//! view and fixes the discrete structure: which triangle owns each covered
//! pixel, the covisible pixels of every (target, source) pair, and which of
//! them sample validly. [`Objective::evaluate_frozen`] then recomputes all
//! residuals with that structure held fixed, re-interpolating each frozen
//! triangle at the pixel center, so small parameter changes move residuals
//! continuously. A full evaluation is a freeze followed by a frozen
//! evaluation at the same point.

use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{relative_pose, CameraIntrinsics, PoseSE3};
use crate::error::{check_dim, Error, Result};
use crate::image::{DepthMap, Image, RgbImage, EMPTY_DEPTH};
use crate::losses::{
    cosine_distance, epipolar_residuals, EmbeddingProvider, LossReport, LossWeights, NullEmbedding, PairLossReport,
    ViewLossReport,
};
use crate::model::{as_points, vertex_normals, MorphableModel};
use crate::params::{ParamGroup, ParameterVector, ViewParams};
use crate::raster::{perspective_weights, project_vertices, rasterize, shade_point, visible_vertices, ScreenVertex};
use crate::synthesis::{
    covisible_map, covisible_triangles, covisible_vertices, sample_source, SynthesisOptions, TriangleRule,
};

/// One calibrated input view.
#[derive(Debug, Clone)]
pub struct ObservedView {
    pub intrinsics: CameraIntrinsics,
    pub image: RgbImage,
    /// 2D landmark detections, one per model landmark.
    pub landmarks: Vec<[f64; 2]>,
    /// Per-pixel skin confidence; `None` means 1 everywhere.
    pub skin: Option<Image<f64>>,
}

#[derive(Debug, Clone)]
pub struct ViewRig {
    pub views: Vec<ObservedView>,
}

impl ViewRig {
    /// The middle view.
    pub fn default_target(&self) -> usize {
        self.views.len() / 2
    }
}

/// Terms switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_multiview: bool,
    pub no_covisible: bool,
    pub no_pixel: bool,
    pub no_depth: bool,
    pub no_epi: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["no-multiview", "no-covisible", "no-pixel", "no-depth", "no-epi"];

    pub fn with(mut self, name: &str) -> Result<Self> {
        match name {
            "no-multiview" => self.no_multiview = true,
            "no-covisible" => self.no_covisible = true,
            "no-pixel" => self.no_pixel = true,
            "no-depth" => self.no_depth = true,
            "no-epi" => self.no_epi = true,
            other => {
                return Err(Error::invalid(
                    "ablation",
                    format!("unknown flag {other:?}; expected one of {}", Self::NAMES.join(", ")),
                ))
            }
        }
        Ok(self)
    }

    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        let mut w = *w;
        if self.no_multiview {
            w.w_mul = 0.0;
        }
        if self.no_pixel {
            w.w_pixel = 0.0;
        }
        if self.no_depth {
            w.w_depth = 0.0;
        }
        if self.no_epi {
            w.w_epi = 0.0;
        }
        w
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma-separated flag list; empty means no ablation.
    fn from_str(s: &str) -> Result<Self> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).try_fold(Ablation::default(), |a, t| a.with(t))
    }
}

/// One unweighted loss term, as reported in [`LossReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    Regularization,
    Landmark,
    Epipolar,
    Render,
    Identity,
    Pixel,
    Depth,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Regularization,
        Term::Landmark,
        Term::Epipolar,
        Term::Render,
        Term::Identity,
        Term::Pixel,
        Term::Depth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Term::Regularization => "regularization",
            Term::Landmark => "landmark",
            Term::Epipolar => "epipolar",
            Term::Render => "render",
            Term::Identity => "identity",
            Term::Pixel => "pixel",
            Term::Depth => "depth",
        }
    }

    /// Smooth in the parameters; the rasterized terms are only piecewise smooth.
    pub fn is_smooth(&self) -> bool {
        matches!(self, Term::Regularization | Term::Landmark | Term::Epipolar)
    }

    pub fn of(&self, r: &LossReport) -> f64 {
        match self {
            Term::Regularization => r.regularization,
            Term::Landmark => r.landmark,
            Term::Epipolar => r.epipolar,
            Term::Render => r.render,
            Term::Identity => r.identity,
            Term::Pixel => r.pixel,
            Term::Depth => r.depth,
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid("term", format!("unknown term '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub triangle_rule: TriangleRule,
    /// Occlusion guard tolerance as a fraction of the mean target depth.
    pub occlusion_tolerance: f64,
    /// Target view; `None` selects the middle view.
    pub target: Option<usize>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            triangle_rule: TriangleRule::AnyVertex,
            occlusion_tolerance: 0.01,
            target: None,
        }
    }
}

/// How a residual group enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    /// `weight · Σ r²`
    Squared,
    /// `weight · ‖r‖₂`
    Norm,
}

/// Consecutive residuals sharing a weight and penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group {
    pub len: u32,
    pub weight: f64,
    pub penalty: Penalty,
}

/// Identifies an independently evaluable slice of the residual vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockId {
    Regularization,
    View(usize),
    Pair(usize),
}

/// Residual values and their grouping for one block.
#[derive(Debug, Clone, Default)]
pub struct Block {
    pub values: Vec<f64>,
    pub groups: Vec<Group>,
}

impl Block {
    fn push(&mut self, values: &[f64], weight: f64, penalty: Penalty) {
        self.values.extend_from_slice(values);
        self.groups.push(Group {
            len: values.len() as u32,
            weight,
            penalty,
        });
    }

    /// Weighted penalty sum of the block.
    pub fn loss(&self) -> f64 {
        let mut i = 0;
        let mut total = 0.0;
        for g in &self.groups {
            let r = &self.values[i..i + g.len as usize];
            let sq: f64 = r.iter().map(|x| x * x).sum();
            total += g.weight
                * match g.penalty {
                    Penalty::Squared => sq,
                    Penalty::Norm => sq.sqrt(),
                };
            i += g.len as usize;
        }
        total
    }
}

/// Frozen rasterization of one view.
#[derive(Debug, Clone)]
pub struct FrozenView {
    /// Covered pixel indices, row-major.
    pub pixels: Vec<u32>,
    /// Owning triangle of each covered pixel.
    pub triangles: Vec<u32>,
    pub width: usize,
    pub height: usize,
}

/// Frozen correspondence structure of one (target, source) pair.
#[derive(Debug, Clone)]
pub struct FrozenPair {
    pub target: usize,
    pub source: usize,
    pub covisible_pixels: usize,
    /// Covisible target pixels that warped and sampled validly.
    pub pixels: Vec<u32>,
    pub occlusion_tolerance: Option<f64>,
    pub epipolar: bool,
    pub notes: Vec<String>,
}

/// Discrete structure held fixed while residuals are differentiated.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub target: usize,
    pub views: Vec<FrozenView>,
    pub pairs: Vec<FrozenPair>,
    pixel_pairs: usize,
    depth_pairs: usize,
    epipolar_pairs: usize,
    identity_active: bool,
}

impl Frozen {
    /// Whether the identity term has an embedding to compare.
    pub fn identity_active(&self) -> bool {
        self.identity_active
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        let mut ids = vec![BlockId::Regularization];
        ids.extend((0..self.views.len()).map(BlockId::View));
        ids.extend((0..self.pairs.len()).map(BlockId::Pair));
        ids
    }

    /// Blocks whose residuals depend on parameters of `group`.
    pub fn blocks_touched_by(&self, group: ParamGroup) -> Vec<BlockId> {
        match group {
            ParamGroup::Identity | ParamGroup::Expression => self.block_ids(),
            ParamGroup::Albedo => {
                let mut ids = vec![BlockId::Regularization];
                ids.extend((0..self.views.len()).map(BlockId::View));
                ids
            }
            ParamGroup::Rotation { view } | ParamGroup::Translation { view } => {
                let mut ids = vec![BlockId::View(view)];
                ids.extend(
                    self.pairs
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.target == view || p.source == view)
                        .map(|(i, _)| BlockId::Pair(i)),
                );
                ids
            }
            ParamGroup::Lighting { view } => vec![BlockId::View(view)],
        }
    }
}

/// Shape, normals and albedo of the current parameters.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub albedo: Vec<f64>,
}

/// One view rendered with a frozen structure.
#[derive(Debug, Clone)]
pub struct ViewEval {
    /// Color of each frozen covered pixel.
    pub colors: Vec<[f64; 3]>,
    /// Depth map of the frozen covered pixels.
    pub depth: DepthMap,
    /// Projected model landmarks.
    pub landmarks: Vec<[f64; 2]>,
}

/// All per-block residuals of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub geometry: Geometry,
    pub views: Vec<ViewEval>,
    pub blocks: Vec<Block>,
    pub report: LossReport,
}

pub struct Objective<'a> {
    pub model: &'a MorphableModel,
    pub rig: &'a ViewRig,
    pub config: ObjectiveConfig,
    weights: LossWeights,
    embedding: &'a dyn EmbeddingProvider,
    lm_vertices: Vec<usize>,
    lm_confidence: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(model: &'a MorphableModel, rig: &'a ViewRig, config: ObjectiveConfig) -> Result<Self> {
        config.weights.validate()?;
        if rig.views.is_empty() {
            return Err(Error::invalid("rig", "no views"));
        }
        let target = config.target.unwrap_or(rig.views.len() / 2);
        if target >= rig.views.len() {
            return Err(Error::invalid("rig", format!("target view {target} out of range")));
        }
        for v in &rig.views {
            v.intrinsics.validate()?;
            check_dim("view image", v.intrinsics.pixel_count(), v.image.data.len())?;
            check_dim("view landmarks", model.landmarks.len(), v.landmarks.len())?;
            if let Some(s) = &v.skin {
                check_dim("skin weights", v.intrinsics.pixel_count(), s.data.len())?;
            }
        }
        Ok(Self {
            model,
            rig,
            config,
            weights: config.ablation.apply(&config.weights),
            embedding: &NullEmbedding,
            lm_vertices: model.landmark_vertices(),
            lm_confidence: model.landmark_confidences(),
        })
    }

    pub fn with_embedding(mut self, embedding: &'a dyn EmbeddingProvider) -> Self {
        self.embedding = embedding;
        self
    }

    /// Weights after ablation.
    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn target(&self) -> usize {
        self.config.target.unwrap_or(self.rig.views.len() / 2)
    }

    fn check(&self, params: &ParameterVector) -> Result<()> {
        params.check_model(self.model)?;
        check_dim("parameter views", self.rig.views.len(), params.views.len())?;
        params.validate()
    }

    pub fn geometry(&self, params: &ParameterVector) -> Result<Geometry> {
        let shape = self.model.synthesize_shape(&params.alpha, &params.beta)?;
        let vertices = as_points(shape.as_slice());
        let normals = vertex_normals(&vertices, &self.model.triangles).normals;
        let albedo = self.model.synthesize_albedo(&params.gamma)?.as_slice().to_vec();
        Ok(Geometry {
            vertices,
            normals,
            albedo,
        })
    }

    /// Freezes ownership, covisibility and sampling validity at `params`.
    pub fn freeze(&self, params: &ParameterVector) -> Result<Frozen> {
        self.check(params)?;
        let geom = self.geometry(params)?;
        self.freeze_with(params, &geom)
    }

    fn freeze_with(&self, params: &ParameterVector, geom: &Geometry) -> Result<Frozen> {
        let tris = &self.model.triangles;
        let n = self.rig.views.len();
        let mut views = Vec::with_capacity(n);
        let mut visible = Vec::with_capacity(n);
        let mut fragments = Vec::with_capacity(n);
        for (v, (obs, vp)) in self.rig.views.iter().zip(&params.views).enumerate() {
            let fb = rasterize(&geom.vertices, tris, &vp.pose(), &obs.intrinsics);
            let pixels = fb.covered_pixels();
            if pixels.is_empty() {
                return Err(Error::EmptyRender { view: v });
            }
            views.push(FrozenView {
                triangles: pixels.iter().map(|&i| fb.triangle[i]).collect(),
                pixels: pixels.into_iter().map(|i| i as u32).collect(),
                width: fb.width,
                height: fb.height,
            });
            visible.push(visible_vertices(&fb, tris, geom.vertices.len()));
            fragments.push(fb);
        }
        let evals: Vec<ViewEval> = (0..n).map(|v| self.eval_view(v, geom, &params.views[v], &views[v])).collect();

        let target = self.target();
        let mut frozen = Frozen {
            target,
            views,
            pairs: Vec::new(),
            pixel_pairs: 0,
            depth_pairs: 0,
            epipolar_pairs: 0,
            identity_active: false,
        };
        let pose_t = params.views[target].pose();
        for source in (0..n).filter(|&s| s != target) {
            let mut notes = Vec::new();
            let rel = relative_pose(&pose_t, &params.views[source].pose());
            let (mask, tolerance) = if self.config.ablation.no_covisible {
                (fragments[target].mask(), None)
            } else {
                let cv = covisible_vertices(&visible[target], &visible[source])?;
                let ct = covisible_triangles(&cv, tris, self.config.triangle_rule);
                let dt = &evals[target].depth.data;
                let (sum, cnt) = dt.iter().filter(|d| **d > 0.0).fold((0.0, 0usize), |(s, c), d| (s + d, c + 1));
                (
                    covisible_map(&ct, &fragments[target]).mask,
                    Some(self.config.occlusion_tolerance * sum / cnt.max(1) as f64),
                )
            };
            let covisible_pixels = mask.count();
            let obs_t = &self.rig.views[target];
            let obs_s = &self.rig.views[source];
            let back = rel.inverse();
            let opts = SynthesisOptions {
                occlusion_tolerance: tolerance,
            };
            let width = obs_t.intrinsics.width;
            let pixels: Vec<u32> = (0..mask.data.len())
                .filter(|&i| mask.data[i])
                .filter(|&i| {
                    sample_source(
                        (i % width) as f64,
                        (i / width) as f64,
                        evals[target].depth.data[i],
                        &obs_s.image,
                        &evals[source].depth,
                        &rel,
                        &back,
                        &obs_t.intrinsics,
                        &obs_s.intrinsics,
                        opts,
                    )
                    .is_some()
                })
                .map(|i| i as u32)
                .collect();
            if pixels.is_empty() {
                notes.push("no valid covisible pixels; pixel and depth terms skipped".to_string());
            }
            let epipolar = rel.translation.norm() >= crate::losses::MIN_BASELINE;
            if !epipolar {
                notes.push("pure rotation between views; epipolar term degenerate, skipped".to_string());
            }
            frozen.pairs.push(FrozenPair {
                target,
                source,
                covisible_pixels,
                pixels,
                occlusion_tolerance: tolerance,
                epipolar,
                notes,
            });
        }
        frozen.pixel_pairs = frozen.pairs.iter().filter(|p| !p.pixels.is_empty()).count();
        frozen.depth_pairs = frozen.pixel_pairs;
        frozen.epipolar_pairs = frozen.pairs.iter().filter(|p| p.epipolar).count();
        let mask0 = fragments[0].mask();
        frozen.identity_active = self.embedding.embed(&self.rig.views[0].image, &mask0).is_some();
        Ok(frozen)
    }

    /// Renders one view through its frozen ownership.
    pub fn eval_view(&self, v: usize, geom: &Geometry, vp: &ViewParams, fv: &FrozenView) -> ViewEval {
        let k = &self.rig.views[v].intrinsics;
        let pose = vp.pose();
        let screen = project_vertices(&geom.vertices, &pose, k);
        let tris = &self.model.triangles;
        let mut colors = Vec::with_capacity(fv.pixels.len());
        let mut depth = Image::filled(fv.width, fv.height, EMPTY_DEPTH);
        for (&p, &t) in fv.pixels.iter().zip(&fv.triangles) {
            let tri = &tris[t as usize];
            let sv: Option<[ScreenVertex; 3]> = (|| Some([screen[tri[0] as usize]?, screen[tri[1] as usize]?, screen[tri[2] as usize]?]))();
            let p = p as usize;
            let hit = sv.and_then(|sv| perspective_weights((p % fv.width) as f64, (p / fv.width) as f64, &sv));
            match hit {
                Some((w, z)) => {
                    colors.push(shade_point(tri, &w, &geom.normals, &geom.albedo, &vp.sh));
                    depth.data[p] = z;
                }
                None => colors.push([0.0; 3]),
            }
        }
        let landmarks = self
            .lm_vertices
            .iter()
            .map(|&i| {
                let c = pose.transform(&geom.vertices[i]);
                [k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy]
            })
            .collect();
        ViewEval {
            colors,
            depth,
            landmarks,
        }
    }

    fn full_image(&self, fv: &FrozenView, colors: &[[f64; 3]]) -> RgbImage {
        let mut img = Image::filled(fv.width, fv.height, [0.0; 3]);
        for (&p, c) in fv.pixels.iter().zip(colors) {
            img.data[p as usize] = *c;
        }
        img
    }

    /// Render, landmark and identity residuals of one view.
    pub fn view_block(&self, v: usize, fv: &FrozenView, ev: &ViewEval, frozen: &Frozen) -> (Block, ViewLossReport) {
        let w = &self.weights;
        let n = self.rig.views.len() as f64;
        let obs = &self.rig.views[v];
        let m = fv.pixels.len() as f64;
        let mut block = Block::default();
        let mut render = 0.0;
        for (&p, c) in fv.pixels.iter().zip(&ev.colors) {
            let o = obs.image.data[p as usize];
            let r = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
            let skin = obs.skin.as_ref().map_or(1.0, |s| s.data[p as usize]);
            render += skin * (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            block.push(&r, w.w_2d * w.w_render * skin / (n * m), Penalty::Norm);
        }
        render /= m;
        let mut landmark = 0.0;
        for ((q, gt), c) in ev.landmarks.iter().zip(&obs.landmarks).zip(&self.lm_confidence) {
            let r = [gt[0] - q[0], gt[1] - q[1]];
            landmark += c * (r[0] * r[0] + r[1] * r[1]);
            block.push(&r, w.w_2d * w.w_lm * c / n, Penalty::Squared);
        }
        let mut identity = 0.0;
        if frozen.identity_active {
            let mut mask = Image::filled(fv.width, fv.height, false);
            for &p in &fv.pixels {
                mask.data[p as usize] = true;
            }
            let rendered = self.full_image(fv, &ev.colors);
            if let (Some(a), Some(b)) = (self.embedding.embed(&obs.image, &mask), self.embedding.embed(&rendered, &mask)) {
                identity = cosine_distance(&a, &b);
            }
            block.push(&[identity], w.w_2d * w.w_id / n, Penalty::Norm);
        }
        let report = ViewLossReport {
            view: v,
            render,
            landmark,
            identity,
            mask_pixels: fv.pixels.len(),
        };
        (block, report)
    }

    pub fn regularization_block(&self, params: &ParameterVector) -> (Block, f64) {
        let w = &self.weights;
        let mut block = Block::default();
        block.push(&params.alpha, w.w_2d * w.w_reg * w.w_id_reg, Penalty::Squared);
        block.push(&params.beta, w.w_2d * w.w_reg * w.w_exp_reg, Penalty::Squared);
        block.push(&params.gamma, w.w_2d * w.w_reg * w.w_tex_reg, Penalty::Squared);
        (block, crate::losses::regularization_loss(&params.alpha, &params.beta, &params.gamma, w))
    }

    /// Pixel, depth and epipolar residuals of one pair.
    pub fn pair_block(
        &self,
        fp: &FrozenPair,
        params: &ParameterVector,
        eval_t: &ViewEval,
        eval_s: &ViewEval,
        frozen: &Frozen,
    ) -> (Block, PairLossReport) {
        let w = &self.weights;
        let (t, s) = (fp.target, fp.source);
        let obs_t = &self.rig.views[t];
        let obs_s = &self.rig.views[s];
        let rel = relative_pose(&params.views[t].pose(), &params.views[s].pose());
        let back = rel.inverse();
        let opts = SynthesisOptions {
            occlusion_tolerance: fp.occlusion_tolerance,
        };
        let mut report = PairLossReport {
            target: t,
            source: s,
            covisible_pixels: fp.covisible_pixels,
            valid_pixels: fp.pixels.len(),
            notes: fp.notes.clone(),
            ..Default::default()
        };
        let mut block = Block::default();
        let nvalid = fp.pixels.len();
        if nvalid > 0 {
            let width = obs_t.intrinsics.width;
            let mut pix = Vec::with_capacity(3 * nvalid);
            let mut synth_depth = Vec::with_capacity(nvalid);
            let mut target_depth = Vec::with_capacity(nvalid);
            let mut dropped = 0usize;
            for &p in &fp.pixels {
                let p = p as usize;
                let dt = eval_t.depth.data[p];
                let sample = sample_source(
                    (p % width) as f64,
                    (p / width) as f64,
                    dt,
                    &obs_s.image,
                    &eval_s.depth,
                    &rel,
                    &back,
                    &obs_t.intrinsics,
                    &obs_s.intrinsics,
                    opts,
                );
                match sample {
                    Some(sm) => {
                        let o = obs_t.image.data[p];
                        pix.extend_from_slice(&[sm.color[0] - o[0], sm.color[1] - o[1], sm.color[2] - o[2]]);
                        synth_depth.push(sm.depth_in_target);
                        target_depth.push(dt);
                    }
                    None => {
                        // Frozen pixels that stop sampling validly contribute nothing.
                        dropped += 1;
                        pix.extend_from_slice(&[0.0; 3]);
                        synth_depth.push(0.0);
                        target_depth.push(0.0);
                    }
                }
            }
            let n = nvalid as f64;
            let pixel = pix.iter().map(|x| x.abs()).sum::<f64>() / (3.0 * n);
            let cp = w.w_mul * w.w_pixel / (3.0 * n * frozen.pixel_pairs as f64);
            for r in &pix {
                block.push(std::slice::from_ref(r), cp, Penalty::Norm);
            }
            let num: f64 = target_depth.iter().sum();
            let den: f64 = synth_depth.iter().sum();
            let scale = if den > 0.0 { num / den } else { 0.0 };
            let cd = w.w_mul * w.w_depth / (n * frozen.depth_pairs as f64);
            let mut depth = 0.0;
            for (a, b) in synth_depth.iter().zip(&target_depth) {
                let r = scale * a - b;
                depth += r.abs();
                block.push(&[r], cd, Penalty::Norm);
            }
            report.pixel = Some(pixel);
            report.depth = Some(depth / n);
            if dropped > 0 {
                report.notes.push(format!("{dropped} frozen pixels no longer sample validly"));
            }
        }
        if fp.epipolar {
            let res = epipolar_residuals(&obs_t.landmarks, &obs_s.landmarks, &rel, &obs_t.intrinsics, &obs_s.intrinsics)
                .unwrap_or_else(|| vec![0.0; 2 * obs_t.landmarks.len()]);
            let ce = w.w_mul * w.w_epi / frozen.epipolar_pairs as f64;
            for r in &res {
                block.push(std::slice::from_ref(r), ce, Penalty::Norm);
            }
            report.epipolar = Some(res.iter().sum());
        }
        (block, report)
    }

    /// Evaluates every block with the structure held fixed.
    pub fn evaluate_frozen(&self, params: &ParameterVector, frozen: &Frozen) -> Result<Evaluation> {
        self.check(params)?;
        let geometry = self.geometry(params)?;
        Ok(self.evaluate_frozen_with(params, frozen, geometry))
    }

    fn evaluate_frozen_with(&self, params: &ParameterVector, frozen: &Frozen, geometry: Geometry) -> Evaluation {
        let views: Vec<ViewEval> = (0..frozen.views.len())
            .map(|v| self.eval_view(v, &geometry, &params.views[v], &frozen.views[v]))
            .collect();
        let mut blocks = Vec::with_capacity(1 + views.len() + frozen.pairs.len());
        let mut report = LossReport {
            identity_active: frozen.identity_active,
            ..Default::default()
        };
        let (reg, reg_value) = self.regularization_block(params);
        blocks.push(reg);
        report.regularization = reg_value;
        for (v, ev) in views.iter().enumerate() {
            let (b, r) = self.view_block(v, &frozen.views[v], ev, frozen);
            blocks.push(b);
            report.views.push(r);
        }
        for fp in &frozen.pairs {
            let (b, r) = self.pair_block(fp, params, &views[fp.target], &views[fp.source], frozen);
            blocks.push(b);
            report.pairs.push(r);
        }
        for p in &report.pairs {
            report.warnings.extend(p.notes.iter().map(|n| format!("pair ({}, {}): {n}", p.target, p.source)));
        }
        report.finalize(&self.weights);
        Evaluation {
            geometry,
            views,
            blocks,
            report,
        }
    }

    /// Re-evaluates only `ids`, reusing `base` for everything else.
    pub fn evaluate_blocks(
        &self,
        params: &ParameterVector,
        frozen: &Frozen,
        base: &Evaluation,
        group: ParamGroup,
        ids: &[BlockId],
    ) -> Result<Vec<Block>> {
        let geometry_changes = matches!(group, ParamGroup::Identity | ParamGroup::Expression | ParamGroup::Albedo);
        let owned;
        let geom = if geometry_changes {
            owned = self.geometry(params)?;
            &owned
        } else {
            &base.geometry
        };
        let view_changed = |v: usize| match group.view() {
            Some(gv) => gv == v,
            None => geometry_changes,
        };
        let mut cache: Vec<Option<ViewEval>> = vec![None; frozen.views.len()];
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let block = match *id {
                BlockId::Regularization => self.regularization_block(params).0,
                BlockId::View(v) => {
                    let ev = cache[v].get_or_insert_with(|| self.eval_view(v, geom, &params.views[v], &frozen.views[v]));
                    self.view_block(v, &frozen.views[v], ev, frozen).0
                }
                BlockId::Pair(i) => {
                    let fp = &frozen.pairs[i];
                    for v in [fp.target, fp.source] {
                        if view_changed(v) && cache[v].is_none() {
                            cache[v] = Some(self.eval_view(v, geom, &params.views[v], &frozen.views[v]));
                        }
                    }
                    let pick = |v: usize| if view_changed(v) { cache[v].as_ref().unwrap() } else { &base.views[v] };
                    self.pair_block(fp, params, pick(fp.target), pick(fp.source), frozen).0
                }
            };
            out.push(block);
        }
        Ok(out)
    }

    /// Full evaluation: freeze at `params`, then evaluate.
    pub fn evaluate(&self, params: &ParameterVector) -> Result<(Frozen, Evaluation)> {
        self.check(params)?;
        let geometry = self.geometry(params)?;
        let frozen = self.freeze_with(params, &geometry)?;
        let eval = self.evaluate_frozen_with(params, &frozen, geometry);
        Ok((frozen, eval))
    }

    pub fn total_loss(&self, params: &ParameterVector) -> Result<LossReport> {
        Ok(self.evaluate(params)?.1.report)
    }

    /// Value of one term. Smooth terms are computed without rasterizing, so
    /// they agree with [`Objective::total_loss`] but are much cheaper.
    pub fn term_value(&self, term: Term, params: &ParameterVector) -> Result<f64> {
        self.check(params)?;
        let n = self.rig.views.len() as f64;
        match term {
            Term::Regularization => {
                Ok(crate::losses::regularization_loss(&params.alpha, &params.beta, &params.gamma, &self.weights))
            }
            Term::Landmark => {
                let shape = self.model.synthesize_shape(&params.alpha, &params.beta)?;
                let verts = as_points(shape.as_slice());
                let mut total = 0.0;
                for (v, obs) in self.rig.views.iter().enumerate() {
                    let pose = params.views[v].pose();
                    let k = &obs.intrinsics;
                    let q: Vec<[f64; 2]> = self
                        .lm_vertices
                        .iter()
                        .map(|&i| {
                            let c = pose.transform(&verts[i]);
                            [k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy]
                        })
                        .collect();
                    total += crate::losses::landmark_loss(&obs.landmarks, &q, &self.lm_confidence)?;
                }
                Ok(total / n)
            }
            Term::Epipolar => {
                let t = self.target();
                let obs_t = &self.rig.views[t];
                let mut sum = 0.0;
                let mut count = 0;
                for (s, obs_s) in self.rig.views.iter().enumerate().filter(|(s, _)| *s != t) {
                    let rel = relative_pose(&params.views[t].pose(), &params.views[s].pose());
                    if let Some(e) = crate::losses::epipolar_loss(&obs_t.landmarks, &obs_s.landmarks, &rel, &obs_t.intrinsics, &obs_s.intrinsics)? {
                        sum += e;
                        count += 1;
                    }
                }
                Ok(if count == 0 { 0.0 } else { sum / count as f64 })
            }
            _ => Ok(term.of(&self.total_loss(params)?)),
        }
    }

    /// Pose of every view.
    pub fn poses(params: &ParameterVector) -> Vec<PoseSE3> {
        params.views.iter().map(ViewParams::pose).collect()
    }
}
