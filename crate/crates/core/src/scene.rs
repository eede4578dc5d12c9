//! Scene directories.
//!
//! Layout, with `XX` the zero-padded view index:
//!
//! ```text
//! model.mvfm        morphable model container
//! mean.obj          mean mesh, for viewing
//! rig.json          intrinsics per view, target view, generator spec
//! poses.json        ground-truth pose per view
//! landmarks.json    observed landmarks per view
//! params_gt.json    ground-truth parameters
//! view_XX.pfm       observed image (exact, f32)
//! view_XX.png       observed image (8-bit preview)
//! depth_XX.pfm      ground-truth depth, 0 outside the face
//! ```
//!
//! The PFM images are what fitting reads; the PNGs are never read back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::camera::{euler_from_rotation, CameraIntrinsics};
use crate::error::{check_dim, Error, Result};
use crate::image::{DepthMap, RgbImage};
use crate::model::MorphableModel;
use crate::objective::{ObservedView, ViewRig};
use crate::params::{ParameterVector, ParamsJson};
use crate::synth::{RigSpec, Scene};

pub const MODEL_FILE: &str = "model.mvfm";
pub const MEAN_OBJ_FILE: &str = "mean.obj";
pub const RIG_FILE: &str = "rig.json";
pub const POSES_FILE: &str = "poses.json";
pub const LANDMARKS_FILE: &str = "landmarks.json";
pub const PARAMS_GT_FILE: &str = "params_gt.json";

pub fn view_file(v: usize, ext: &str) -> String {
    format!("view_{v:02}.{ext}")
}

pub fn depth_file(v: usize) -> String {
    format!("depth_{v:02}.pfm")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub target: usize,
    pub intrinsics: Vec<CameraIntrinsics>,
    /// Generator settings, when the scene is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<RigSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    /// `(w, x, y, z)`.
    pub quaternion: [f64; 4],
    pub rotation_euler_rad: [f64; 3],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarksFile {
    pub vertices: Vec<u32>,
    pub confidences: Vec<f64>,
    /// Pixel coordinates `(u, v)` per view.
    pub views: Vec<Vec<[f64; 2]>>,
}

/// A scene read back from disk.
#[derive(Debug, Clone)]
pub struct SceneDir {
    pub model: MorphableModel,
    pub rig: ViewRig,
    pub target: usize,
    pub spec: Option<RigSpec>,
    pub params_gt: Option<ParameterVector>,
    pub depths: Vec<DepthMap>,
}

impl SceneDir {
    pub fn intrinsics(&self) -> Vec<CameraIntrinsics> {
        self.rig.views.iter().map(|v| v.intrinsics).collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Writes `params`, stamped with the model digest when a model is given,
/// and returns exactly what [`read_params`] will read back.
pub fn write_params(path: &Path, params: &ParameterVector, model: Option<&MorphableModel>) -> Result<ParameterVector> {
    let mut j = params.to_json();
    j.model_digest = model.map(MorphableModel::digest);
    write_json(path, &j)?;
    ParameterVector::from_json(&j)
}

pub fn read_params(path: &Path) -> Result<ParameterVector> {
    ParameterVector::from_json(&read_params_json(path)?)
}

pub fn read_params_json(path: &Path) -> Result<ParamsJson> {
    read_json(path)
}

/// Checks that `params` fits `model`, including the stamped digest if any.
pub fn check_params_model(params: &ParamsJson, model: &MorphableModel) -> Result<()> {
    if let Some(d) = &params.model_digest {
        let m = model.digest();
        if *d != m {
            return Err(Error::invalid("parameters", format!("written for model {d}, scene model is {m}")));
        }
    }
    ParameterVector::from_json(params)?.check_model(model)
}

/// Writes every scene file into `dir`, creating it if needed.
pub fn write_scene(
    dir: &Path,
    model: &MorphableModel,
    rig: &ViewRig,
    target: usize,
    spec: Option<&RigSpec>,
    params_gt: &ParameterVector,
    depths: &[DepthMap],
) -> Result<()> {
    check_dim("depth maps", rig.views.len(), depths.len())?;
    check_dim("ground-truth views", rig.views.len(), params_gt.views.len())?;
    fs::create_dir_all(dir)?;
    model.save(&dir.join(MODEL_FILE))?;
    model.write_mean_obj(std::io::BufWriter::new(fs::File::create(dir.join(MEAN_OBJ_FILE))?))?;
    write_json(
        &dir.join(RIG_FILE),
        &RigFile {
            target,
            intrinsics: rig.views.iter().map(|v| v.intrinsics).collect(),
            spec: spec.copied(),
        },
    )?;
    let poses: Vec<PoseEntry> = params_gt
        .views
        .iter()
        .map(|v| {
            let q = v.rotation.quaternion();
            PoseEntry {
                quaternion: [q.w, q.i, q.j, q.k],
                rotation_euler_rad: euler_from_rotation(&v.rotation),
                translation: [v.translation.x, v.translation.y, v.translation.z],
            }
        })
        .collect();
    write_json(&dir.join(POSES_FILE), &poses)?;
    write_json(
        &dir.join(LANDMARKS_FILE),
        &LandmarksFile {
            vertices: model.landmarks.iter().map(|l| l.vertex).collect(),
            confidences: model.landmark_confidences(),
            views: rig.views.iter().map(|v| v.landmarks.clone()).collect(),
        },
    )?;
    write_params(&dir.join(PARAMS_GT_FILE), params_gt, Some(model))?;
    for (v, (view, depth)) in rig.views.iter().zip(depths).enumerate() {
        view.image.save_pfm(&dir.join(view_file(v, "pfm")))?;
        view.image.save_png(&dir.join(view_file(v, "png")))?;
        depth.save_pfm(&dir.join(depth_file(v)))?;
    }
    Ok(())
}

impl Scene {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let depths: Vec<DepthMap> = self.renders.iter().map(|r| r.depth.clone()).collect();
        write_scene(dir, &self.model, &self.rig, self.rig.default_target(), Some(&self.spec), &self.params, &depths)
    }
}

/// Reads a scene directory. `params_gt.json` is optional.
pub fn read_scene(dir: &Path) -> Result<SceneDir> {
    if !dir.is_dir() {
        return Err(Error::invalid("scene", format!("{} is not a directory", dir.display())));
    }
    let model = MorphableModel::load(&dir.join(MODEL_FILE))?;
    let rig_file: RigFile = read_json(&dir.join(RIG_FILE))?;
    let lm: LandmarksFile = read_json(&dir.join(LANDMARKS_FILE))?;
    let n = rig_file.intrinsics.len();
    if n == 0 {
        return Err(Error::invalid("scene", "rig has no views"));
    }
    if rig_file.target >= n {
        return Err(Error::invalid("scene", format!("target view {} out of range", rig_file.target)));
    }
    check_dim("landmark views", n, lm.views.len())?;
    let model_lm: Vec<u32> = model.landmarks.iter().map(|l| l.vertex).collect();
    if model_lm != lm.vertices {
        return Err(Error::invalid("scene", "landmark vertices differ from the model's"));
    }
    let mut views = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for (v, (k, q)) in rig_file.intrinsics.iter().zip(lm.views).enumerate() {
        k.validate()?;
        let image = RgbImage::load_pfm(&dir.join(view_file(v, "pfm")))?;
        if image.width != k.width || image.height != k.height {
            return Err(Error::invalid("scene", format!("view {v} image size differs from its intrinsics")));
        }
        let depth_path: PathBuf = dir.join(depth_file(v));
        if depth_path.exists() {
            depths.push(DepthMap::load_pfm(&depth_path)?);
        }
        views.push(ObservedView {
            intrinsics: *k,
            image,
            landmarks: q,
            skin: None,
        });
    }
    let gt_path = dir.join(PARAMS_GT_FILE);
    let params_gt = if gt_path.exists() { Some(read_params(&gt_path)?) } else { None };
    if let Some(p) = &params_gt {
        p.check_model(&model)?;
        check_dim("ground-truth views", n, p.views.len())?;
    }
    Ok(SceneDir {
        model,
        rig: ViewRig { views },
        target: rig_file.target,
        spec: rig_file.spec,
        params_gt,
        depths,
    })
}
