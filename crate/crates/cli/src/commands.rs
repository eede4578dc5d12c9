use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use mvface_core::losses::{LossWeights, MIN_BASELINE};
use mvface_core::metrics::{evaluate_fit, FitMetrics};
use mvface_core::objective::{Ablation, Frozen, Objective, ObjectiveConfig, Term};
use mvface_core::optimizer::{fit as run_fit, gradient_check_refined, FdSteps, FitConfig, GradientCheckReport};
use mvface_core::scene::{check_params_model, read_params_json, read_scene, write_params, SceneDir};
use mvface_core::params::ParamsJson;
use mvface_core::synth::{generate_model, generate_scene, pairwise_overlap, perturb, ModelSpec, Perturbation, Pivot, RigSpec};
use mvface_core::{relative_pose, render, Image, LossReport, ParameterVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    CmdResult, EvalArgs, Failure, FitArgs, Format, GenArgs, GradcheckArgs, InitArgs, ObjectiveArgs, PivotArg, EXIT_BAD_WEIGHTS,
    EXIT_GRADCHECK, EXIT_MODEL_MISMATCH,
};

fn to_pretty<T: Serialize>(v: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Failure::new(crate::EXIT_GENERIC, e))?;
    s.push('\n');
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CmdResult {
    fs::write(path, to_pretty(v)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Flattens a JSON value into `key,value` lines.
fn to_csv(v: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, x, out);
                }
            }
            Value::Array(a) => {
                for (i, x) in a.iter().enumerate() {
                    walk(&format!("{prefix}.{i}"), x, out);
                }
            }
            Value::String(s) => out.push_str(&format!("{prefix},\"{}\"\n", s.replace('"', "\"\""))),
            other => out.push_str(&format!("{prefix},{other}\n")),
        }
    }
    let mut out = String::from("key,value\n");
    walk("", v, &mut out);
    out
}

fn emit(v: &Value, format: Format, out: Option<&Path>) -> CmdResult {
    let text = match format {
        Format::Json => to_pretty(v)?,
        Format::Csv => to_csv(v),
    };
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn objective_config(a: &ObjectiveArgs, scene: &SceneDir) -> Result<ObjectiveConfig, Failure> {
    let weights = match &a.weights {
        None => LossWeights::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let w: LossWeights = serde_json::from_str(&text)
                .map_err(|e| Failure::new(EXIT_BAD_WEIGHTS, anyhow!("{}: {e}", p.display())))?;
            w.validate().map_err(|e| Failure::new(EXIT_BAD_WEIGHTS, anyhow!("{}: {e}", p.display())))?;
            w
        }
    };
    let mut ablation = Ablation::default();
    for name in &a.ablate {
        ablation = ablation.with(name)?;
    }
    Ok(ObjectiveConfig {
        weights,
        ablation,
        target: Some(scene.target),
        ..Default::default()
    })
}

fn mismatch(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(EXIT_MODEL_MISMATCH, e)
}

/// Reads a parameter file; anything that ties it to another model exits with the mismatch code.
fn load_params(path: &Path, scene: &SceneDir) -> Result<ParameterVector, Failure> {
    let j: ParamsJson = read_params_json(path)?;
    check_params_model(&j, &scene.model).map_err(mismatch)?;
    let p = ParameterVector::from_json(&j)?;
    check_compatible(&p, scene)?;
    Ok(p)
}

fn check_compatible(params: &ParameterVector, scene: &SceneDir) -> CmdResult {
    params.check_model(&scene.model).map_err(mismatch)?;
    if params.views.len() != scene.rig.views.len() {
        return Err(mismatch(anyhow!(
            "parameters have {} views, the scene has {}",
            params.views.len(),
            scene.rig.views.len()
        )));
    }
    Ok(())
}

fn ground_truth(scene: &SceneDir) -> Result<&ParameterVector, Failure> {
    scene
        .params_gt
        .as_ref()
        .ok_or_else(|| Failure::new(crate::EXIT_GENERIC, anyhow!("scene has no ground-truth parameters; pass --init-params")))
}

fn initial_params(scene: &SceneDir, a: &InitArgs) -> Result<ParameterVector, Failure> {
    let p = match &a.init_params {
        Some(path) => load_params(path, scene)?,
        None => perturb(
            ground_truth(scene)?,
            &Perturbation {
                rotation_deg: a.init_rot,
                translation_frac: a.init_trans,
                coeff_sigma: a.init_coeff,
                seed: a.seed,
            },
        ),
    };
    check_compatible(&p, scene)?;
    // Parameters always pass through their file form, so a later `eval` sees the same values.
    Ok(p.canonicalized()?)
}

pub fn gen(a: &GenArgs) -> CmdResult {
    let model = generate_model(&ModelSpec {
        seed: a.seed,
        vertices: a.vertices,
        ..Default::default()
    })?
    // Exactly what the container stores.
    .rounded_to_f32();
    let spec = RigSpec {
        n_views: a.views,
        yaw_deg: a.yaw,
        image_size: a.size,
        jitter_deg: a.jitter,
        pivot: match a.pivot {
            PivotArg::Head => Pivot::Head,
            PivotArg::Camera => Pivot::Camera,
        },
        seed: a.seed,
        ..Default::default()
    };
    let scene = generate_scene(&model, &spec, a.coeff_scale)?;
    scene.write(&a.out)?;
    let saved = read_scene(&a.out)?;
    let obj = Objective::new(&saved.model, &saved.rig, objective_config(&ObjectiveArgs { weights: None, ablate: vec![] }, &saved)?)?;
    let report = obj.total_loss(ground_truth(&saved)?)?;
    let overlap: Vec<Value> = pairwise_overlap(&scene.model, &scene.renders)
        .into_iter()
        .map(|(t, s, f)| json!({"target": t, "source": s, "covisible_fraction": f}))
        .collect();
    let summary = json!({
        "scene": a.out.display().to_string(),
        "views": scene.rig.views.len(),
        "vertices": scene.model.vertex_count(),
        "mask_pixels": scene.renders.iter().map(|r| r.fragments.covered_count()).collect::<Vec<_>>(),
        "overlap": overlap,
        "ground_truth_loss": report,
    });
    emit(&summary, Format::Json, None)
}

fn render_params(obj: &Objective, scene: &SceneDir, params: &ParameterVector, dir: &Path, stem: &str) -> CmdResult {
    let g = obj.geometry(params)?;
    for (v, vp) in params.views.iter().enumerate() {
        let k = &scene.rig.views[v].intrinsics;
        let r = render(&g.vertices, &g.normals, &g.albedo, &scene.model.triangles, &vp.pose(), k, &vp.sh);
        r.image.save_png(&dir.join(format!("{stem}_{v:02}.png")))?;
    }
    Ok(())
}

fn save_covisible(frozen: &Frozen, scene: &SceneDir, dir: &Path, stem: &str) -> CmdResult {
    for p in &frozen.pairs {
        let k = &scene.rig.views[p.target].intrinsics;
        let mut m = Image::filled(k.width, k.height, false);
        for &i in &p.pixels {
            m.data[i as usize] = true;
        }
        m.save_png(&dir.join(format!("{stem}_{:02}_{:02}.png", p.target, p.source)))?;
    }
    Ok(())
}

fn metrics(scene: &SceneDir, params: &ParameterVector) -> Result<Option<FitMetrics>, Failure> {
    match &scene.params_gt {
        Some(gt) => Ok(Some(evaluate_fit(&scene.model, &scene.intrinsics(), params, gt)?)),
        None => Ok(None),
    }
}

pub fn fit(a: &FitArgs) -> CmdResult {
    let scene = read_scene(&a.scene)?;
    let objective = objective_config(&a.objective, &scene)?;
    let init = initial_params(&scene, &a.init)?;
    let mut config = FitConfig {
        objective,
        ..Default::default()
    };
    if let Some(n) = a.max_iters {
        config.max_iters = n;
    }
    let out = a.out.clone().unwrap_or_else(|| a.scene.join("fit"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let obj = Objective::new(&scene.model, &scene.rig, objective)?;
    let (frozen0, _) = obj.evaluate(&init)?;
    let started = std::time::Instant::now();
    let (x, trace) = run_fit(&obj, &init, &config)?;
    let elapsed = started.elapsed();
    let x = write_params(&out.join("params.json"), &x, Some(&scene.model))?;
    let (frozen, eval) = obj.evaluate(&x)?;

    write_params(&out.join("params_init.json"), &init, Some(&scene.model))?;
    write_json(&out.join("config.json"), &config)?;
    write_json(&out.join("trace.json"), &trace)?;
    fs::write(out.join("trace.csv"), trace.to_csv())?;
    render_params(&obj, &scene, &init, &out, "render_before")?;
    render_params(&obj, &scene, &x, &out, "render_after")?;
    save_covisible(&frozen0, &scene, &out, "covisible_before")?;
    save_covisible(&frozen, &scene, &out, "covisible_after")?;

    let report = json!({
        "iterations": trace.entries.len() - 1,
        "converged": trace.converged,
        "stop_reason": trace.stop_reason,
        "initial_loss": trace.entries[0].report.total,
        "loss": eval.report,
        "initial_metrics": metrics(&scene, &init)?,
        "metrics": metrics(&scene, &x)?,
    });
    write_json(&out.join("report.json"), &report)?;
    eprintln!(
        "fit: {} iterations in {:.1} s, loss {:.6e} -> {:.6e} ({})",
        trace.entries.len() - 1,
        elapsed.as_secs_f64(),
        trace.entries[0].report.total,
        eval.report.total,
        trace.stop_reason
    );
    emit(&report, a.format, None)
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let scene = read_scene(&a.scene)?;
    let objective = objective_config(&a.objective, &scene)?;
    let params = load_params(&a.params, &scene)?;
    let obj = Objective::new(&scene.model, &scene.rig, objective)?;
    let loss: LossReport = obj.total_loss(&params)?;
    let report = json!({
        "params_digest": params.digest(),
        "loss": loss,
        "metrics": metrics(&scene, &params)?,
    });
    emit(&report, a.format, a.out.as_deref())
}

/// Step reductions (each by 10) tried on flagged coordinates.
const REFINEMENTS: usize = 2;

#[derive(Serialize)]
struct TermCheck {
    term: &'static str,
    smooth: bool,
    /// `pass`, `fail`, `warn` or `skipped`.
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<GradientCheckReport>,
}

fn skip_reason(term: Term, obj: &Objective, scene: &SceneDir, point: &ParameterVector) -> Result<Option<String>, Failure> {
    let n = scene.rig.views.len();
    let multi = matches!(term, Term::Pixel | Term::Depth | Term::Epipolar);
    if multi && n < 2 {
        return Ok(Some("single view; multi-view term inactive".into()));
    }
    if term == Term::Identity && !obj.evaluate(point)?.0.identity_active() {
        return Ok(Some("no embedding provider; identity term inactive".into()));
    }
    if term == Term::Epipolar {
        // Baselines are a property of the rig: judge them at the ground truth
        // when known, since a rotation-only perturbation moves camera centers.
        let rig = scene.params_gt.as_ref().unwrap_or(point);
        let t = obj.target();
        let all_degenerate = (0..n).filter(|&s| s != t).all(|s| {
            relative_pose(&rig.views[t].pose(), &rig.views[s].pose()).translation.norm() < MIN_BASELINE
        });
        if all_degenerate {
            return Ok(Some("pure rotation between views; epipolar term degenerate, skipped".into()));
        }
    }
    Ok(None)
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let scene = read_scene(&a.scene)?;
    let objective = objective_config(&a.objective, &scene)?;
    let point = initial_params(&scene, &a.init)?;
    let obj = Objective::new(&scene.model, &scene.rig, objective)?;
    let terms: Vec<Term> = match &a.term {
        Some(t) => vec![t.parse()?],
        None => Term::ALL.to_vec(),
    };
    let steps = FdSteps::default();
    let mut checks = Vec::new();
    let mut failed = Vec::new();
    for term in terms {
        if let Some(note) = skip_reason(term, &obj, &scene, &point)? {
            eprintln!("{}: {note}", term.name());
            checks.push(TermCheck {
                term: term.name(),
                smooth: term.is_smooth(),
                status: "skipped",
                note: Some(note),
                report: None,
            });
            continue;
        }
        let rep = gradient_check_refined(|p| obj.term_value(term, p), &point, &steps, REFINEMENTS)?;
        let (status, note) = match (rep.passed(), term.is_smooth()) {
            (true, _) => ("pass", None),
            (false, true) => {
                failed.push(term.name());
                ("fail", Some(format!("{} coordinates disagree across step sizes", rep.flagged.len())))
            }
            (false, false) => {
                let note = format!(
                    "{} coordinates flagged; expected for a rasterized term (piecewise smooth in the parameters)",
                    rep.flagged.len()
                );
                eprintln!("warning: {}: {note}", term.name());
                ("warn", Some(note))
            }
        };
        checks.push(TermCheck {
            term: term.name(),
            smooth: term.is_smooth(),
            status,
            note,
            report: Some(rep),
        });
    }
    let summary = json!({
        "params_digest": point.digest(),
        "passed": failed.is_empty(),
        "terms": checks,
    });
    emit(&summary, a.format, a.out.as_deref())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_GRADCHECK, anyhow!("gradient check failed for smooth terms: {}", failed.join(", "))))
    }
}
