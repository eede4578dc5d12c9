//! Finite-difference derivatives and a damped Gauss-Newton fitter.
//!
//! The objective mixes squared residuals with Euclidean norms of residual
//! groups. Each iteration linearizes residuals by central differences with
//! the discrete structure frozen, replaces every norm `c·‖r‖` by the
//! quadratic `c·‖r‖² / (2‖r₀‖)` that touches it at the current point
//! (iteratively reweighted least squares) and takes a Levenberg-Marquardt
//! step. Steps are accepted only if the true objective, re-rendered from
//! scratch, decreases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::objective::{Block, BlockId, Evaluation, Frozen, Objective, ObjectiveConfig, Penalty};
use crate::params::{ParamGroup, ParameterVector};

/// Finite-difference step per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdSteps {
    /// Radians.
    pub rotation: f64,
    /// Fraction of the view's camera distance.
    pub translation: f64,
    pub coefficient: f64,
    pub lighting: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            rotation: 1e-3,
            translation: 1e-3,
            coefficient: 1e-3,
            lighting: 1e-2,
        }
    }
}

impl FdSteps {
    pub fn validate(&self) -> Result<()> {
        if [self.rotation, self.translation, self.coefficient, self.lighting].iter().all(|h| *h > 0.0 && h.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("finite-difference steps", "must be positive and finite"))
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            rotation: self.rotation * f,
            translation: self.translation * f,
            coefficient: self.coefficient * f,
            lighting: self.lighting * f,
        }
    }

    /// Step of every tangent coordinate of `params`.
    pub fn per_coordinate(&self, params: &ParameterVector) -> Vec<f64> {
        params
            .tangent_groups()
            .iter()
            .map(|g| match *g {
                ParamGroup::Identity | ParamGroup::Expression | ParamGroup::Albedo => self.coefficient,
                ParamGroup::Rotation { .. } => self.rotation,
                ParamGroup::Translation { view } => self.translation * params.views[view].translation.norm().max(1.0),
                ParamGroup::Lighting { .. } => self.lighting,
            })
            .collect()
    }
}

fn unit_step(params: &ParameterVector, j: usize, h: f64) -> ParameterVector {
    let mut d = vec![0.0; params.tangent_dim()];
    d[j] = h;
    params.retract(&d)
}

/// Central-difference gradient of a scalar objective over tangent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericGradient {
    pub gradient: Vec<f64>,
    /// Coordinates where a probe was non-finite and a one-sided difference was used.
    pub one_sided: Vec<usize>,
    /// Coordinates where both probes were non-finite; their gradient is 0.
    pub failed: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum Stencil {
    Central,
    OneSided,
    Failed,
}

fn difference<F>(f: &F, params: &ParameterVector, f0: f64, j: usize, h: f64) -> (f64, Stencil)
where
    F: Fn(&ParameterVector) -> Result<f64>,
{
    let finite = |r: Result<f64>| r.ok().filter(|v| v.is_finite());
    let fp = finite(f(&unit_step(params, j, h)));
    let fm = finite(f(&unit_step(params, j, -h)));
    match (fp, fm) {
        (Some(p), Some(m)) => ((p - m) / (2.0 * h), Stencil::Central),
        (Some(p), None) => ((p - f0) / h, Stencil::OneSided),
        (None, Some(m)) => ((f0 - m) / h, Stencil::OneSided),
        (None, None) => (0.0, Stencil::Failed),
    }
}

fn finite_value<F>(f: &F, params: &ParameterVector) -> Result<f64>
where
    F: Fn(&ParameterVector) -> Result<f64>,
{
    let f0 = f(params)?;
    if f0.is_finite() {
        Ok(f0)
    } else {
        Err(Error::invalid("objective", "not finite at the expansion point"))
    }
}

/// Central differences with per-group steps; rotations are perturbed on the
/// tangent space and renormalized. A non-finite probe falls back to a
/// one-sided difference.
pub fn numeric_gradient<F>(f: F, params: &ParameterVector, steps: &FdSteps) -> Result<NumericGradient>
where
    F: Fn(&ParameterVector) -> Result<f64> + Sync,
{
    let f0 = finite_value(&f, params)?;
    let hs = steps.per_coordinate(params);
    let parts: Vec<(f64, Stencil)> = (0..hs.len()).into_par_iter().map(|j| difference(&f, params, f0, j, hs[j])).collect();
    let with = |s: Stencil| parts.iter().enumerate().filter(|(_, p)| p.1 == s).map(|(i, _)| i).collect();
    Ok(NumericGradient {
        gradient: parts.iter().map(|p| p.0).collect(),
        one_sided: with(Stencil::OneSided),
        failed: with(Stencil::Failed),
    })
}

/// Step-halving comparison for one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub group: ParamGroup,
    /// Step `h` actually used.
    pub step: f64,
    pub g_h: f64,
    pub g_h2: f64,
    pub g_h4: f64,
    /// `(g_h − g_h/2) / (g_h/2 − g_h/4)`; about 4 where truncation error
    /// dominates, `None` where the differences are at rounding level.
    pub richardson_ratio: Option<f64>,
    pub relative_discrepancy: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub flagged: Vec<usize>,
    /// Coordinates that passed only after shrinking the step.
    pub refined: Vec<usize>,
    pub max_relative_discrepancy: f64,
    pub tolerance: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Relative discrepancy above which a coordinate is flagged.
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

fn check_coordinate<F>(f: &F, params: &ParameterVector, f0: f64, j: usize, group: ParamGroup, h: f64, gscale: f64) -> CoordinateCheck
where
    F: Fn(&ParameterVector) -> Result<f64>,
{
    let g1 = difference(f, params, f0, j, h).0;
    let g2 = difference(f, params, f0, j, h * 0.5).0;
    let g4 = difference(f, params, f0, j, h * 0.25).0;
    // Rounding noise of a central difference at step h/4.
    let noise = 64.0 * f64::EPSILON * f0.abs() / (h * 0.25) + 16.0 * f64::EPSILON * g2.abs();
    let (d12, d24) = (g1 - g2, g2 - g4);
    let richardson_ratio = (d24.abs() > 10.0 * noise).then(|| d12 / d24);
    let scale = g2.abs().max(1e-6 * gscale).max(1e3 * noise);
    let relative_discrepancy = if scale > 0.0 { d12.abs() / scale } else { 0.0 };
    CoordinateCheck {
        index: j,
        group,
        step: h,
        g_h: g1,
        g_h2: g2,
        g_h4: g4,
        richardson_ratio,
        relative_discrepancy,
        flagged: relative_discrepancy > GRADIENT_TOLERANCE,
    }
}

/// Compares FD gradients at steps `h`, `h/2` and `h/4` for every coordinate.
pub fn gradient_check<F>(f: F, params: &ParameterVector, steps: &FdSteps) -> Result<GradientCheckReport>
where
    F: Fn(&ParameterVector) -> Result<f64> + Sync,
{
    gradient_check_refined(f, params, steps, 0)
}

/// As [`gradient_check`], but a flagged coordinate is re-checked with its
/// step divided by 10, up to `refinements` times. A kink of a piecewise
/// smooth term lying within `h` of the point then stops mattering, while a
/// discontinuity stays flagged. A kink exactly at the point is invisible to
/// central differences.
pub fn gradient_check_refined<F>(f: F, params: &ParameterVector, steps: &FdSteps, refinements: usize) -> Result<GradientCheckReport>
where
    F: Fn(&ParameterVector) -> Result<f64> + Sync,
{
    let f0 = finite_value(&f, params)?;
    let groups = params.tangent_groups();
    let hs = steps.per_coordinate(params);
    let gscale = numeric_gradient(&f, params, steps)?.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let coordinates: Vec<(CoordinateCheck, bool)> = (0..hs.len())
        .into_par_iter()
        .map(|j| {
            let mut c = check_coordinate(&f, params, f0, j, groups[j], hs[j], gscale);
            let mut refined = false;
            for k in 1..=refinements {
                if !c.flagged {
                    break;
                }
                c = check_coordinate(&f, params, f0, j, groups[j], hs[j] * 0.1f64.powi(k as i32), gscale);
                refined = !c.flagged;
            }
            (c, refined)
        })
        .collect();
    Ok(GradientCheckReport {
        flagged: coordinates.iter().filter(|c| c.0.flagged).map(|c| c.0.index).collect(),
        refined: coordinates.iter().filter(|c| c.1).map(|c| c.0.index).collect(),
        max_relative_discrepancy: coordinates.iter().map(|c| c.0.relative_discrepancy).fold(0.0, f64::max),
        coordinates: coordinates.into_iter().map(|c| c.0).collect(),
        tolerance: GRADIENT_TOLERANCE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Damping beyond which the solver gives up on finding a decrease.
    pub lambda_max: f64,
    pub steps: FdSteps,
    /// Stop once an accepted step lowers the loss by less than this fraction.
    pub ftol: f64,
    /// Stop once the tangent step norm falls below this.
    pub xtol: f64,
    /// Floor on residual norms in the reweighting.
    pub irls_epsilon: f64,
    pub objective: ObjectiveConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 60,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 3.0,
            lambda_max: 1e10,
            steps: FdSteps::default(),
            ftol: 1e-7,
            xtol: 1e-10,
            irls_epsilon: 1e-3,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.steps.validate()?;
        self.objective.weights.validate()?;
        let ok = self.lambda0 > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 1.0
            && self.lambda_max > self.lambda0
            && self.ftol > 0.0
            && self.xtol > 0.0
            && self.irls_epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("fit config", "damping, tolerances and epsilon must be positive; factors above 1"))
        }
    }
}

/// One solver iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Digest of the parameters after the iteration.
    pub params_digest: String,
    pub step_norm: f64,
    /// Damping used by the accepted step (or the last attempt).
    pub lambda: f64,
    pub accepted: bool,
    pub rejected_attempts: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
    pub stop_reason: String,
}

impl FitTrace {
    pub fn final_report(&self) -> &LossReport {
        &self.entries.last().expect("trace has the initial entry").report
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "iteration,accepted,rejected_attempts,lambda,step_norm,total,l_2d,l_mul,render,landmark,regularization,pixel,depth,epipolar,params_digest\n",
        );
        for e in &self.entries {
            let r = &e.report;
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
                e.iteration,
                e.accepted,
                e.rejected_attempts,
                e.lambda,
                e.step_norm,
                r.total,
                r.l_2d,
                r.l_mul,
                r.render,
                r.landmark,
                r.regularization,
                r.pixel,
                r.depth,
                r.epipolar,
                e.params_digest
            ));
        }
        s
    }
}

/// Sparse FD Jacobian: per coordinate, derivative blocks for the blocks it touches.
struct Jacobian {
    columns: Vec<Vec<(usize, Vec<f64>)>>,
}

fn block_index(id: BlockId, n_views: usize) -> usize {
    match id {
        BlockId::Regularization => 0,
        BlockId::View(v) => 1 + v,
        BlockId::Pair(p) => 1 + n_views + p,
    }
}

fn jacobian(obj: &Objective, params: &ParameterVector, frozen: &Frozen, base: &Evaluation, steps: &FdSteps) -> Result<Jacobian> {
    let groups = params.tangent_groups();
    let hs = steps.per_coordinate(params);
    let nv = frozen.views.len();
    let columns: Result<Vec<_>> = (0..groups.len())
        .into_par_iter()
        .map(|j| {
            let ids = frozen.blocks_touched_by(groups[j]);
            let h = hs[j];
            let plus = obj.evaluate_blocks(&unit_step(params, j, h), frozen, base, groups[j], &ids)?;
            let minus = obj.evaluate_blocks(&unit_step(params, j, -h), frozen, base, groups[j], &ids)?;
            let finite = |bs: &[Block]| bs.iter().all(|b| b.values.iter().all(|x| x.is_finite()));
            let (fp, fm) = (finite(&plus), finite(&minus));
            let col = ids
                .iter()
                .zip(plus.iter().zip(&minus))
                .map(|(id, (p, m))| {
                    let bi = block_index(*id, nv);
                    let b0 = &base.blocks[bi].values;
                    let d: Vec<f64> = match (fp, fm) {
                        (true, true) => p.values.iter().zip(&m.values).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
                        (true, false) => p.values.iter().zip(b0).map(|(a, b)| (a - b) / h).collect(),
                        (false, true) => b0.iter().zip(&m.values).map(|(a, b)| (a - b) / h).collect(),
                        (false, false) => vec![0.0; b0.len()],
                    };
                    (bi, d)
                })
                .collect();
            Ok(col)
        })
        .collect();
    Ok(Jacobian { columns: columns? })
}

/// IRLS weight of every residual of a block.
fn residual_weights(block: &Block, eps: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(block.values.len());
    let mut i = 0;
    for g in &block.groups {
        let r = &block.values[i..i + g.len as usize];
        let wi = match g.penalty {
            Penalty::Squared => 2.0 * g.weight,
            Penalty::Norm => g.weight / r.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps),
        };
        w.extend(std::iter::repeat_n(wi, r.len()));
        i += g.len as usize;
    }
    w
}

/// Gauss-Newton normal equations `H = JᵀWJ`, `g = JᵀWr`.
fn normal_equations(jac: &Jacobian, base: &Evaluation, eps: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = jac.columns.len();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for (bi, block) in base.blocks.iter().enumerate() {
        let rows = block.values.len();
        if rows == 0 {
            continue;
        }
        let cols: Vec<(usize, &Vec<f64>)> = jac
            .columns
            .iter()
            .enumerate()
            .filter_map(|(j, c)| c.iter().find(|(b, _)| *b == bi).map(|(_, d)| (j, d)))
            .collect();
        if cols.is_empty() {
            continue;
        }
        let w = residual_weights(block, eps);
        let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
        let m = DMatrix::from_fn(rows, cols.len(), |r, c| sw[r] * cols[c].1[r]);
        let wr = DVector::from_fn(rows, |r, _| sw[r] * sw[r] * block.values[r]);
        let hb = m.tr_mul(&m);
        for (a, &(ja, da)) in cols.iter().enumerate() {
            g[ja] += da.iter().zip(wr.iter()).map(|(x, y)| x * y).sum::<f64>();
            for (b, &(jb, _)) in cols.iter().enumerate() {
                h[(ja, jb)] += hb[(a, b)];
            }
        }
    }
    (h, g)
}

/// Solves `(H + λ·diag(H)) δ = −g`.
fn damped_step(h: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = h.nrows();
    let dmax = (0..n).map(|i| h[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
    let mut a = h.clone();
    for i in 0..n {
        a[(i, i)] += lambda * h[(i, i)].max(1e-9 * dmax);
    }
    let delta = a.cholesky()?.solve(&(-g));
    delta.iter().all(|x| x.is_finite()).then_some(delta)
}

fn entry(iteration: usize, params: &ParameterVector, step_norm: f64, lambda: f64, accepted: bool, rejected: usize, report: &LossReport) -> TraceEntry {
    TraceEntry {
        iteration,
        params_digest: params.digest(),
        step_norm,
        lambda,
        accepted,
        rejected_attempts: rejected,
        report: report.clone(),
    }
}

/// Fits `init` to the rig. Accepted steps strictly decrease the total loss.
pub fn fit(obj: &Objective, init: &ParameterVector, config: &FitConfig) -> Result<(ParameterVector, FitTrace)> {
    config.validate()?;
    let mut x = init.clone();
    let (mut frozen, mut eval) = obj.evaluate(&x)?;
    let mut trace = FitTrace {
        entries: vec![entry(0, &x, 0.0, config.lambda0, true, 0, &eval.report)],
        converged: false,
        stop_reason: String::new(),
    };
    let mut lambda = config.lambda0;
    for iteration in 1..=config.max_iters {
        let jac = jacobian(obj, &x, &frozen, &eval, &config.steps)?;
        let (h, g) = normal_equations(&jac, &eval, config.irls_epsilon);
        let f0 = eval.report.total;
        let mut rejected = 0;
        let mut outcome = None;
        while lambda <= config.lambda_max {
            let Some(delta) = damped_step(&h, &g, lambda) else {
                lambda *= config.lambda_up;
                rejected += 1;
                continue;
            };
            let step_norm = delta.norm();
            let candidate = x.retract(delta.as_slice());
            let trial = match obj.evaluate(&candidate) {
                Ok(t) => Some(t),
                Err(Error::EmptyRender { .. }) => None,
                Err(e) => return Err(e),
            };
            match trial {
                Some((fz, ev)) if ev.report.total < f0 => {
                    outcome = Some((candidate, fz, ev, step_norm));
                    break;
                }
                _ => {
                    lambda *= config.lambda_up;
                    rejected += 1;
                }
            }
        }
        let Some((candidate, fz, ev, step_norm)) = outcome else {
            trace.entries.push(entry(iteration, &x, 0.0, lambda, false, rejected, &eval.report));
            trace.converged = true;
            trace.stop_reason = "no decrease at maximum damping".into();
            return Ok((x, trace));
        };
        let decrease = f0 - ev.report.total;
        if decrease < config.ftol * f0 {
            // A negligible improvement is not worth moving the parameters.
            trace.entries.push(entry(iteration, &x, 0.0, lambda, false, rejected, &eval.report));
            trace.converged = true;
            trace.stop_reason = format!("relative decrease {:.3e} below ftol", decrease / f0);
            return Ok((x, trace));
        }
        x = candidate;
        frozen = fz;
        eval = ev;
        trace.entries.push(entry(iteration, &x, step_norm, lambda, true, rejected, &eval.report));
        lambda = (lambda / config.lambda_down).max(1e-12);
        if step_norm < config.xtol {
            trace.converged = true;
            trace.stop_reason = "step norm below xtol".into();
            return Ok((x, trace));
        }
    }
    trace.stop_reason = "maximum iterations reached".into();
    Ok((x, trace))
}

/// Convenience wrapper building the objective from `config.objective`.
pub fn fit_rig(
    model: &crate::model::MorphableModel,
    rig: &crate::objective::ViewRig,
    init: &ParameterVector,
    config: &FitConfig,
) -> Result<(ParameterVector, FitTrace)> {
    let obj = Objective::new(model, rig, config.objective)?;
    fit(&obj, init, config)
}
