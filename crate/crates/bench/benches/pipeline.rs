use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mvface_core::model::as_points;
use mvface_core::objective::Term;
use mvface_core::synth::{perturb, Perturbation};
use mvface_core::synthesis::SynthesisOptions;
use mvface_core::{fit, generate_model, generate_scene, rasterize, relative_pose, synthesize_target, FitConfig, ModelSpec, Objective, RigSpec, Scene};

/// The default scene: 128×128, three views, about 1500 vertices.
fn scene() -> Scene {
    let model = generate_model(&ModelSpec::default()).unwrap();
    generate_scene(&model, &RigSpec::default(), 1.0).unwrap()
}

fn rendering(c: &mut Criterion) {
    let s = scene();
    let verts = as_points(s.model.synthesize_shape(&s.params.alpha, &s.params.beta).unwrap().as_slice());
    let pose = s.params.views[0].pose();
    let k = s.rig.views[0].intrinsics;
    c.bench_function("rasterize", |b| b.iter(|| rasterize(black_box(&verts), &s.model.triangles, &pose, &k)));

    let t = s.rig.default_target();
    let rel = relative_pose(&s.params.views[t].pose(), &s.params.views[0].pose());
    let mask = s.renders[t].mask();
    c.bench_function("synthesize_target", |b| {
        b.iter(|| {
            synthesize_target(
                &s.renders[0].image,
                &s.renders[0].depth,
                &s.renders[t].depth,
                black_box(&mask),
                &rel,
                &k,
                &k,
                SynthesisOptions { occlusion_tolerance: Some(0.05) },
            )
        })
    });
}

fn objective(c: &mut Criterion) {
    let s = scene();
    let obj = Objective::new(&s.model, &s.rig, Default::default()).unwrap();
    let p = perturb(&s.params, &Perturbation { rotation_deg: 5.0, translation_frac: 0.02, coeff_sigma: 0.2, seed: 1 });
    c.bench_function("total_loss", |b| b.iter(|| obj.total_loss(black_box(&p)).unwrap()));
    c.bench_function("landmark_term", |b| b.iter(|| obj.term_value(Term::Landmark, black_box(&p)).unwrap()));
}

fn solver(c: &mut Criterion) {
    let s = scene();
    let obj = Objective::new(&s.model, &s.rig, Default::default()).unwrap();
    let p = perturb(&s.params, &Perturbation { rotation_deg: 5.0, translation_frac: 0.02, coeff_sigma: 0.2, seed: 1 });
    let config = FitConfig { max_iters: 1, ..Default::default() };
    let mut g = c.benchmark_group("solver");
    g.sample_size(10);
    g.bench_function("fit_iteration", |b| b.iter(|| fit(&obj, black_box(&p), &config).unwrap()));
    g.finish();
}

criterion_group!(benches, rendering, objective, solver);
criterion_main!(benches);
