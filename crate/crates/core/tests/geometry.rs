use std::collections::HashMap;

use mvface_core::model::{as_points, vertex_normals};
use mvface_core::raster::visible_vertices;
use mvface_core::raycast::CameraScene;
use mvface_core::synth::{generate_model, generate_scene, ModelSpec, RigSpec, Scene};
use mvface_core::{covisible_map, covisible_triangles, covisible_vertices, rasterize, CameraIntrinsics, ObjectiveConfig, PoseSE3, EMPTY_TRIANGLE};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unit icosphere, faces counter-clockwise seen from outside.
fn icosphere(subdivisions: usize) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        (-1.0, p, 0.0),
        (1.0, p, 0.0),
        (-1.0, -p, 0.0),
        (1.0, -p, 0.0),
        (0.0, -1.0, p),
        (0.0, 1.0, p),
        (0.0, -1.0, -p),
        (0.0, 1.0, -p),
        (p, 0.0, -1.0),
        (p, 0.0, 1.0),
        (-p, 0.0, -1.0),
        (-p, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vector3<f64>>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a as usize] + v[b as usize]) / 2.0).normalize());
                (v.len() - 1) as u32
            })
        };
        f = f
            .iter()
            .flat_map(|&[a, b, c]| {
                let (ab, bc, ca) = (midpoint(a, b, &mut v), midpoint(b, c, &mut v), midpoint(c, a, &mut v));
                [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
            })
            .collect();
    }
    (v, f)
}

#[test]
fn icosphere_normals_are_radial() {
    let (v, f) = icosphere(2);
    let n = vertex_normals(&v, &f);
    for (p, q) in v.iter().zip(&n.normals) {
        assert!((p.normalize() - q).norm() < 5e-2, "{p} vs {q}");
    }
}

fn random_mesh(seed: u64, count: usize) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    let mut f = Vec::new();
    for t in 0..count as u32 {
        let c = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
        for _ in 0..3 {
            v.push(c + Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)));
        }
        f.push([3 * t, 3 * t + 1, 3 * t + 2]);
    }
    (v, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rasterizer_owner_matches_ray_casting(seed in any::<u64>()) {
        let (v, f) = random_mesh(seed, 24);
        let k = CameraIntrinsics::centered(60.0, 48);
        let pose = PoseSE3::identity();
        let fb = rasterize(&v, &f, &pose, &k);
        let scene = CameraScene::new(&v, &f, &pose, &k);
        let hits = scene.cast_all();
        let agree = hits
            .iter()
            .zip(&fb.triangle)
            .filter(|(h, &t)| h.map_or(EMPTY_TRIANGLE, |h| h.triangle) == t)
            .count();
        prop_assert!(agree as f64 >= 0.999 * hits.len() as f64, "{agree}/{}", hits.len());
    }
}

fn small_scene(seed: u64, yaw_deg: f64) -> Scene {
    let model = generate_model(&ModelSpec { seed, vertices: 600, ..Default::default() }).unwrap();
    generate_scene(&model, &RigSpec { seed, yaw_deg, image_size: 64, ..Default::default() }, 1.0).unwrap()
}

/// Covisible target pixels whose owner is a face triangle.
fn covisible_face_pixels(v: &[Vector3<f64>], f: &[[u32; 3]], face: usize, pt: &PoseSE3, ps: &PoseSE3, k: &CameraIntrinsics) -> usize {
    let (ft, fs) = (rasterize(v, f, pt, k), rasterize(v, f, ps, k));
    let cv = covisible_vertices(&visible_vertices(&ft, f, v.len()), &visible_vertices(&fs, f, v.len())).unwrap();
    let map = covisible_map(&covisible_triangles(&cv, f, ObjectiveConfig::default().triangle_rule), &ft);
    (0..map.mask.data.len()).filter(|&i| map.mask.data[i] && (ft.triangle[i] as usize) < face).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn occluders_never_add_covisible_pixels(
        seed in 0u64..4,
        src in prop::sample::select(vec![0usize, 2]),
        anchor in 0usize..600,
        along in 0.2f64..0.9,
        radius in 0.05f64..0.5,
    ) {
        let s = small_scene(seed, 30.0);
        let verts = as_points(s.model.synthesize_shape(&s.params.alpha, &s.params.beta).unwrap().as_slice());
        let tris = &s.model.triangles;
        let k = s.rig.views[1].intrinsics;
        let (pt, ps) = (s.params.views[1].pose(), s.params.views[src].pose());
        let before = covisible_face_pixels(&verts, tris, tris.len(), &pt, &ps, &k);

        let c = ps.center();
        let target = verts[anchor % verts.len()];
        let dir = (target - c).normalize();
        let a = dir.cross(&Vector3::y()).normalize();
        let b = dir.cross(&a);
        let at = c + (target - c) * along;
        let mut v2 = verts.clone();
        let base = v2.len() as u32;
        for ang in [0.0f64, 2.0944, 4.1888] {
            v2.push(at + (a * ang.cos() + b * ang.sin()) * radius);
        }
        for winding in [[base, base + 1, base + 2], [base, base + 2, base + 1]] {
            let mut t2 = tris.clone();
            t2.push(winding);
            let after = covisible_face_pixels(&v2, &t2, tris.len(), &pt, &ps, &k);
            prop_assert!(after <= before, "{after} > {before}");
        }
    }
}
