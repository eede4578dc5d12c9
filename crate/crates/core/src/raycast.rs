//! Exact ray casting against triangle meshes.
//!
//! Independent of the rasterizer: visibility is decided by Möller–Trumbore
//! ray/triangle intersection and a nearest-hit search over front-facing
//! triangles. Used to validate rasterized ownership and covisibility.

use nalgebra::Vector3;

use crate::camera::{CameraIntrinsics, PoseSE3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub triangle: u32,
    /// Ray parameter; equals camera depth for rays with unit z direction.
    pub t: f64,
    pub point: Vector3<f64>,
}

/// Ray/triangle intersection; returns the ray parameter when the ray hits
/// the triangle's front (counter-clockwise) side.
pub fn intersect_front(origin: &Vector3<f64>, dir: &Vector3<f64>, tri: [&Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let normal = e1.cross(&e2);
    if normal.dot(dir) >= 0.0 {
        return None;
    }
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// A mesh transformed into one camera's frame, with triangles binned into
/// screen tiles so that per-pixel queries only test nearby triangles.
pub struct CameraScene<'a> {
    vertices: Vec<Vector3<f64>>,
    triangles: &'a [[u32; 3]],
    k: CameraIntrinsics,
    tile: usize,
    tiles_x: usize,
    tiles_y: usize,
    bins: Vec<Vec<u32>>,
}

impl<'a> CameraScene<'a> {
    pub fn new(world: &[Vector3<f64>], triangles: &'a [[u32; 3]], pose: &PoseSE3, k: &CameraIntrinsics) -> Self {
        let vertices: Vec<_> = world.iter().map(|p| pose.transform(p)).collect();
        let tile = 8;
        let tiles_x = k.width.div_ceil(tile).max(1);
        let tiles_y = k.height.div_ceil(tile).max(1);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (ti, t) in triangles.iter().enumerate() {
            let c = t.map(|i| vertices[i as usize]);
            if c.iter().any(|p| p.z <= 1e-6) {
                continue;
            }
            let us = c.map(|p| k.fx * p.x / p.z + k.cx);
            let vs = c.map(|p| k.fy * p.y / p.z + k.cy);
            let lo = |a: [f64; 3]| a[0].min(a[1]).min(a[2]) - 1.0;
            let hi = |a: [f64; 3]| a[0].max(a[1]).max(a[2]) + 1.0;
            let tx0 = (lo(us).max(0.0) as usize) / tile;
            let ty0 = (lo(vs).max(0.0) as usize) / tile;
            let (uh, vh) = (hi(us), hi(vs));
            if uh < 0.0 || vh < 0.0 {
                continue;
            }
            let tx1 = ((uh as usize) / tile).min(tiles_x - 1);
            let ty1 = ((vh as usize) / tile).min(tiles_y - 1);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    if tx < tiles_x && ty < tiles_y {
                        bins[ty * tiles_x + tx].push(ti as u32);
                    }
                }
            }
        }
        Self {
            vertices,
            triangles,
            k: *k,
            tile,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    /// Nearest front-facing hit along the ray through continuous pixel `(u, v)`.
    pub fn cast(&self, u: f64, v: f64) -> Option<Hit> {
        if u < -0.5 || v < -0.5 {
            return None;
        }
        let tx = (u.max(0.0) as usize) / self.tile;
        let ty = (v.max(0.0) as usize) / self.tile;
        if tx >= self.tiles_x || ty >= self.tiles_y {
            return None;
        }
        let dir = Vector3::new((u - self.k.cx) / self.k.fx, (v - self.k.cy) / self.k.fy, 1.0);
        let origin = Vector3::zeros();
        let mut best: Option<Hit> = None;
        for &ti in &self.bins[ty * self.tiles_x + tx] {
            let tri = self.triangles[ti as usize].map(|i| &self.vertices[i as usize]);
            if let Some(t) = intersect_front(&origin, &dir, tri) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        triangle: ti,
                        t,
                        point: dir * t,
                    });
                }
            }
        }
        best
    }

    /// Nearest hit for every pixel center, row-major.
    pub fn cast_all(&self) -> Vec<Option<Hit>> {
        let mut out = Vec::with_capacity(self.k.width * self.k.height);
        for y in 0..self.k.height {
            for x in 0..self.k.width {
                out.push(self.cast(x as f64, y as f64));
            }
        }
        out
    }

    /// Whether a camera-frame point on `triangle` is the nearest front-facing
    /// surface along its viewing ray.
    pub fn sees(&self, point_cam: &Vector3<f64>, triangle: u32) -> bool {
        if point_cam.z <= 1e-6 {
            return false;
        }
        let tri = self.triangles[triangle as usize].map(|i| &self.vertices[i as usize]);
        let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
        if n.dot(point_cam) >= 0.0 {
            return false;
        }
        let u = self.k.fx * point_cam.x / point_cam.z + self.k.cx;
        let v = self.k.fy * point_cam.y / point_cam.z + self.k.cy;
        if u < 0.0 || v < 0.0 || u > (self.k.width - 1) as f64 || v > (self.k.height - 1) as f64 {
            return false;
        }
        match self.cast(u, v) {
            Some(hit) => hit.t >= point_cam.z * (1.0 - 1e-6),
            None => true,
        }
    }
}

/// Per pixel, whether the surface seen by the target camera is also seen by
/// the source camera. `None` for pixels where the target sees nothing.
pub fn covisibility_oracle(
    world: &[Vector3<f64>],
    triangles: &[[u32; 3]],
    pose_t: &PoseSE3,
    k_t: &CameraIntrinsics,
    pose_s: &PoseSE3,
    k_s: &CameraIntrinsics,
) -> Vec<Option<bool>> {
    let target = CameraScene::new(world, triangles, pose_t, k_t);
    let source = CameraScene::new(world, triangles, pose_s, k_s);
    let to_source = crate::camera::relative_pose(pose_t, pose_s);
    target
        .cast_all()
        .into_iter()
        .map(|hit| hit.map(|h| source.sees(&to_source.transform(&h.point), h.triangle)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hits_front_side_only() {
        let a = Vector3::new(-1.0, -1.0, 5.0);
        let b = Vector3::new(-1.0, 1.0, 5.0);
        let c = Vector3::new(1.0, 0.0, 5.0);
        let o = Vector3::zeros();
        let d = Vector3::z();
        assert_eq!(intersect_front(&o, &d, [&a, &b, &c]), Some(5.0));
        assert_eq!(intersect_front(&o, &d, [&a, &c, &b]), None);
        assert_eq!(intersect_front(&o, &Vector3::new(1.0, 0.0, 0.1), [&a, &b, &c]), None);
    }

    #[test]
    fn occluded_point_is_not_seen() {
        let k = CameraIntrinsics::centered(50.0, 32);
        let world = vec![
            Vector3::new(-1.0, -1.0, 5.0),
            Vector3::new(-1.0, 1.0, 5.0),
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(-0.2, -0.2, 2.0),
            Vector3::new(-0.2, 0.2, 2.0),
            Vector3::new(0.2, 0.0, 2.0),
        ];
        let tris = [[0u32, 1, 2], [3, 4, 5]];
        let scene = CameraScene::new(&world, &tris, &PoseSE3::identity(), &k);
        assert!(!scene.sees(&Vector3::new(0.0, 0.0, 5.0), 0));
        assert!(scene.sees(&Vector3::new(0.0, 0.0, 2.0), 1));
        assert!(scene.sees(&Vector3::new(-0.9, 0.0, 5.0), 0));
    }
}
