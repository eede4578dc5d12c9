//! Z-buffer triangle rasterization with perspective-correct interpolation.
//!
//! A pixel is covered when its center lies inside the projected triangle;
//! pixels exactly on an edge belong to the triangle for which that edge is a
//! top or left edge. Triangles are front-facing when they appear
//! counter-clockwise on screen (outward normal towards the camera); others
//! are culled, as are triangles with a vertex at or behind the camera plane.

use nalgebra::Vector3;

use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::image::{DepthMap, Image, RgbImage, EMPTY_DEPTH};
use crate::sh::{sh_shade, SH_COEFFS};

pub const EMPTY_TRIANGLE: u32 = u32::MAX;
const NEAR: f64 = 1e-6;

/// Per-pixel owner triangle, perspective-correct barycentric weights and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBuffer {
    pub width: usize,
    pub height: usize,
    pub triangle: Vec<u32>,
    pub weights: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl FragmentBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            triangle: vec![EMPTY_TRIANGLE; n],
            weights: vec![[0.0; 3]; n],
            depth: vec![f64::INFINITY; n],
        }
    }

    #[inline]
    pub fn is_covered(&self, i: usize) -> bool {
        self.triangle[i] != EMPTY_TRIANGLE
    }

    pub fn covered_count(&self) -> usize {
        self.triangle.iter().filter(|&&t| t != EMPTY_TRIANGLE).count()
    }

    /// Indices of covered pixels in row-major order.
    pub fn covered_pixels(&self) -> Vec<usize> {
        (0..self.triangle.len()).filter(|&i| self.is_covered(i)).collect()
    }

    pub fn mask(&self) -> Image<bool> {
        Image {
            width: self.width,
            height: self.height,
            data: self.triangle.iter().map(|&t| t != EMPTY_TRIANGLE).collect(),
        }
    }
}

/// A projected vertex: pixel position and camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenVertex {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

#[inline]
fn orient(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Signed screen area (times two) of a projected triangle; negative for
/// front-facing triangles in `u` right / `v` down pixel coordinates.
#[inline]
pub fn screen_area(s: &[ScreenVertex; 3]) -> f64 {
    orient(s[0].u, s[0].v, s[1].u, s[1].v, s[2].u, s[2].v)
}

/// Perspective-correct weights and depth of pixel position `(px, py)` with
/// respect to a projected triangle. The point may lie outside the triangle,
/// in which case some weights are negative.
#[inline]
pub fn perspective_weights(px: f64, py: f64, s: &[ScreenVertex; 3]) -> Option<([f64; 3], f64)> {
    let area = screen_area(s);
    if area == 0.0 || !area.is_finite() {
        return None;
    }
    let l0 = orient(s[1].u, s[1].v, s[2].u, s[2].v, px, py) / area;
    let l1 = orient(s[2].u, s[2].v, s[0].u, s[0].v, px, py) / area;
    let l2 = 1.0 - l0 - l1;
    let q = [l0 / s[0].z, l1 / s[1].z, l2 / s[2].z];
    let sum = q[0] + q[1] + q[2];
    if !(sum > 0.0) {
        return None;
    }
    let depth = 1.0 / sum;
    Some(([q[0] * depth, q[1] * depth, q[2] * depth], depth))
}

/// Transforms and projects every vertex; vertices at or behind the camera plane map to `None`.
pub fn project_vertices(vertices: &[Vector3<f64>], pose: &PoseSE3, k: &CameraIntrinsics) -> Vec<Option<ScreenVertex>> {
    vertices
        .iter()
        .map(|p| {
            let c = pose.transform(p);
            if c.z <= NEAR {
                None
            } else {
                Some(ScreenVertex {
                    u: k.fx * c.x / c.z + k.cx,
                    v: k.fy * c.y / c.z + k.cy,
                    z: c.z,
                })
            }
        })
        .collect()
}

pub fn rasterize(vertices: &[Vector3<f64>], triangles: &[[u32; 3]], pose: &PoseSE3, k: &CameraIntrinsics) -> FragmentBuffer {
    let screen = project_vertices(vertices, pose, k);
    rasterize_projected(&screen, triangles, k.width, k.height)
}

pub fn rasterize_projected(screen: &[Option<ScreenVertex>], triangles: &[[u32; 3]], width: usize, height: usize) -> FragmentBuffer {
    let mut fb = FragmentBuffer::empty(width, height);
    if width == 0 || height == 0 {
        return fb;
    }
    for (ti, t) in triangles.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (screen[t[0] as usize], screen[t[1] as usize], screen[t[2] as usize]) else {
            continue;
        };
        let s = [a, b, c];
        let area = screen_area(&s);
        if !(area < 0.0) {
            continue;
        }
        let umin = a.u.min(b.u).min(c.u).ceil().max(0.0);
        let umax = a.u.max(b.u).max(c.u).floor().min(width as f64 - 1.0);
        let vmin = a.v.min(b.v).min(c.v).ceil().max(0.0);
        let vmax = a.v.max(b.v).max(c.v).floor().min(height as f64 - 1.0);
        if umin > umax || vmin > vmax {
            continue;
        }
        // Edge i is opposite vertex i; with negative area the inside is where
        // every edge function is <= 0.
        let edges = [(b, c), (c, a), (a, b)];
        let top_left = edges.map(|(p, q)| (p.v == q.v && q.u < p.u) || q.v > p.v);
        let inv_area = 1.0 / area;
        for y in vmin as usize..=vmax as usize {
            let py = y as f64;
            for x in umin as usize..=umax as usize {
                let px = x as f64;
                let e = edges.map(|(p, q)| orient(p.u, p.v, q.u, q.v, px, py));
                let inside = (0..3).all(|i| e[i] < 0.0 || (e[i] == 0.0 && top_left[i]));
                if !inside {
                    continue;
                }
                let l = [e[0] * inv_area, e[1] * inv_area, e[2] * inv_area];
                let q = [l[0] / a.z, l[1] / b.z, l[2] / c.z];
                let depth = 1.0 / (q[0] + q[1] + q[2]);
                let i = y * width + x;
                if depth < fb.depth[i] {
                    fb.depth[i] = depth;
                    fb.triangle[i] = ti as u32;
                    fb.weights[i] = [q[0] * depth, q[1] * depth, q[2] * depth];
                }
            }
        }
    }
    for (d, &t) in fb.depth.iter_mut().zip(&fb.triangle) {
        if t == EMPTY_TRIANGLE {
            *d = EMPTY_DEPTH;
        }
    }
    fb
}

/// Interpolated depth on covered pixels, [`EMPTY_DEPTH`] elsewhere.
pub fn depth_map(fragments: &FragmentBuffer) -> DepthMap {
    Image {
        width: fragments.width,
        height: fragments.height,
        data: fragments
            .triangle
            .iter()
            .zip(&fragments.depth)
            .map(|(&t, &d)| if t == EMPTY_TRIANGLE { EMPTY_DEPTH } else { d })
            .collect(),
    }
}

/// Vertices that belong to at least one triangle owning a pixel.
pub fn visible_vertices(fragments: &FragmentBuffer, triangles: &[[u32; 3]], vertex_count: usize) -> Vec<bool> {
    let mut owns = vec![false; triangles.len()];
    for &t in &fragments.triangle {
        if t != EMPTY_TRIANGLE {
            owns[t as usize] = true;
        }
    }
    let mut vis = vec![false; vertex_count];
    for (t, _) in triangles.iter().zip(&owns).filter(|(_, &o)| o) {
        for &v in t {
            vis[v as usize] = true;
        }
    }
    vis
}

/// Shaded color of one fragment: interpolated, renormalized normal and
/// interpolated albedo (clamped per vertex to `[0, 1]`), lit by SH and clamped.
#[inline]
pub fn shade_point(
    tri: &[u32; 3],
    w: &[f64; 3],
    normals: &[Vector3<f64>],
    albedo: &[f64],
    theta: &[f64; SH_COEFFS],
) -> [f64; 3] {
    let mut n = Vector3::zeros();
    let mut a = [0.0; 3];
    for k in 0..3 {
        let v = tri[k] as usize;
        n += normals[v] * w[k];
        for c in 0..3 {
            a[c] += w[k] * albedo[3 * v + c].clamp(0.0, 1.0);
        }
    }
    let len = n.norm();
    let n = if len > 0.0 { n / len } else { Vector3::z() };
    sh_shade(&n, a, theta).map(|x| x.clamp(0.0, 1.0))
}

/// Renders colors for every covered pixel; uncovered pixels are black.
/// `albedo` is the flat `3V` RGB array.
pub fn shade_fragments(
    fragments: &FragmentBuffer,
    triangles: &[[u32; 3]],
    normals: &[Vector3<f64>],
    albedo: &[f64],
    theta: &[f64; SH_COEFFS],
) -> RgbImage {
    let mut img = Image::filled(fragments.width, fragments.height, [0.0; 3]);
    for i in 0..fragments.triangle.len() {
        let t = fragments.triangle[i];
        if t == EMPTY_TRIANGLE {
            continue;
        }
        img.data[i] = shade_point(&triangles[t as usize], &fragments.weights[i], normals, albedo, theta);
    }
    img
}

/// Everything one view's render produces.
#[derive(Debug, Clone)]
pub struct RenderOutputs {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub fragments: FragmentBuffer,
    pub visible_vertices: Vec<bool>,
}

impl RenderOutputs {
    pub fn mask(&self) -> Image<bool> {
        self.fragments.mask()
    }
}

/// Rasterizes and shades a mesh. Normals are in the mesh's own (world) frame.
pub fn render(
    vertices: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    albedo: &[f64],
    triangles: &[[u32; 3]],
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    theta: &[f64; SH_COEFFS],
) -> RenderOutputs {
    let fragments = rasterize(vertices, triangles, pose, k);
    let image = shade_fragments(&fragments, triangles, normals, albedo, theta);
    let depth = depth_map(&fragments);
    let visible_vertices = visible_vertices(&fragments, triangles, vertices.len());
    RenderOutputs {
        image,
        depth,
        fragments,
        visible_vertices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::unit_irradiance;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::centered(64.0, 64)
    }

    /// Counter-clockwise on screen means clockwise in camera x/y (y down),
    /// i.e. the outward normal points at the camera (-z).
    fn facing_triangle(z: f64, size: f64) -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(-size, -size, z),
            Vector3::new(-size, size, z),
            Vector3::new(size, 0.0, z),
        ]
    }

    #[test]
    fn fronto_parallel_triangle_covers_principal_point() {
        let k = k64();
        let v = facing_triangle(5.0, 1.0);
        let fb = rasterize(&v, &[[0, 1, 2]], &PoseSE3::identity(), &k);
        let i = 32 * 64 + 32;
        assert_eq!(fb.triangle[i], 0);
        assert!((fb.depth[i] - 5.0).abs() < 1e-6);
        let w = fb.weights[i];
        assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn back_facing_triangle_is_culled() {
        let v = facing_triangle(5.0, 1.0);
        let fb = rasterize(&v, &[[0, 2, 1]], &PoseSE3::identity(), &k64());
        assert_eq!(fb.covered_count(), 0);
    }

    #[test]
    fn nearer_triangle_wins() {
        let mut v = facing_triangle(5.0, 1.0);
        v.extend(facing_triangle(2.0, 0.3));
        for order in [[[0, 1, 2], [3, 4, 5]], [[3, 4, 5], [0, 1, 2]]] {
            let fb = rasterize(&v, &order, &PoseSE3::identity(), &k64());
            let near_id = order.iter().position(|t| t[0] == 3).unwrap() as u32;
            let i = 32 * 64 + 32;
            assert_eq!(fb.triangle[i], near_id);
            assert!((fb.depth[i] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_triangle_is_skipped() {
        let v = vec![Vector3::new(-1.0, -1.0, -1.0), Vector3::new(-1.0, 1.0, 2.0), Vector3::new(1.0, 0.0, 2.0)];
        let fb = rasterize(&v, &[[0, 1, 2]], &PoseSE3::identity(), &k64());
        assert_eq!(fb.covered_count(), 0);
        assert!(fb.depth.iter().all(|&d| d == EMPTY_DEPTH));
    }

    #[test]
    fn shared_edge_pixels_are_owned_once() {
        // Unit square split along a diagonal that passes through pixel centers.
        let k = CameraIntrinsics::centered(10.0, 21);
        let z = 1.0;
        let p = |x: f64, y: f64| Vector3::new(x / 10.0, y / 10.0, z);
        let v = vec![p(-5.0, -5.0), p(5.0, -5.0), p(5.0, 5.0), p(-5.0, 5.0)];
        // Clockwise in (x, y-down) math orientation appears counter-clockwise on screen.
        let tris = [[0, 3, 2], [0, 2, 1]];
        let fb = rasterize(&v, &tris, &PoseSE3::identity(), &k);
        // Square spans pixels 5..=15 on both axes minus the right/bottom edges.
        let mut owned = 0;
        for y in 0..21 {
            for x in 0..21 {
                let inside = (5..15).contains(&x) && (5..15).contains(&y);
                assert_eq!(fb.is_covered(y * 21 + x), inside, "pixel {x},{y}");
                owned += inside as usize;
            }
        }
        assert_eq!(owned, 100);
        let a = rasterize(&v, &tris[..1], &PoseSE3::identity(), &k);
        let b = rasterize(&v, &tris[1..], &PoseSE3::identity(), &k);
        assert_eq!(a.covered_count() + b.covered_count(), 100);
    }

    #[test]
    fn shading_with_unit_irradiance_returns_albedo() {
        let v = facing_triangle(5.0, 1.0);
        let tris = [[0u32, 1, 2]];
        let normals = vec![-Vector3::z(); 3];
        let albedo = vec![0.2, 0.4, 0.6, 0.2, 0.4, 0.6, 0.2, 0.4, 0.6];
        let out = render(&v, &normals, &albedo, &tris, &PoseSE3::identity(), &k64(), &unit_irradiance());
        for i in out.fragments.covered_pixels() {
            let c = out.image.data[i];
            assert!((c[0] - 0.2).abs() < 1e-12 && (c[1] - 0.4).abs() < 1e-12 && (c[2] - 0.6).abs() < 1e-12);
        }
        let dark = shade_fragments(&out.fragments, &tris, &normals, &albedo, &[0.0; SH_COEFFS]);
        assert!(dark.data.iter().all(|c| *c == [0.0; 3]));
        assert_eq!(out.visible_vertices, vec![true; 3]);
    }

    #[test]
    fn distinct_vertex_albedo_matches_closed_form() {
        let k = k64();
        let v = vec![Vector3::new(-1.0, -1.0, 4.0), Vector3::new(-1.0, 1.0, 6.0), Vector3::new(1.5, 0.0, 5.0)];
        let tris = [[0u32, 1, 2]];
        let normals = vec![-Vector3::z(); 3];
        let albedo = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let out = render(&v, &normals, &albedo, &tris, &PoseSE3::identity(), &k, &unit_irradiance());
        assert!(out.fragments.covered_count() > 50);
        for i in out.fragments.covered_pixels() {
            // Closed form: intersect the pixel ray with the triangle plane and
            // solve for the barycentric coordinates of the hit point.
            let (x, y) = ((i % 64) as f64, (i / 64) as f64);
            let d = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
            let n = (v[1] - v[0]).cross(&(v[2] - v[0]));
            let t = n.dot(&v[0]) / n.dot(&d);
            let hit = d * t;
            let area = n.norm();
            let b0 = (v[1] - hit).cross(&(v[2] - hit)).norm() / area;
            let b1 = (v[2] - hit).cross(&(v[0] - hit)).norm() / area;
            let b2 = 1.0 - b0 - b1;
            let c = out.image.data[i];
            assert!((c[0] - b0).abs() < 1e-9 && (c[1] - b1).abs() < 1e-9 && (c[2] - b2).abs() < 1e-9);
            assert!((out.depth.data[i] - t).abs() < 1e-9);
        }
    }

    #[test]
    fn tilted_plane_depth_matches_ray_plane_intersection() {
        let k = k64();
        // Plane z = 4 + 0.5 x, covering the view.
        let z = |x: f64| 4.0 + 0.5 * x;
        let v = vec![
            Vector3::new(-3.0, -3.0, z(-3.0)),
            Vector3::new(-3.0, 3.0, z(-3.0)),
            Vector3::new(3.0, 3.0, z(3.0)),
            Vector3::new(3.0, -3.0, z(3.0)),
        ];
        let tris = [[0u32, 1, 2], [0, 2, 3]];
        let d = depth_map(&rasterize(&v, &tris, &PoseSE3::identity(), &k));
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                let got = d.data[y * 64 + x];
                if got == EMPTY_DEPTH {
                    continue;
                }
                let ray_x = (x as f64 - k.cx) / k.fx;
                // z = 4 + 0.5 * ray_x * z  =>  z = 4 / (1 - 0.5 ray_x)
                let want = 4.0 / (1.0 - 0.5 * ray_x);
                assert!((got - want).abs() < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn empty_mesh_renders_nothing() {
        let d = depth_map(&rasterize(&[], &[], &PoseSE3::identity(), &k64()));
        assert!(d.data.iter().all(|&x| x == EMPTY_DEPTH));
    }

    #[test]
    fn rendering_is_deterministic() {
        let v = facing_triangle(3.0, 1.0);
        let a = rasterize(&v, &[[0, 1, 2]], &PoseSE3::identity(), &k64());
        let b = rasterize(&v, &[[0, 1, 2]], &PoseSE3::identity(), &k64());
        assert_eq!(a, b);
    }
}
