//! Linear morphable face model and its on-disk formats.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A landmark vertex with its loss confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub vertex: u32,
    pub confidence: f64,
}

/// Mean shape and albedo plus linear identity, expression and albedo bases.
///
/// Flat arrays store vertex `i` at `[3i, 3i+1, 3i+2]`; basis matrices have
/// `3V` rows and one column per coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub mean_shape: DVector<f64>,
    pub mean_albedo: DVector<f64>,
    pub basis_id: DMatrix<f64>,
    pub basis_exp: DMatrix<f64>,
    pub basis_albedo: DMatrix<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub landmarks: Vec<Landmark>,
}

impl MorphableModel {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn n_id(&self) -> usize {
        self.basis_id.ncols()
    }

    pub fn n_exp(&self) -> usize {
        self.basis_exp.ncols()
    }

    pub fn n_alb(&self) -> usize {
        self.basis_albedo.ncols()
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let n3 = self.mean_shape.len();
        if !n3.is_multiple_of(3) {
            return Err(Error::invalid("model", "mean shape length is not a multiple of 3"));
        }
        let v = n3 / 3;
        check_dim("mean albedo", n3, self.mean_albedo.len())?;
        check_dim("identity basis rows", n3, self.basis_id.nrows())?;
        check_dim("expression basis rows", n3, self.basis_exp.nrows())?;
        check_dim("albedo basis rows", n3, self.basis_albedo.nrows())?;
        for b in [&self.basis_id, &self.basis_exp, &self.basis_albedo] {
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("model", "basis contains non-finite entries"));
            }
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= v)) {
            return Err(Error::invalid("model", format!("triangle {t:?} indexes past {v} vertices")));
        }
        let mut seen = std::collections::HashSet::new();
        for lm in &self.landmarks {
            if lm.vertex as usize >= v {
                return Err(Error::invalid("model", format!("landmark vertex {} out of range", lm.vertex)));
            }
            if !seen.insert(lm.vertex) {
                return Err(Error::invalid("model", format!("duplicate landmark vertex {}", lm.vertex)));
            }
            if !(lm.confidence > 0.0) {
                return Err(Error::invalid("model", "landmark confidences must be positive"));
            }
        }
        Ok(())
    }

    /// `S = S_mean + A_id * alpha + B_exp * beta`.
    pub fn synthesize_shape(&self, alpha: &[f64], beta: &[f64]) -> Result<DVector<f64>> {
        check_dim("alpha", self.n_id(), alpha.len())?;
        check_dim("beta", self.n_exp(), beta.len())?;
        let mut s = self.mean_shape.clone();
        s.gemv(1.0, &self.basis_id, &DVector::from_column_slice(alpha), 1.0);
        s.gemv(1.0, &self.basis_exp, &DVector::from_column_slice(beta), 1.0);
        Ok(s)
    }

    /// `T = T_mean + T_id * gamma`, unclamped.
    pub fn synthesize_albedo(&self, gamma: &[f64]) -> Result<DVector<f64>> {
        check_dim("gamma", self.n_alb(), gamma.len())?;
        let mut t = self.mean_albedo.clone();
        t.gemv(1.0, &self.basis_albedo, &DVector::from_column_slice(gamma), 1.0);
        Ok(t)
    }

    pub fn landmark_vertices(&self) -> Vec<usize> {
        self.landmarks.iter().map(|l| l.vertex as usize).collect()
    }

    pub fn landmark_confidences(&self) -> Vec<f64> {
        self.landmarks.iter().map(|l| l.confidence).collect()
    }

    /// Copy of the model with every array rounded to `f32`, i.e. exactly what
    /// survives a round trip through the binary container.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |x: &f64| *x as f32 as f64;
        Self {
            mean_shape: self.mean_shape.map(|x| r(&x)),
            mean_albedo: self.mean_albedo.map(|x| r(&x)),
            basis_id: self.basis_id.map(|x| r(&x)),
            basis_exp: self.basis_exp.map(|x| r(&x)),
            basis_albedo: self.basis_albedo.map(|x| r(&x)),
            triangles: self.triangles.clone(),
            landmarks: self
                .landmarks
                .iter()
                .map(|l| Landmark {
                    vertex: l.vertex,
                    confidence: r(&l.confidence),
                })
                .collect(),
        }
    }

    /// Writes the binary container: magic `MVFM`, version, then the header
    /// `V, n_id, n_exp, n_alb, L, T` as little-endian `u32`, followed by
    /// mean shape, mean albedo, the three bases (column-major), triangle
    /// indices, landmark indices (`u32`) and landmark confidences. All reals
    /// are little-endian `f32`.
    pub fn write_container<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(CONTAINER_MAGIC)?;
        let header = [
            CONTAINER_VERSION,
            self.vertex_count() as u32,
            self.n_id() as u32,
            self.n_exp() as u32,
            self.n_alb() as u32,
            self.landmarks.len() as u32,
            self.triangles.len() as u32,
        ];
        for h in header {
            w.write_all(&h.to_le_bytes())?;
        }
        let mut put = |xs: &[f64]| -> std::io::Result<()> {
            for x in xs {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
            Ok(())
        };
        put(self.mean_shape.as_slice())?;
        put(self.mean_albedo.as_slice())?;
        put(self.basis_id.as_slice())?;
        put(self.basis_exp.as_slice())?;
        put(self.basis_albedo.as_slice())?;
        for t in &self.triangles {
            for i in t {
                w.write_all(&i.to_le_bytes())?;
            }
        }
        for l in &self.landmarks {
            w.write_all(&l.vertex.to_le_bytes())?;
        }
        for l in &self.landmarks {
            w.write_all(&(l.confidence as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_container<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::format("model container", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32s = |n: usize| -> Result<Vec<u32>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let header = u32s(7)?;
        if header[0] != CONTAINER_VERSION {
            return Err(bad("unsupported version"));
        }
        let [v, n_id, n_exp, n_alb, l, t] = [1, 2, 3, 4, 5, 6].map(|i| header[i] as usize);
        let floats = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        };
        let mean_shape = DVector::from_vec(floats(&mut r, 3 * v)?);
        let mean_albedo = DVector::from_vec(floats(&mut r, 3 * v)?);
        let basis_id = DMatrix::from_vec(3 * v, n_id, floats(&mut r, 3 * v * n_id)?);
        let basis_exp = DMatrix::from_vec(3 * v, n_exp, floats(&mut r, 3 * v * n_exp)?);
        let basis_albedo = DMatrix::from_vec(3 * v, n_alb, floats(&mut r, 3 * v * n_alb)?);
        let mut u32s = |n: usize| -> Result<Vec<u32>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let tri = u32s(3 * t)?;
        let lm = u32s(l)?;
        let conf = floats(&mut r, l)?;
        let model = Self {
            mean_shape,
            mean_albedo,
            basis_id,
            basis_exp,
            basis_albedo,
            triangles: tri.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            landmarks: lm
                .into_iter()
                .zip(conf)
                .map(|(vertex, confidence)| Landmark { vertex, confidence })
                .collect(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Short hex digest of the container bytes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut bytes = Vec::new();
        self.write_container(&mut bytes).expect("writing to memory cannot fail");
        Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_container(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_container(BufReader::new(f)).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path.display(), reason),
            other => other,
        })
    }

    /// Writes the mean mesh as Wavefront OBJ with per-vertex colors.
    pub fn write_mean_obj<W: Write>(&self, mut w: W) -> Result<()> {
        let s = self.mean_shape.as_slice();
        let a = self.mean_albedo.as_slice();
        for i in 0..self.vertex_count() {
            writeln!(
                w,
                "v {} {} {} {} {} {}",
                s[3 * i],
                s[3 * i + 1],
                s[3 * i + 2],
                a[3 * i],
                a[3 * i + 1],
                a[3 * i + 2]
            )?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    /// Reads an OBJ mesh as a model with empty bases and no landmarks.
    /// Missing vertex colors default to mid gray; polygons are fan-triangulated.
    pub fn read_obj<R: Read>(r: R) -> Result<Self> {
        let mut shape = Vec::new();
        let mut albedo = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let bad = |why: &str| Error::format(format!("obj line {}", lineno + 1), why);
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let xs: Vec<f64> = it
                        .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
                        .collect::<Result<_>>()?;
                    if xs.len() < 3 {
                        return Err(bad("vertex needs 3 coordinates"));
                    }
                    shape.extend_from_slice(&xs[..3]);
                    if xs.len() >= 6 {
                        albedo.extend_from_slice(&xs[3..6]);
                    } else {
                        albedo.extend_from_slice(&[0.5; 3]);
                    }
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            head.parse::<u32>()
                                .ok()
                                .filter(|&i| i > 0)
                                .map(|i| i - 1)
                                .ok_or_else(|| bad("bad face index"))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs 3 indices"));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let n3 = shape.len();
        let model = Self {
            mean_shape: DVector::from_vec(shape),
            mean_albedo: DVector::from_vec(albedo),
            basis_id: DMatrix::zeros(n3, 0),
            basis_exp: DMatrix::zeros(n3, 0),
            basis_albedo: DMatrix::zeros(n3, 0),
            triangles,
            landmarks: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }
}

const CONTAINER_MAGIC: &[u8; 4] = b"MVFM";
const CONTAINER_VERSION: u32 = 1;

/// Views a flat `3V` array as points.
pub fn as_points(flat: &[f64]) -> Vec<Vector3<f64>> {
    flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Per-vertex unit normals.
#[derive(Debug, Clone)]
pub struct VertexNormals {
    pub normals: Vec<Vector3<f64>>,
    /// Vertices with no non-degenerate adjacent triangle; their normal is `+z`.
    pub isolated: Vec<usize>,
}

/// Area-weighted vertex normals of a counter-clockwise mesh.
pub fn vertex_normals(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> VertexNormals {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| i as usize);
        // Cross product length is twice the area, so summing it area-weights.
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    let mut isolated = Vec::new();
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                n / len
            } else {
                isolated.push(i);
                Vector3::z()
            }
        })
        .collect();
    VertexNormals { normals, isolated }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model(rng: &mut ChaCha8Rng) -> MorphableModel {
        let v = 4;
        let mut r = |n: usize, m: usize| DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        MorphableModel {
            mean_shape: r(3 * v, 1).column(0).into_owned(),
            mean_albedo: r(3 * v, 1).column(0).map(|x| 0.5 + 0.4 * x),
            basis_id: r(3 * v, 3),
            basis_exp: r(3 * v, 2),
            basis_albedo: r(3 * v, 2),
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            landmarks: vec![
                Landmark { vertex: 1, confidence: 1.0 },
                Landmark { vertex: 3, confidence: 10.0 },
            ],
        }
    }

    #[test]
    fn zero_coefficients_give_mean() {
        let m = toy_model(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.synthesize_shape(&[0.0; 3], &[0.0; 2]).unwrap(), m.mean_shape);
        assert_eq!(m.synthesize_albedo(&[0.0; 2]).unwrap(), m.mean_albedo);
    }

    #[test]
    fn unit_coefficient_adds_column() {
        let m = toy_model(&mut ChaCha8Rng::seed_from_u64(1));
        let s = m.synthesize_shape(&[0.0, 1.0, 0.0], &[0.0; 2]).unwrap();
        assert!((s - (&m.mean_shape + m.basis_id.column(1))).abs().max() < 1e-15);
        let t = m.synthesize_albedo(&[0.0, 1.0]).unwrap();
        assert!((t - (&m.mean_albedo + m.basis_albedo.column(1))).abs().max() < 1e-15);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn synthesis_matches_brute_force_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = toy_model(&mut rng);
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let beta: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = m.synthesize_shape(&alpha, &beta).unwrap();
        let t = m.synthesize_albedo(&gamma).unwrap();
        for row in 0..12 {
            let mut want = m.mean_shape[row];
            for k in 0..3 {
                want += m.basis_id[(row, k)] * alpha[k];
            }
            for k in 0..2 {
                want += m.basis_exp[(row, k)] * beta[k];
            }
            assert!((s[row] - want).abs() < 1e-12);
            let mut want_t = m.mean_albedo[row];
            for k in 0..2 {
                want_t += m.basis_albedo[(row, k)] * gamma[k];
            }
            assert!((t[row] - want_t).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_is_linear_in_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = toy_model(&mut rng);
        let a1 = [0.3, -1.0, 2.0];
        let a2 = [1.5, 0.25, -0.5];
        let b = [0.7, -0.2];
        let sum: Vec<f64> = a1.iter().zip(a2.iter()).map(|(x, y)| x + y).collect();
        let lhs = m.synthesize_shape(&sum, &b).unwrap();
        let rhs = m.synthesize_shape(&a1, &b).unwrap() + &m.basis_id * DVector::from_column_slice(&a2);
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = toy_model(&mut ChaCha8Rng::seed_from_u64(4));
        assert!(matches!(m.synthesize_shape(&[0.0; 2], &[0.0; 2]), Err(Error::DimensionMismatch { .. })));
        assert!(m.synthesize_albedo(&[0.0; 5]).is_err());
    }

    #[test]
    fn validation_catches_bad_indices() {
        let mut m = toy_model(&mut ChaCha8Rng::seed_from_u64(5));
        assert!(m.validate().is_ok());
        m.triangles.push([0, 1, 4]);
        assert!(m.validate().is_err());
        let mut m = toy_model(&mut ChaCha8Rng::seed_from_u64(5));
        m.landmarks.push(Landmark { vertex: 1, confidence: 1.0 });
        assert!(m.validate().is_err());
    }

    #[test]
    fn container_round_trip_is_f32_exact() {
        let m = toy_model(&mut ChaCha8Rng::seed_from_u64(6));
        let mut buf = Vec::new();
        m.write_container(&mut buf).unwrap();
        let back = MorphableModel::read_container(buf.as_slice()).unwrap();
        assert_eq!(back, m.rounded_to_f32());
        assert!(MorphableModel::read_container(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn obj_round_trip_keeps_mean_mesh() {
        let m = toy_model(&mut ChaCha8Rng::seed_from_u64(7));
        let mut buf = Vec::new();
        m.write_mean_obj(&mut buf).unwrap();
        let back = MorphableModel::read_obj(buf.as_slice()).unwrap();
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.mean_shape, m.mean_shape);
        assert_eq!(back.n_id(), 0);
    }

    #[test]
    fn planar_square_normals_follow_winding() {
        let v = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let ccw = vertex_normals(&v, &[[0, 1, 2], [0, 2, 3]]);
        assert!(ccw.isolated.is_empty());
        for n in &ccw.normals {
            assert!((n - Vector3::z()).norm() < 1e-12);
        }
        let cw = vertex_normals(&v, &[[0, 2, 1], [0, 3, 2]]);
        for n in &cw.normals {
            assert!((n + Vector3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn isolated_vertex_is_flagged() {
        let v = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(5.0, 5.0, 5.0)];
        let n = vertex_normals(&v, &[[0, 1, 2]]);
        assert_eq!(n.isolated, vec![3]);
        assert_eq!(n.normals[3], Vector3::z());
    }
}
