//! Binary morphable-model container.
//!
//! Layout, all little-endian, in file order:
//!
//! | bytes            | field                                          |
//! |------------------|------------------------------------------------|
//! | 8                | magic `"FACEMDL\0"`                            |
//! | 4                | version, u32, currently 1                      |
//! | 4 x 7            | Q, T, U, V, l_S, l_A, n_landmarks (u32 each)   |
//! | 4 x 2            | eye-corner vertex indices (u32 each)           |
//! | 8 x 4            | unwrap constants alpha1, beta1, alpha2, beta2  |
//! | 12T              | triangles, T x 3 u32 vertex indices            |
//! | 16Q              | uv_coords, Q x (u, v) f64                      |
//! | 4 x n_landmarks  | landmark vertex indices, u32 each              |
//! | 24Q              | shape mean, 3Q f64                             |
//! | 24Q x l_S        | shape bases, row-major (row = output entry)    |
//! | 24UV             | albedo mean, 3UV f64                           |
//! | 24UV x l_A       | albedo bases, row-major                        |
//!
//! Every section length is implied by the dims block, so a shorter file is
//! reported as a truncation of the specific section being read.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::mesh::{Topology, UnwrapConstants};
use crate::model::LinearModel;
use crate::raster::RenderContext;

const MAGIC: &[u8; 8] = b"FACEMDL\0";
const VERSION: u32 = 1;
/// Upper bound on any recorded dimension; a corrupt dims block must not
/// drive allocations into the gigabytes.
const DIM_LIMIT: u32 = 50_000_000;

/// A complete morphable model: correspondence topology, linear shape and
/// albedo models, unwrap constants, and UV map dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub topo: Topology,
    pub shape_model: LinearModel,
    pub albedo_model: LinearModel,
    pub unwrap: UnwrapConstants,
    pub u_size: usize,
    pub v_size: usize,
}

impl ModelFile {
    pub fn vertex_count(&self) -> usize {
        self.topo.vertex_count()
    }

    /// Cross-field consistency: the topology must be internally valid and
    /// both models must be sized for it.
    pub fn validate(&self) -> Result<()> {
        self.topo.validate()?;
        self.unwrap.validate()?;
        let q = self.topo.vertex_count();
        if self.shape_model.output_len() != 3 * q {
            return Err(Error::Mismatch(format!(
                "shape model has {} output rows but the topology's {} vertices need {}",
                self.shape_model.output_len(),
                q,
                3 * q
            )));
        }
        let texel_values = 3 * self.u_size * self.v_size;
        if self.albedo_model.output_len() != texel_values {
            return Err(Error::Mismatch(format!(
                "albedo model has {} output rows but the {}x{} UV map needs {}",
                self.albedo_model.output_len(),
                self.u_size,
                self.v_size,
                texel_values
            )));
        }
        Ok(())
    }

    pub fn context(&self) -> RenderContext {
        RenderContext::new(&self.topo, self.u_size, self.v_size)
    }

    pub fn from_synthetic(m: crate::synthetic::SyntheticModel) -> ModelFile {
        ModelFile {
            topo: m.topo,
            shape_model: m.shape_model,
            albedo_model: m.albedo_model,
            unwrap: m.unwrap,
            u_size: m.u_size,
            v_size: m.v_size,
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v32 = u32::try_from(v)
        .map_err(|_| Error::Format(format!("{what} = {v} exceeds the u32 container field")))?;
    out.write_u32::<LittleEndian>(v32).expect("vec write is infallible");
    Ok(())
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    let q = model.topo.vertex_count();
    push_u32(&mut out, q, "Q")?;
    push_u32(&mut out, model.topo.triangles.len(), "triangle count")?;
    push_u32(&mut out, model.u_size, "U")?;
    push_u32(&mut out, model.v_size, "V")?;
    push_u32(&mut out, model.shape_model.param_dim, "l_S")?;
    push_u32(&mut out, model.albedo_model.param_dim, "l_A")?;
    push_u32(&mut out, model.topo.landmarks.len(), "landmark count")?;
    for &e in &model.topo.eye_corners {
        push_u32(&mut out, e, "eye corner index")?;
    }
    for v in [model.unwrap.alpha1, model.unwrap.beta1, model.unwrap.alpha2, model.unwrap.beta2] {
        out.write_f64::<LittleEndian>(v).expect("vec write");
    }
    for t in &model.topo.triangles {
        for &v in t {
            push_u32(&mut out, v, "triangle vertex index")?;
        }
    }
    for &(u, v) in &model.topo.uv_coords {
        out.write_f64::<LittleEndian>(u).expect("vec write");
        out.write_f64::<LittleEndian>(v).expect("vec write");
    }
    for &l in &model.topo.landmarks {
        push_u32(&mut out, l, "landmark vertex index")?;
    }
    for section in [
        &model.shape_model.mean,
        &model.shape_model.bases,
        &model.albedo_model.mean,
        &model.albedo_model.bases,
    ] {
        for &v in section.iter() {
            out.write_f64::<LittleEndian>(v).expect("vec write");
        }
    }
    atomic_write(path, &out)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|_| Error::Format(format!("truncated while reading {what}")))
}

fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)
        .map_err(|_| Error::Format(format!("truncated {what} section")))?;
    Ok(out)
}

fn read_dim(r: &mut impl Read, what: &str) -> Result<usize> {
    let v = read_u32(r, what)?;
    if v > DIM_LIMIT {
        return Err(Error::Format(format!("{what} = {v} is implausibly large")));
    }
    Ok(v as usize)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for the magic bytes".to_string()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, this build reads version {VERSION}"
        )));
    }
    let q = read_dim(&mut r, "Q")?;
    let t = read_dim(&mut r, "triangle count")?;
    let u_size = read_dim(&mut r, "U")?;
    let v_size = read_dim(&mut r, "V")?;
    let l_s = read_dim(&mut r, "l_S")?;
    let l_a = read_dim(&mut r, "l_A")?;
    let n_landmarks = read_dim(&mut r, "landmark count")?;
    let eye_corners = [
        read_dim(&mut r, "eye corner 0")?,
        read_dim(&mut r, "eye corner 1")?,
    ];
    let un = read_f64s(&mut r, 4, "unwrap constants")?;
    let unwrap = UnwrapConstants { alpha1: un[0], beta1: un[1], alpha2: un[2], beta2: un[3] };

    let mut triangles = Vec::with_capacity(t);
    for i in 0..t {
        let mut tri = [0usize; 3];
        for c in tri.iter_mut() {
            *c = read_u32(&mut r, &format!("triangle {i}"))? as usize;
        }
        triangles.push(tri);
    }
    let uv_flat = read_f64s(&mut r, 2 * q, "uv coordinates")?;
    let uv_coords: Vec<(f64, f64)> =
        uv_flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let mut landmarks = Vec::with_capacity(n_landmarks);
    for i in 0..n_landmarks {
        landmarks.push(read_u32(&mut r, &format!("landmark {i}"))? as usize);
    }
    let shape_rows = 3usize
        .checked_mul(q)
        .ok_or_else(|| Error::Format("3Q overflows".to_string()))?;
    let shape_mean = read_f64s(&mut r, shape_rows, "shape mean")?;
    let shape_basis_len = shape_rows
        .checked_mul(l_s)
        .ok_or_else(|| Error::Format("shape basis size overflows".to_string()))?;
    let shape_bases = read_f64s(&mut r, shape_basis_len, "shape bases")?;
    let albedo_rows = 3usize
        .checked_mul(u_size)
        .and_then(|x| x.checked_mul(v_size))
        .ok_or_else(|| Error::Format("3UV overflows".to_string()))?;
    let albedo_mean = read_f64s(&mut r, albedo_rows, "albedo mean")?;
    let albedo_basis_len = albedo_rows
        .checked_mul(l_a)
        .ok_or_else(|| Error::Format("albedo basis size overflows".to_string()))?;
    let albedo_bases = read_f64s(&mut r, albedo_basis_len, "albedo bases")?;
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes after the albedo bases",
            r.len()
        )));
    }

    let mut topo = Topology::new(triangles, uv_coords);
    topo.landmarks = landmarks;
    topo.eye_corners = eye_corners;
    let model = ModelFile {
        topo,
        shape_model: LinearModel::new(shape_mean, shape_bases, l_s)?,
        albedo_model: LinearModel::new(albedo_mean, albedo_bases, l_a)?,
        unwrap,
        u_size,
        v_size,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::face_model;

    fn bundled() -> ModelFile {
        ModelFile::from_synthetic(face_model())
    }

    #[test]
    fn save_then_load_is_exact() {
        let model = bundled();
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.bin");
        save_model(&path, &model).expect("save");
        let back = load_model(&path).expect("load");
        assert_eq!(back, model, "binary container must round-trip every field exactly");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let model = bundled();
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.bin");
        save_model(&path, &model).expect("save");
        let mut bytes = std::fs::read(&path).expect("read");
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).expect("corrupt");
        let err = load_model(&path).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("magic"), "should name the magic: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let model = bundled();
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.bin");
        save_model(&path, &model).expect("save");
        let mut bytes = std::fs::read(&path).expect("read");
        bytes[8] = 9;
        std::fs::write(&path, &bytes).expect("corrupt");
        let err = load_model(&path).unwrap_err();
        match err {
            Error::Format(msg) => {
                assert!(msg.contains("version"), "should name the version: {msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_names_the_section() {
        let model = bundled();
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.bin");
        save_model(&path, &model).expect("save");
        let bytes = std::fs::read(&path).expect("read");
        std::fs::write(&path, &bytes[..bytes.len() - 16]).expect("truncate");
        let err = load_model(&path).unwrap_err();
        match err {
            Error::Format(msg) =>

                assert!(msg.contains("albedo bases"), "the cut hits the last section: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dims_name_both_sizes() {
        let mut model = bundled();
        // Drop one vertex worth of shape-model rows; Q stays the same.
        model.shape_model.mean.truncate(model.shape_model.mean.len() - 3);
        model.shape_model.bases.truncate(model.shape_model.mean.len() * 8);
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.bin");
        let err = save_model(&path, &model).unwrap_err();
        match err {
            Error::Mismatch(msg) => {
                let q = 22 * 24;
                assert!(
                    msg.contains(&format!("{}", 3 * q - 3)) && msg.contains(&format!("{}", 3 * q)),
                    "both the actual and the required row count must be named: {msg}"
                );
            }
            other => panic!("expected mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let model = bundled();
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.bin");
        save_model(&path, &model).expect("save");
        let mut bytes = std::fs::read(&path).expect("read");
        bytes.extend_from_slice(&[0u8; 9]);
        std::fs::write(&path, &bytes).expect("extend");
        let err = load_model(&path).unwrap_err();
        match err {
            Error::Format(msg) => {
                assert!(msg.contains("trailing"), "should report trailing bytes: {msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
