//! A small self-contained face stand-in: a cylindrical grid head with a nose
//! bump, linear shape and albedo models with orthogonalized basis columns,
//! 68 landmark indices, and a ground-truth scene. Everything is closed-form
//! and deterministic, so tests and command-line examples run without any
//! external face data.

use crate::camera::ProjectionParams;
use crate::error::Result;
use crate::lighting::ShLighting;
use crate::mesh::{cylindrical_unwrap, Topology, UnwrapConstants, VertexShape};
use crate::model::{decode_albedo, decode_shape, LinearModel};
use crate::raster::RenderContext;
use crate::uv::UvMap;

/// Grid columns, spanning the cylinder angle.
pub const GRID_COLS: usize = 22;
/// Grid rows, spanning height.
pub const GRID_ROWS: usize = 24;
/// UV map extent along u (driven by height).
pub const UV_U: usize = 56;
/// UV map extent along v (driven by angle).
pub const UV_V: usize = 52;
/// Basis count of both bundled linear models.
pub const PARAM_DIM: usize = 8;

const THETA_MAX: f64 = 1.1;
const Y_MAX: f64 = 1.2;
/// Texels kept clear between the unwrapped mesh and the UV border so
/// bilinear lookups and dilation never leave the map.
const UV_MARGIN: f64 = 2.5;

/// The bundled synthetic face: topology, linear models, and unwrap scalars.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub topo: Topology,
    pub shape_model: LinearModel,
    pub albedo_model: LinearModel,
    pub unwrap: UnwrapConstants,
    pub u_size: usize,
    pub v_size: usize,
}

impl SyntheticModel {
    pub fn vertex_count(&self) -> usize {
        self.topo.vertex_count()
    }

    pub fn shape(&self, f_s: &[f64]) -> Result<VertexShape> {
        decode_shape(&self.shape_model, f_s)
    }

    pub fn albedo(&self, f_a: &[f64]) -> Result<UvMap> {
        decode_albedo(&self.albedo_model, f_a, self.u_size, self.v_size)
    }

    pub fn context(&self) -> RenderContext {
        RenderContext::new(&self.topo, self.u_size, self.v_size)
    }
}

fn grid_theta(col: usize) -> f64 {
    -THETA_MAX + 2.0 * THETA_MAX * col as f64 / (GRID_COLS - 1) as f64
}

fn grid_y(row: usize) -> f64 {
    -Y_MAX + 2.0 * Y_MAX * row as f64 / (GRID_ROWS - 1) as f64
}

fn gauss(x: f64, center: f64, width: f64) -> f64 {
    let t = (x - center) / width;
    (-t * t).exp()
}

fn mean_position(theta: f64, y: f64) -> [f64; 3] {
    // Unit cylinder with a nose bump pushing outward near the center.
    let r = 1.0 + 0.35 * gauss(theta, 0.0, 0.25) * gauss(y, 0.1, 0.3);
    [r * theta.sin(), y, r * theta.cos()]
}

/// Classic Gram-Schmidt on the columns, then rescaling to `scale` per
/// column. The input fields are linearly independent by construction.
fn orthogonalize_columns(columns: &mut Vec<Vec<f64>>, scale: f64) {
    for k in 0..columns.len() {
        for j in 0..k {
            let dot: f64 = columns[k].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            let nj: f64 = columns[j].iter().map(|x| x * x).sum();
            let coef = dot / nj;
            for i in 0..columns[k].len() {
                columns[k][i] -= coef * columns[j][i];
            }
        }
        let n: f64 = columns[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n > 1e-8, "basis field {k} collapsed during orthogonalization");
        for x in columns[k].iter_mut() {
            *x *= scale / n;
        }
    }
}

fn column_major_to_row_major(columns: &[Vec<f64>], rows: usize) -> Vec<f64> {
    let cols = columns.len();
    let mut bases = vec![0.0; rows * cols];
    for (k, col) in columns.iter().enumerate() {
        for r in 0..rows {
            bases[r * cols + k] = col[r];
        }
    }
    bases
}

fn shape_basis_columns() -> Vec<Vec<f64>> {
    let q = GRID_COLS * GRID_ROWS;
    let mut columns: Vec<Vec<f64>> = vec![vec![0.0; 3 * q]; PARAM_DIM];
    for row in 0..GRID_ROWS {
        for col in 0..GRID_COLS {
            let i = row * GRID_COLS + col;
            let theta = grid_theta(col);
            let y = grid_y(row);
            let radial = [theta.sin(), 0.0, theta.cos()];
            let nose = gauss(theta, 0.0, 0.3) * gauss(y, 0.1, 0.35);
            let chin = gauss(theta, 0.0, 0.5) * gauss(y, -1.0, 0.3);
            let fields: [[f64; 3]; PARAM_DIM] = [
                radial,
                [0.0, y, 0.0],
                [radial[0] * nose, 0.0, radial[2] * nose],
                [theta.sin(), 0.0, 0.0],
                {
                    let cheek = (2.0 * theta).cos() * gauss(y, -0.2, 0.6);
                    [radial[0] * cheek, 0.0, radial[2] * cheek]
                },
                [0.5 * radial[0] * chin, chin, 0.5 * radial[2] * chin],
                {
                    let brow = gauss(y, 0.6, 0.25) * theta.cos();
                    [radial[0] * brow, 0.0, radial[2] * brow]
                },
                {
                    let twist = theta.sin() * y;
                    [radial[0] * twist, 0.0, radial[2] * twist]
                },
            ];
            for (k, f) in fields.iter().enumerate() {
                for c in 0..3 {
                    columns[k][i * 3 + c] = f[c];
                }
            }
        }
    }
    columns
}

fn albedo_basis_columns() -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    let texels = UV_U * UV_V;
    let mut columns: Vec<Vec<f64>> = vec![vec![0.0; texels * 3]; PARAM_DIM];
    for u in 0..UV_U {
        for v in 0..UV_V {
            let t = u * UV_V + v;
            let us = u as f64 / (UV_U - 1) as f64;
            let vs = v as f64 / (UV_V - 1) as f64;
            let fields: [[f64; 3]; PARAM_DIM] = [
                [(PI * us).cos(); 3],
                [(PI * vs).cos(); 3],
                [(PI * us).sin(), -(PI * us).sin(), 0.0],
                [0.0, (PI * vs).sin(), -(PI * vs).sin()],
                [(PI * us).cos() * (PI * vs).cos(); 3],
                {
                    let s = (2.0 * PI * us).sin();
                    [s, 0.5 * s, 0.25 * s]
                },
                {
                    let s = (2.0 * PI * vs).sin();
                    [0.25 * s, 0.5 * s, s]
                },
                {
                    let s = (2.0 * PI * us).cos() * (PI * vs).sin();
                    [s, -0.5 * s, s]
                },
            ];
            for (k, f) in fields.iter().enumerate() {
                for c in 0..3 {
                    columns[k][t * 3 + c] = f[c];
                }
            }
        }
    }
    columns
}

fn mean_albedo() -> Vec<f64> {
    use std::f64::consts::PI;
    let mut mean = vec![0.0; UV_U * UV_V * 3];
    for u in 0..UV_U {
        for v in 0..UV_V {
            let t = u * UV_V + v;
            let us = u as f64 / (UV_U - 1) as f64;
            let vs = v as f64 / (UV_V - 1) as f64;
            // Skin-like base with gentle spatial variation, well inside [0, 1].
            let warm = 0.05 * (PI * us).sin() * (PI * vs).sin();
            mean[t * 3] = 0.62 + warm + 0.03 * (2.0 * PI * vs).cos();
            mean[t * 3 + 1] = 0.46 + 0.8 * warm;
            mean[t * 3 + 2] = 0.38 + 0.5 * warm;
        }
    }
    mean
}

/// The 68 landmark grid positions as (row, col) pairs: jaw arc, brows, nose,
/// eyes, and mouth, in that order. The two outer eye corners sit at slots 36
/// and 45.
fn landmark_grid_positions() -> Vec<(usize, usize)> {
    let mut pts: Vec<(usize, usize)> = Vec::with_capacity(68);
    // Jaw: 17 along the lower face.
    for c in 2..19 {
        pts.push((2, c));
    }
    // Brows: 5 + 5.
    for c in 3..8 {
        pts.push((17, c));
    }
    for c in 14..19 {
        pts.push((17, c));
    }
    // Nose: bridge of 4 plus base of 5.
    for r in [15, 14, 13, 12] {
        pts.push((r, 10));
    }
    for c in 8..13 {
        pts.push((11, c));
    }
    // Eyes: 6 each, outer corner first.
    pts.extend([(15, 4), (16, 5), (16, 6), (15, 7), (14, 6), (14, 5)]);
    pts.extend([(15, 17), (16, 16), (16, 15), (15, 14), (14, 15), (14, 16)]);
    // Mouth: outer ring of 12, inner ring of 8.
    pts.extend([
        (7, 6),
        (8, 7),
        (8, 8),
        (9, 9),
        (9, 10),
        (9, 11),
        (9, 12),
        (8, 13),
        (8, 14),
        (7, 15),
        (6, 12),
        (6, 9),
    ]);
    pts.extend([(7, 8), (7, 9), (7, 10), (7, 11), (7, 12), (6, 10), (6, 11), (6, 8)]);
    pts
}

/// Build the bundled synthetic face model. Deterministic: no randomness.
pub fn face_model() -> SyntheticModel {
    let q = GRID_COLS * GRID_ROWS;
    let mut mean_shape = vec![0.0; 3 * q];
    for row in 0..GRID_ROWS {
        for col in 0..GRID_COLS {
            let i = row * GRID_COLS + col;
            let p = mean_position(grid_theta(col), grid_y(row));
            mean_shape[i * 3..i * 3 + 3].copy_from_slice(&p);
        }
    }

    // Unwrap scalars placing the grid a safe margin inside the UV map.
    let unwrap = UnwrapConstants {
        alpha1: (UV_V as f64 - 1.0 - 2.0 * UV_MARGIN) / (2.0 * THETA_MAX),
        beta1: (UV_V as f64 - 1.0) / 2.0,
        alpha2: (UV_U as f64 - 1.0 - 2.0 * UV_MARGIN) / (2.0 * Y_MAX),
        beta2: (UV_U as f64 - 1.0) / 2.0,
    };
    let mut uv_coords = Vec::with_capacity(q);
    for i in 0..q {
        let p = [mean_shape[i * 3], mean_shape[i * 3 + 1], mean_shape[i * 3 + 2]];
        uv_coords.push(cylindrical_unwrap(p, &unwrap).expect("grid points are off-axis"));
    }

    // Two triangles per grid cell, wound so unrotated normals point outward
    // (+z at the nose).
    let mut triangles = Vec::with_capacity(2 * (GRID_ROWS - 1) * (GRID_COLS - 1));
    for row in 0..GRID_ROWS - 1 {
        for col in 0..GRID_COLS - 1 {
            let v00 = row * GRID_COLS + col;
            let v10 = v00 + 1;
            let v01 = v00 + GRID_COLS;
            let v11 = v01 + 1;
            triangles.push([v00, v11, v10]);
            triangles.push([v00, v01, v11]);
        }
    }

    let mut topo = Topology::new(triangles, uv_coords);
    let positions: Vec<[f64; 3]> = (0..q)
        .map(|i| [mean_shape[i * 3], mean_shape[i * 3 + 1], mean_shape[i * 3 + 2]])
        .collect();
    {
        // Verify the winding on the mean shape; flip once if inward.
        let shape = VertexShape::new(positions);
        let normals =
            crate::mesh::vertex_normals(&shape, &topo).expect("grid mesh is non-degenerate");
        let center = (GRID_ROWS / 2) * GRID_COLS + GRID_COLS / 2;
        if normals[center][2] < 0.0 {
            for tri in topo.triangles.iter_mut() {
                tri.swap(1, 2);
            }
        }
    }

    let grid_landmarks = landmark_grid_positions();
    topo.landmarks = grid_landmarks.iter().map(|(r, c)| r * GRID_COLS + c).collect();
    topo.eye_corners = [topo.landmarks[36], topo.landmarks[45]];

    let mut shape_cols = shape_basis_columns();
    orthogonalize_columns(&mut shape_cols, 2.0);
    let shape_model = LinearModel::new(
        mean_shape,
        column_major_to_row_major(&shape_cols, 3 * q),
        PARAM_DIM,
    )
    .expect("consistent shape model dims");

    let mut albedo_cols = albedo_basis_columns();
    orthogonalize_columns(&mut albedo_cols, 1.0);
    let albedo_model = LinearModel::new(
        mean_albedo(),
        column_major_to_row_major(&albedo_cols, UV_U * UV_V * 3),
        PARAM_DIM,
    )
    .expect("consistent albedo model dims");

    SyntheticModel {
        topo,
        shape_model,
        albedo_model,
        unwrap,
        u_size: UV_U,
        v_size: UV_V,
    }
}

/// A fixed ground-truth scene over the bundled model: pose, lighting, and
/// model coefficients that render a well-exposed face in a 128 x 128 frame.
#[derive(Debug, Clone)]
pub struct GtScene {
    pub m: ProjectionParams,
    pub light: ShLighting,
    pub f_s: Vec<f64>,
    pub f_a: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

pub fn gt_scene() -> GtScene {
    let mut light = ShLighting::zeros();
    // Ambient plus a lobe along -z (toward the camera once the head is
    // pitched upright) and mild vertical variation.
    let ambient = [1.55, 1.5, 1.45];
    let lobe_z = [-0.42, -0.45, -0.4];
    let lobe_y = [0.10, 0.08, 0.12];
    let band2 = [0.05, 0.04, 0.05];
    for c in 0..3 {
        light.coeffs[c][0] = ambient[c];
        light.coeffs[c][1] = lobe_y[c];
        light.coeffs[c][2] = lobe_z[c];
        light.coeffs[c][6] = band2[c];
    }
    GtScene {
        m: ProjectionParams {
            f: 45.0,
            pitch: std::f64::consts::PI + 0.06,
            yaw: -0.12,
            roll: 0.05,
            t2d: [64.0, 64.0],
        },
        light,
        f_s: vec![0.4, -0.3, 0.35, -0.25, 0.3, -0.2, 0.25, -0.35],
        f_a: vec![0.5, -0.4, 0.3, -0.3, 0.35, -0.25, 0.3, -0.2],
        width: 128,
        height: 128,
    }
}
