//! Weak-perspective camera: rotation from (pitch, yaw, roll), projection to
//! the image plane, and analytic Jacobians with respect to the 6 parameters
//! and the vertices.
//!
//! Conventions (fixed so tests can be bit-exact): image origin is top-left
//! with x rightward and y downward; projected coordinates are
//! `f * (R s)_xy + t2d` in pixel units; depth is the camera-space z of the
//! rotated vertex with smaller z closer to the image plane; rotation order is
//! `Rz(roll) * Ry(yaw) * Rx(pitch)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::mesh::VertexShape;

/// The 6-dim projection parameter vector m: scale, three angles, translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionParams {
    pub f: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub t2d: [f64; 2],
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(Error::Domain(format!("scale f must be positive, got {}", self.f)));
        }
        for (name, a) in [
            ("pitch", self.pitch),
            ("yaw", self.yaw),
            ("roll", self.roll),
            ("t2d.x", self.t2d[0]),
            ("t2d.y", self.t2d[1]),
        ] {
            if !a.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite, got {a}")));
            }
        }
        Ok(())
    }

    /// Pack as the 6-vector (f, pitch, yaw, roll, tx, ty), the order used by
    /// the parameter file format.
    pub fn to_vec(&self) -> [f64; 6] {
        [self.f, self.pitch, self.yaw, self.roll, self.t2d[0], self.t2d[1]]
    }

    pub fn from_vec(v: [f64; 6]) -> Self {
        ProjectionParams {
            f: v[0],
            pitch: v[1],
            yaw: v[2],
            roll: v[3],
            t2d: [v[4], v[5]],
        }
    }
}

/// Projected vertex coordinates plus camera-space depth for Z-buffering.
#[derive(Debug, Clone)]
pub struct ProjectedVertices {
    pub coords: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
}

fn rx(pitch: f64) -> Matrix3<f64> {
    let (s, c) = pitch.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn ry(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rz(roll: f64) -> Matrix3<f64> {
    let (s, c) = roll.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation matrix `Rz(roll) * Ry(yaw) * Rx(pitch)`; orthonormal with
/// determinant +1 by construction.
pub fn rotation_from_angles(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    rz(roll) * ry(yaw) * rx(pitch)
}

/// Derivatives of the rotation matrix with respect to (pitch, yaw, roll).
pub fn rotation_angle_derivatives(pitch: f64, yaw: f64, roll: f64) -> [Matrix3<f64>; 3] {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sp, -cp, 0.0, cp, -sp);
    let dry = Matrix3::new(-sy, 0.0, cy, 0.0, 0.0, 0.0, -cy, 0.0, -sy);
    let drz = Matrix3::new(-sr, -cr, 0.0, cr, -sr, 0.0, 0.0, 0.0, 0.0);
    [
        rz(roll) * ry(yaw) * drx,
        rz(roll) * dry * rx(pitch),
        drz * ry(yaw) * rx(pitch),
    ]
}

/// Rotate each vertex by the rotation encoded in `m` (scale and translation
/// do not apply; this is the camera-space shape whose z is the depth).
pub fn rotate(s: &VertexShape, m: &ProjectionParams) -> VertexShape {
    let r = rotation_from_angles(m.pitch, m.yaw, m.roll);
    let positions = s
        .positions
        .iter()
        .map(|p| {
            let v = r * Vector3::new(p[0], p[1], p[2]);
            [v.x, v.y, v.z]
        })
        .collect();
    VertexShape { positions }
}

/// Backward pass of [`rotate`]: upstream gradients on the rotated positions
/// become gradients on the model-space positions and the three angles.
pub fn rotate_backward(
    s: &VertexShape,
    m: &ProjectionParams,
    upstream: &[[f64; 3]],
) -> (Vec<[f64; 3]>, [f64; 3]) {
    let r = rotation_from_angles(m.pitch, m.yaw, m.roll);
    let dr = rotation_angle_derivatives(m.pitch, m.yaw, m.roll);
    let rt = r.transpose();
    let mut d_s = vec![[0.0; 3]; s.len()];
    let mut d_angles = [0.0; 3];
    for (i, p) in s.positions.iter().enumerate() {
        let g = Vector3::new(upstream[i][0], upstream[i][1], upstream[i][2]);
        let ds = rt * g;
        d_s[i] = [ds.x, ds.y, ds.z];
        let pv = Vector3::new(p[0], p[1], p[2]);
        for k in 0..3 {
            d_angles[k] += g.dot(&(dr[k] * pv));
        }
    }
    (d_s, d_angles)
}

/// Weak-perspective projection: `coords = f * (R s)_xy + t2d`, `depth = (R s)_z`.
pub fn project(s: &VertexShape, m: &ProjectionParams) -> ProjectedVertices {
    let r = rotation_from_angles(m.pitch, m.yaw, m.roll);
    let mut coords = Vec::with_capacity(s.len());
    let mut depth = Vec::with_capacity(s.len());
    for p in &s.positions {
        let v = r * Vector3::new(p[0], p[1], p[2]);
        coords.push([m.f * v.x + m.t2d[0], m.f * v.y + m.t2d[1]]);
        depth.push(v.z);
    }
    ProjectedVertices { coords, depth }
}

/// Backward pass of [`project`] for upstream gradients on the 2D coordinates.
///
/// Returns gradients with respect to the vertex positions and the packed
/// parameter vector (f, pitch, yaw, roll, tx, ty). Depth carries no gradient:
/// it only resolves visibility, which the rendering backward holds fixed.
pub fn project_backward(
    s: &VertexShape,
    m: &ProjectionParams,
    upstream: &[[f64; 2]],
) -> (Vec<[f64; 3]>, [f64; 6]) {
    let r = rotation_from_angles(m.pitch, m.yaw, m.roll);
    let dr = rotation_angle_derivatives(m.pitch, m.yaw, m.roll);
    let mut d_s = vec![[0.0; 3]; s.len()];
    let mut d_m = [0.0; 6];
    for (i, p) in s.positions.iter().enumerate() {
        let pv = Vector3::new(p[0], p[1], p[2]);
        let v = r * pv;
        let [gx, gy] = upstream[i];
        // Scale.
        d_m[0] += gx * v.x + gy * v.y;
        // Angles: d coords / d angle = f * (dR/dangle * s)_xy.
        for k in 0..3 {
            let dv = dr[k] * pv;
            d_m[1 + k] += m.f * (gx * dv.x + gy * dv.y);
        }
        // Translation.
        d_m[4] += gx;
        d_m[5] += gy;
        // Vertices: d coords / d s = f * first two rows of R.
        let g3 = Vector3::new(m.f * gx, m.f * gy, 0.0);
        let ds = r.transpose() * g3;
        d_s[i] = [ds.x, ds.y, ds.z];
    }
    (d_s, d_m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> ProjectionParams {
        ProjectionParams {
            f: rng.random_range(0.5..3.0),
            pitch: rng.random_range(-1.0..1.0),
            yaw: rng.random_range(-1.0..1.0),
            roll: rng.random_range(-1.0..1.0),
            t2d: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
        }
    }

    fn random_shape(rng: &mut ChaCha8Rng, q: usize) -> VertexShape {
        VertexShape::new(
            (0..q)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn test_zero_angles_give_identity() {
        let r = rotation_from_angles(0.0, 0.0, 0.0);
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn test_rotation_orthonormal_and_special() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (p, y, ro) = (
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let r = rotation_from_angles(p, y, ro);
            let rtr = r.transpose() * r;
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_relative_eq!(rtr[(i, j)], want, epsilon = 1e-12);
                }
            }
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn test_rotation_matches_symbolic_expansion() {
        // Independent expansion of Rz(roll)*Ry(yaw)*Rx(pitch) from the three
        // elementary matrices written out entry by entry.
        let (pitch, yaw, roll) = (0.1_f64, -0.3_f64, 0.2_f64);
        let (sp, cp) = (pitch.sin(), pitch.cos());
        let (sy, cy) = (yaw.sin(), yaw.cos());
        let (sr, cr) = (roll.sin(), roll.cos());
        let want = [
            [cr * cy, cr * sy * sp - sr * cp, cr * sy * cp + sr * sp],
            [sr * cy, sr * sy * sp + cr * cp, sr * sy * cp - cr * sp],
            [-sy, cy * sp, cy * cp],
        ];
        let r = rotation_from_angles(pitch, yaw, roll);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(r[(i, j)], want[i][j], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn test_project_identity_selects_xy() {
        let s = VertexShape::new(vec![[0.3, -0.7, 2.0]]);
        let m = ProjectionParams { f: 1.0, pitch: 0.0, yaw: 0.0, roll: 0.0, t2d: [0.0, 0.0] };
        let p = project(&s, &m);
        assert_eq!(p.coords[0], [0.3, -0.7]);
        assert_eq!(p.depth[0], 2.0);
    }

    #[test]
    fn test_project_affine_arithmetic() {
        let s = VertexShape::new(vec![[1.0, 1.0, 0.0]]);
        let m = ProjectionParams { f: 2.0, pitch: 0.0, yaw: 0.0, roll: 0.0, t2d: [10.0, -5.0] };
        let p = project(&s, &m);
        assert_eq!(p.coords[0], [12.0, -3.0]);
    }

    #[test]
    fn test_project_matches_assembled_2x4_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let m = random_params(&mut rng);
            let s = random_shape(&mut rng, 1);
            // Assemble M(m) = [f * Pr * R | t2d] independently and apply to [s; 1].
            let r = rotation_from_angles(m.pitch, m.yaw, m.roll);
            let mut mat = [[0.0; 4]; 2];
            for row in 0..2 {
                for col in 0..3 {
                    mat[row][col] = m.f * r[(row, col)];
                }
                mat[row][3] = m.t2d[row];
            }
            let hom = [s.positions[0][0], s.positions[0][1], s.positions[0][2], 1.0];
            let want = [
                mat[0][0] * hom[0] + mat[0][1] * hom[1] + mat[0][2] * hom[2] + mat[0][3] * hom[3],
                mat[1][0] * hom[0] + mat[1][1] * hom[1] + mat[1][2] * hom[2] + mat[1][3] * hom[3],
            ];
            let got = project(&s, &m).coords[0];
            assert_relative_eq!(got[0], want[0], epsilon = 1e-12);
            assert_relative_eq!(got[1], want[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn test_project_linear_in_shape_on_translation_free_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_params(&mut rng);
        let s1 = random_shape(&mut rng, 6);
        let s2 = random_shape(&mut rng, 6);
        let (a, b) = (0.7, -1.3);
        let combo = VertexShape::new(
            s1.positions
                .iter()
                .zip(&s2.positions)
                .map(|(p, q)| {
                    [
                        a * p[0] + b * q[0],
                        a * p[1] + b * q[1],
                        a * p[2] + b * q[2],
                    ]
                })
                .collect(),
        );
        let pc = project(&combo, &m);
        let p1 = project(&s1, &m);
        let p2 = project(&s2, &m);
        for i in 0..6 {
            for k in 0..2 {
                let want = a * (p1.coords[i][k] - m.t2d[k]) + b * (p2.coords[i][k] - m.t2d[k])
                    + m.t2d[k];
                assert_relative_eq!(pc.coords[i][k], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn test_depth_ignores_scale_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_shape(&mut rng, 5);
        let mut m = random_params(&mut rng);
        let d1 = project(&s, &m).depth;
        m.f = 9.0;
        m.t2d = [123.0, -55.0];
        let d2 = project(&s, &m).depth;
        assert_eq!(d1, d2);
    }

    #[test]
    fn test_backward_zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_shape(&mut rng, 4);
        let m = random_params(&mut rng);
        let (ds, dm) = project_backward(&s, &m, &vec![[0.0, 0.0]; 4]);
        assert!(ds.iter().all(|g| *g == [0.0; 3]));
        assert_eq!(dm, [0.0; 6]);
    }

    #[test]
    fn test_backward_scale_gradient_is_vertex_x_at_identity() {
        let s = VertexShape::new(vec![[0.42, -1.1, 3.0]]);
        let m = ProjectionParams { f: 1.5, pitch: 0.0, yaw: 0.0, roll: 0.0, t2d: [2.0, 3.0] };
        let (_, dm) = project_backward(&s, &m, &[[1.0, 0.0]]);
        assert_relative_eq!(dm[0], 0.42, epsilon = 1e-15);
    }

    #[test]
    fn test_project_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..100 {
            let m = random_params(&mut rng);
            let s = random_shape(&mut rng, 3);
            let upstream: Vec<[f64; 2]> = (0..3)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let scalar = |mm: &ProjectionParams, ss: &VertexShape| -> f64 {
                let p = project(ss, mm);
                p.coords
                    .iter()
                    .zip(&upstream)
                    .map(|(c, g)| c[0] * g[0] + c[1] * g[1])
                    .sum()
            };
            let (ds, dm) = project_backward(&s, &m, &upstream);
            let mv = m.to_vec();
            for k in 0..6 {
                let mut plus = mv;
                plus[k] += h;
                let mut minus = mv;
                minus[k] -= h;
                let fd = (scalar(&ProjectionParams::from_vec(plus), &s)
                    - scalar(&ProjectionParams::from_vec(minus), &s))
                    / (2.0 * h);
                assert_relative_eq!(dm[k], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
            for vi in 0..3 {
                for k in 0..3 {
                    let mut plus = s.clone();
                    plus.positions[vi][k] += h;
                    let mut minus = s.clone();
                    minus.positions[vi][k] -= h;
                    let fd = (scalar(&m, &plus) - scalar(&m, &minus)) / (2.0 * h);
                    assert_relative_eq!(ds[vi][k], fd, max_relative = 1e-5, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn test_rotate_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        let m = random_params(&mut rng);
        let s = random_shape(&mut rng, 4);
        let upstream: Vec<[f64; 3]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let scalar = |mm: &ProjectionParams, ss: &VertexShape| -> f64 {
            rotate(ss, mm)
                .positions
                .iter()
                .zip(&upstream)
                .map(|(p, g)| p[0] * g[0] + p[1] * g[1] + p[2] * g[2])
                .sum()
        };
        let (ds, dang) = rotate_backward(&s, &m, &upstream);
        for (k, name) in [(0usize, "pitch"), (1, "yaw"), (2, "roll")] {
            let mut plus = m;
            let mut minus = m;
            match k {
                0 => {
                    plus.pitch += h;
                    minus.pitch -= h;
                }
                1 => {
                    plus.yaw += h;
                    minus.yaw -= h;
                }
                _ => {
                    plus.roll += h;
                    minus.roll -= h;
                }
            }
            let fd = (scalar(&plus, &s) - scalar(&minus, &s)) / (2.0 * h);
            assert_relative_eq!(dang[k], fd, max_relative = 1e-5, epsilon = 1e-8);
            let _ = name;
        }
        for vi in 0..4 {
            for k in 0..3 {
                let mut plus = s.clone();
                plus.positions[vi][k] += h;
                let mut minus = s.clone();
                minus.positions[vi][k] -= h;
                let fd = (scalar(&m, &plus) - scalar(&m, &minus)) / (2.0 * h);
                assert_relative_eq!(ds[vi][k], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }
}
