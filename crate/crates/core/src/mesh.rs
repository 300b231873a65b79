//! Triangle topology, the cylindrical surface-to-UV unwrap, vertex normals,
//! and the UV-space barycentric machinery shared by map embedding and
//! rendering.

use crate::error::{Error, Result};
use crate::uv::{sample_uv, sample_uv_backward, UvMap};

/// Fixed registered triangulation plus its UV layout and landmark metadata.
///
/// `uv_coords` are per-vertex `(u, v)` in texel units; the reference layout
/// (e.g. an open-mouth reference shape) is encoded entirely here and loaded
/// from the model file. `landmarks` are vertex indices in ibug-68 order and
/// may be empty for ad-hoc meshes; `eye_corners` are the outer eye corner
/// vertices used to normalize NME.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub triangles: Vec<[usize; 3]>,
    pub uv_coords: Vec<(f64, f64)>,
    pub landmarks: Vec<usize>,
    pub eye_corners: [usize; 2],
}

impl Topology {
    pub fn new(triangles: Vec<[usize; 3]>, uv_coords: Vec<(f64, f64)>) -> Self {
        Topology {
            triangles,
            uv_coords,
            landmarks: Vec::new(),
            eye_corners: [0, 0],
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.uv_coords.len()
    }

    /// Validate index bounds and landmark references.
    pub fn validate(&self) -> Result<()> {
        let q = self.uv_coords.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= q) {
                return Err(Error::Mismatch(format!(
                    "triangle {i} references vertex out of range (Q={q})"
                )));
            }
        }
        for (i, &l) in self.landmarks.iter().enumerate() {
            if l >= q {
                return Err(Error::Mismatch(format!(
                    "landmark {i} references vertex {l} out of range (Q={q})"
                )));
            }
        }
        if self.eye_corners.iter().any(|&e| e >= q) {
            return Err(Error::Mismatch(format!(
                "eye corner vertex out of range (Q={q})"
            )));
        }
        Ok(())
    }
}

/// Dense per-vertex 3D positions (Q x 3).
#[derive(Debug, Clone, PartialEq)]
pub struct VertexShape {
    pub positions: Vec<[f64; 3]>,
}

impl VertexShape {
    pub fn new(positions: Vec<[f64; 3]>) -> Self {
        VertexShape { positions }
    }

    /// Interpret a flat `3Q` vector (x0,y0,z0,x1,...) as vertex positions.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Mismatch(format!(
                "flat shape vector length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(VertexShape {
            positions: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.positions.len() * 3);
        for p in &self.positions {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Scale and translation scalars of the cylindrical unwrap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnwrapConstants {
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
}

impl UnwrapConstants {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 == 0.0 || self.alpha2 == 0.0 {
            return Err(Error::Domain(
                "unwrap constants alpha1 and alpha2 must be nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Cylindrical projection of a 3D point onto UV texel coordinates.
///
/// Returns `(u, v)` with `v = alpha1 * atan2(x, z) + beta1` and
/// `u = alpha2 * y + beta2`. The two-argument arctangent covers the full
/// front-facing hemisphere without branch issues.
pub fn cylindrical_unwrap(p: [f64; 3], c: &UnwrapConstants) -> Result<(f64, f64)> {
    let [x, y, z] = p;
    if x == 0.0 && z == 0.0 {
        return Err(Error::Domain(
            "cylindrical unwrap undefined on the cylinder axis (x = z = 0)".into(),
        ));
    }
    Ok((c.alpha2 * y + c.beta2, c.alpha1 * x.atan2(z) + c.beta1))
}

#[inline]
pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// VJP of `y = g / |g|`: given the unit output `y`, the input norm `|g|`, and
/// an upstream gradient `w`, returns the gradient with respect to `g`,
/// i.e. `(w - (w . y) y) / |g|`.
#[inline]
pub(crate) fn normalize_vjp(y: [f64; 3], g_norm: f64, w: [f64; 3]) -> [f64; 3] {
    let wy = dot3(w, y);
    [
        (w[0] - wy * y[0]) / g_norm,
        (w[1] - wy * y[1]) / g_norm,
        (w[2] - wy * y[2]) / g_norm,
    ]
}

const STAR_AREA_EPS: f64 = 1e-12;

/// Per-vertex accumulated face-normal vectors (twice the area-weighted face
/// normals summed over each vertex's star), before normalization.
fn accumulate_star_normals(s: &VertexShape, topo: &Topology) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0; 3]; s.len()];
    for t in &topo.triangles {
        let [a, b, c] = *t;
        let cr = cross3(
            sub3(s.positions[b], s.positions[a]),
            sub3(s.positions[c], s.positions[a]),
        );
        for &vi in t {
            acc[vi][0] += cr[0];
            acc[vi][1] += cr[1];
            acc[vi][2] += cr[2];
        }
    }
    acc
}

/// Area-weighted unit vertex normals, oriented by counter-clockwise winding.
pub fn vertex_normals(s: &VertexShape, topo: &Topology) -> Result<Vec<[f64; 3]>> {
    let acc = accumulate_star_normals(s, topo);
    let mut out = vec![[0.0; 3]; s.len()];
    for (i, g) in acc.iter().enumerate() {
        let n = norm3(*g);
        if n < STAR_AREA_EPS {
            return Err(Error::Domain(format!("zero-area star around vertex {i}")));
        }
        out[i] = [g[0] / n, g[1] / n, g[2] / n];
    }
    Ok(out)
}

/// Backward pass of [`vertex_normals`]: upstream gradients on the unit
/// normals become gradients on the vertex positions.
pub fn vertex_normals_backward(
    s: &VertexShape,
    topo: &Topology,
    upstream: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    if upstream.len() != s.len() {
        return Err(Error::Mismatch(format!(
            "normal gradient count {} does not match vertex count {}",
            upstream.len(),
            s.len()
        )));
    }
    let acc = accumulate_star_normals(s, topo);
    // d loss / d accumulated star vector, through the normalization.
    let mut d_acc = vec![[0.0; 3]; s.len()];
    for i in 0..s.len() {
        let n = norm3(acc[i]);
        if n < STAR_AREA_EPS {
            return Err(Error::Domain(format!("zero-area star around vertex {i}")));
        }
        let y = [acc[i][0] / n, acc[i][1] / n, acc[i][2] / n];
        d_acc[i] = normalize_vjp(y, n, upstream[i]);
    }
    let mut d_pos = vec![[0.0; 3]; s.len()];
    for t in &topo.triangles {
        let [a, b, c] = *t;
        // The face's cross product feeds all three incident star sums.
        let w = [
            d_acc[a][0] + d_acc[b][0] + d_acc[c][0],
            d_acc[a][1] + d_acc[b][1] + d_acc[c][1],
            d_acc[a][2] + d_acc[b][2] + d_acc[c][2],
        ];
        let u = sub3(s.positions[b], s.positions[a]);
        let v = sub3(s.positions[c], s.positions[a]);
        // d(w . (u x v)) / du = v x w ; d/dv = w x u.
        let du = cross3(v, w);
        let dv = cross3(w, u);
        for k in 0..3 {
            d_pos[a][k] -= du[k] + dv[k];
            d_pos[b][k] += du[k];
            d_pos[c][k] += dv[k];
        }
    }
    Ok(d_pos)
}

/// Per-texel triangle assignment of the UV triangulation: which UV triangle
/// contains each integer texel and with what barycentric weights.
///
/// The parameterization is injective, so triangles do not overlap; texels on
/// shared edges are claimed by the lowest triangle index (inclusive edges,
/// first wins). Depends only on the topology and grid size, so it is built
/// once and reused across renders.
#[derive(Debug, Clone)]
pub struct UvRaster {
    pub u_size: usize,
    pub v_size: usize,
    /// -1 = texel outside every UV triangle.
    pub tri_id: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
}

impl UvRaster {
    #[inline]
    pub fn texel_index(&self, u: usize, v: usize) -> usize {
        u * self.v_size + v
    }

    pub fn covered_mask(&self) -> Vec<bool> {
        self.tri_id.iter().map(|&t| t >= 0).collect()
    }
}

#[inline]
fn edge2(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Rasterize the UV triangulation over the integer texel grid.
pub fn rasterize_uv_triangles(topo: &Topology, u_size: usize, v_size: usize) -> UvRaster {
    let n = u_size * v_size;
    let mut out = UvRaster {
        u_size,
        v_size,
        tri_id: vec![-1; n],
        bary: vec![[0.0; 3]; n],
    };
    for (ti, t) in topo.triangles.iter().enumerate() {
        let q = [topo.uv_coords[t[0]], topo.uv_coords[t[1]], topo.uv_coords[t[2]]];
        let area2 = edge2(q[0], q[1], q[2]);
        if area2 == 0.0 {
            continue;
        }
        // Positive-orientation vertex order, remembering the permutation so
        // barycentric weights land on the original vertices.
        let perm: [usize; 3] = if area2 > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
        let o = [q[perm[0]], q[perm[1]], q[perm[2]]];
        let area = area2.abs();

        let u_lo = o.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let u_hi = o.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).floor();
        let v_lo = o.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let v_hi = o.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor();
        if u_hi < 0.0 || v_hi < 0.0 {
            continue;
        }
        let u_hi = (u_hi as usize).min(u_size.saturating_sub(1));
        let v_hi = (v_hi as usize).min(v_size.saturating_sub(1));

        for u in u_lo..=u_hi {
            for v in v_lo..=v_hi {
                let idx = u * v_size + v;
                if out.tri_id[idx] >= 0 {
                    continue;
                }
                let p = (u as f64, v as f64);
                let w0 = edge2(o[1], o[2], p);
                let w1 = edge2(o[2], o[0], p);
                let w2 = edge2(o[0], o[1], p);
                if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                    out.tri_id[idx] = ti as i32;
                    let mut b = [0.0; 3];
                    b[perm[0]] = w0 / area;
                    b[perm[1]] = w1 / area;
                    b[perm[2]] = w2 / area;
                    out.bary[idx] = b;
                }
            }
        }
    }
    out
}

/// Interpolate per-vertex values over the UV triangulation into a map.
/// Covered texels get the barycentric combination of their triangle's vertex
/// values; uncovered texels stay zero and masked out.
pub fn uv_embed(values: &[[f64; 3]], topo: &Topology, raster: &UvRaster) -> UvMap {
    let mut map = UvMap::zeros(raster.u_size, raster.v_size);
    for idx in 0..raster.tri_id.len() {
        let ti = raster.tri_id[idx];
        if ti < 0 {
            continue;
        }
        let t = topo.triangles[ti as usize];
        let b = raster.bary[idx];
        for c in 0..3 {
            map.data[idx * 3 + c] =
                b[0] * values[t[0]][c] + b[1] * values[t[1]][c] + b[2] * values[t[2]][c];
        }
        map.mask[idx] = true;
    }
    map
}

/// Backward pass of [`uv_embed`]: map-space gradients (only masked-in texels
/// are read) accumulate back onto the per-vertex values.
pub fn uv_embed_backward(
    upstream: &UvMap,
    topo: &Topology,
    raster: &UvRaster,
) -> Vec<[f64; 3]> {
    let q = topo.uv_coords.len();
    let mut d_values = vec![[0.0; 3]; q];
    for idx in 0..raster.tri_id.len() {
        let ti = raster.tri_id[idx];
        if ti < 0 || !upstream.mask[idx] {
            continue;
        }
        let t = topo.triangles[ti as usize];
        let b = raster.bary[idx];
        for k in 0..3 {
            for c in 0..3 {
                d_values[t[k]][c] += b[k] * upstream.data[idx * 3 + c];
            }
        }
    }
    d_values
}

/// One dilation assignment: `texel` was filled from the (already valid)
/// `srcs`, as `normalize(sum of source normals)`.
#[derive(Debug, Clone)]
pub struct FillStep {
    pub texel: usize,
    pub srcs: Vec<usize>,
}

/// Record of the dilation that pads a normal map outward so bilinear lookups
/// near the covered-region boundary never mix in zero texels. Steps are
/// ordered; the backward pass walks them in reverse.
#[derive(Debug, Clone, Default)]
pub struct FillPlan {
    pub steps: Vec<FillStep>,
}

const FILL_SUM_EPS: f64 = 1e-12;

/// Extend a unit-normal map by `rounds` rings of 8-connected dilation.
/// Each new texel becomes the normalized sum of its valid neighbors' normals.
/// Returns the plan used (for gradient propagation); `map.mask` afterwards
/// marks the filled region, strictly containing the original one.
pub fn dilate_normal_map(map: &mut UvMap, rounds: usize) -> FillPlan {
    let mut plan = FillPlan::default();
    let (us, vs) = (map.u_size as isize, map.v_size as isize);
    for _ in 0..rounds {
        let snapshot = map.mask.clone();
        let mut new_steps = Vec::new();
        for u in 0..us {
            for v in 0..vs {
                let idx = (u * vs + v) as usize;
                if snapshot[idx] {
                    continue;
                }
                let mut srcs = Vec::new();
                for du in -1..=1 {
                    for dv in -1..=1 {
                        if du == 0 && dv == 0 {
                            continue;
                        }
                        let (nu, nv) = (u + du, v + dv);
                        if nu < 0 || nv < 0 || nu >= us || nv >= vs {
                            continue;
                        }
                        let nidx = (nu * vs + nv) as usize;
                        if snapshot[nidx] {
                            srcs.push(nidx);
                        }
                    }
                }
                if srcs.is_empty() {
                    continue;
                }
                let mut s = [0.0; 3];
                for &si in &srcs {
                    for c in 0..3 {
                        s[c] += map.data[si * 3 + c];
                    }
                }
                let n = norm3(s);
                if n < FILL_SUM_EPS {
                    continue;
                }
                for c in 0..3 {
                    map.data[idx * 3 + c] = s[c] / n;
                }
                new_steps.push(FillStep { texel: idx, srcs });
            }
        }
        for st in &new_steps {
            map.mask[st.texel] = true;
        }
        plan.steps.extend(new_steps);
    }
    plan
}

/// Backward pass of [`dilate_normal_map`]: gradients on filled texels flow
/// back to their sources (in reverse fill order), leaving `d_map` holding
/// gradients only on originally-covered texels.
pub fn dilate_normal_map_backward(map: &UvMap, plan: &FillPlan, d_map: &mut [f64]) {
    for st in plan.steps.iter().rev() {
        let idx = st.texel;
        let y = [
            map.data[idx * 3],
            map.data[idx * 3 + 1],
            map.data[idx * 3 + 2],
        ];
        // Recover the pre-normalization sum from the sources.
        let mut s = [0.0; 3];
        for &si in &st.srcs {
            for c in 0..3 {
                s[c] += map.data[si * 3 + c];
            }
        }
        let n = norm3(s);
        let w = [d_map[idx * 3], d_map[idx * 3 + 1], d_map[idx * 3 + 2]];
        d_map[idx * 3] = 0.0;
        d_map[idx * 3 + 1] = 0.0;
        d_map[idx * 3 + 2] = 0.0;
        if n < FILL_SUM_EPS {
            continue;
        }
        let ds = normalize_vjp(y, n, w);
        for &si in &st.srcs {
            for c in 0..3 {
                d_map[si * 3 + c] += ds[c];
            }
        }
    }
}

/// Sample a UV shape map at every vertex's UV coordinate.
pub fn shape_from_uv(map: &UvMap, topo: &Topology) -> Result<VertexShape> {
    let mut positions = Vec::with_capacity(topo.uv_coords.len());
    for &p in &topo.uv_coords {
        positions.push(sample_uv(map, p)?);
    }
    Ok(VertexShape { positions })
}

/// Backward pass of [`shape_from_uv`]: per-vertex position gradients
/// accumulate into a map-sized gradient buffer (`3 * U * V`).
pub fn shape_from_uv_backward(
    map: &UvMap,
    topo: &Topology,
    upstream: &[[f64; 3]],
    d_map: &mut [f64],
) -> Result<()> {
    for (i, &p) in topo.uv_coords.iter().enumerate() {
        let g = sample_uv_backward(map, p, upstream[i])?;
        for ((u, v), tg) in g.texels[..g.count].iter() {
            let idx = (u * map.v_size + v) * 3;
            for c in 0..3 {
                d_map[idx + c] += tg[c];
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn test_unwrap_axis_point_maps_to_origin_offsets() {
        let c = UnwrapConstants { alpha1: 1.0, beta1: 0.0, alpha2: 1.0, beta2: 0.0 };
        assert_eq!(cylindrical_unwrap([0.0, 0.0, 1.0], &c).unwrap(), (0.0, 0.0));
        let (u, v) = cylindrical_unwrap([1.0, 0.0, 1.0], &c).unwrap();
        assert_eq!(u, 0.0);
        assert_relative_eq!(v, PI / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn test_unwrap_matches_direct_formula_evaluation() {
        // Independent scalar evaluation of the unwrap formula.
        let c = UnwrapConstants { alpha1: 30.0, beta1: 96.0, alpha2: 40.0, beta2: 112.0 };
        let p = [0.3, -0.2, 0.9];
        let want_v = 30.0 * (0.3f64).atan2(0.9) + 96.0;
        let want_u = 40.0 * (-0.2) + 112.0;
        let (u, v) = cylindrical_unwrap(p, &c).unwrap();
        assert_relative_eq!(u, want_u, epsilon = 1e-12);
        assert_relative_eq!(v, want_v, epsilon = 1e-12);
        assert_relative_eq!(v, 105.65251663189927, epsilon = 1e-10);
    }

    #[test]
    fn test_unwrap_degenerate_axis_point_is_domain_error() {
        let c = UnwrapConstants { alpha1: 1.0, beta1: 0.0, alpha2: 1.0, beta2: 0.0 };
        assert!(matches!(
            cylindrical_unwrap([0.0, 0.5, 0.0], &c),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn test_unwrap_injective_on_front_hemisphere_samples() {
        let c = UnwrapConstants { alpha1: 20.0, beta1: 25.0, alpha2: 20.0, beta2: 25.0 };
        let mut pts = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                let theta = -1.2 + 2.4 * (i as f64) / 14.0;
                let y = -1.0 + 2.0 * (j as f64) / 14.0;
                pts.push(cylindrical_unwrap([theta.sin(), y, theta.cos()], &c).unwrap());
            }
        }
        for a in 0..pts.len() {
            for b in (a + 1)..pts.len() {
                let d = ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
                assert!(d > 1e-9, "points {a} and {b} collide in UV");
            }
        }
    }

    /// Regular (nu x nv) grid over [0,nu-1]x[0,nv-1] UV with positions given
    /// by a closure; CCW winding as seen from +z for planar z=0 grids.
    fn grid_mesh(
        nu: usize,
        nv: usize,
        pos: impl Fn(usize, usize) -> [f64; 3],
    ) -> (VertexShape, Topology) {
        let mut positions = Vec::new();
        let mut uv = Vec::new();
        for i in 0..nu {
            for j in 0..nv {
                positions.push(pos(i, j));
                uv.push((i as f64, j as f64));
            }
        }
        let at = |i: usize, j: usize| i * nv + j;
        let mut tris = Vec::new();
        for i in 0..nu - 1 {
            for j in 0..nv - 1 {
                tris.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                tris.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
            }
        }
        (VertexShape::new(positions), Topology::new(tris, uv))
    }

    #[test]
    fn test_planar_ccw_mesh_normals_point_up() {
        let (s, topo) = grid_mesh(4, 4, |i, j| [j as f64, i as f64, 0.0]);
        // uv grid (i,j) -> position (x=j, y=i): triangle (v00,v10,v11) has
        // edges (0,1,0) and (1,1,0); cross = (0*0-0*1, 0*1-0*0, 0*1-1*1)...
        // winding check is what the assertion is for.
        let n = vertex_normals(&s, &topo).unwrap();
        for (i, ni) in n.iter().enumerate() {
            let expect_up = [0.0, 0.0, -1.0];
            let expect_down = [0.0, 0.0, 1.0];
            let d_up = dot3(*ni, expect_up);
            let d_down = dot3(*ni, expect_down);
            assert!(
                d_up > 0.999999 || d_down > 0.999999,
                "vertex {i} normal {ni:?} not perpendicular to plane"
            );
        }
        // All normals must agree on one side.
        let side = n[0][2].signum();
        assert!(n.iter().all(|ni| ni[2].signum() == side));
    }

    #[test]
    fn test_sphere_mesh_normals_are_radial() {
        // Latitude-longitude patch of the unit sphere (avoiding the poles).
        let (s, topo) = grid_mesh(17, 17, |i, j| {
            let phi = -1.2 + 2.4 * (i as f64) / 16.0;
            let theta = -1.2 + 2.4 * (j as f64) / 16.0;
            [
                phi.cos() * theta.sin(),
                phi.sin(),
                phi.cos() * theta.cos(),
            ]
        });
        let n = vertex_normals(&s, &topo).unwrap();
        let mut worst_deg: f64 = 0.0;
        for (p, ni) in s.positions.iter().zip(&n) {
            let r = norm3(*p);
            let radial = [p[0] / r, p[1] / r, p[2] / r];
            let cosang = dot3(*ni, radial).abs().min(1.0);
            worst_deg = worst_deg.max(cosang.acos().to_degrees());
        }
        assert!(worst_deg < 5.0, "max angular error {worst_deg} deg");
    }

    #[test]
    fn test_flipping_winding_negates_normals_exactly() {
        let (s, topo) = grid_mesh(5, 5, |i, j| {
            let x = j as f64 * 0.3;
            let y = i as f64 * 0.25;
            [x, y, (x * 1.3).sin() * 0.2 + (y * 0.9).cos() * 0.1]
        });
        let n = vertex_normals(&s, &topo).unwrap();
        let mut flipped = topo.clone();
        for t in flipped.triangles.iter_mut() {
            t.swap(1, 2);
        }
        let nf = vertex_normals(&s, &flipped).unwrap();
        for (a, b) in n.iter().zip(&nf) {
            assert_eq!([stripe(-a[0]), stripe(-a[1]), stripe(-a[2])], [stripe(b[0]), stripe(b[1]), stripe(b[2])]);
        }
    }

    // Collapse -0.0 and 0.0 for bitwise comparisons of negated normals.
    fn stripe(x: f64) -> f64 {
        if x == 0.0 {
            0.0
        } else {
            x
        }
    }

    #[test]
    fn test_unit_normals_within_1e9() {
        let (s, topo) = grid_mesh(6, 6, |i, j| {
            [j as f64, i as f64, ((i * 7 + j * 3) as f64 * 0.37).sin()]
        });
        for n in vertex_normals(&s, &topo).unwrap() {
            assert_relative_eq!(norm3(n), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn test_zero_area_star_error_names_the_vertex() {
        // Three collinear vertices: the only triangle is degenerate.
        let s = VertexShape::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let topo = Topology::new(vec![[0, 1, 2]], vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        match vertex_normals(&s, &topo) {
            Err(Error::Domain(msg)) => assert!(msg.contains("vertex 0"), "message: {msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn test_vertex_normals_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let (s, topo) = grid_mesh(4, 4, |i, j| {
            [j as f64, i as f64, ((i * 5 + j * 11) as f64 * 0.29).sin() * 0.4]
        });
        let upstream: Vec<[f64; 3]> = (0..s.len())
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let grad = vertex_normals_backward(&s, &topo, &upstream).unwrap();
        let scalar = |shape: &VertexShape| -> f64 {
            let n = vertex_normals(shape, &topo).unwrap();
            n.iter()
                .zip(&upstream)
                .map(|(a, b)| dot3(*a, *b))
                .sum()
        };
        let h = 1e-6;
        for vi in (0..s.len()).step_by(3) {
            for k in 0..3 {
                let mut plus = s.clone();
                plus.positions[vi][k] += h;
                let mut minus = s.clone();
                minus.positions[vi][k] -= h;
                let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
                assert_relative_eq!(grad[vi][k], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn test_uv_raster_barycentrics_reconstruct_texel_coordinates() {
        let (_, topo) = grid_mesh(5, 6, |i, j| [j as f64, i as f64, 0.0]);
        let raster = rasterize_uv_triangles(&topo, 5, 6);
        for u in 0..5 {
            for v in 0..6 {
                let idx = raster.texel_index(u, v);
                assert!(raster.tri_id[idx] >= 0, "texel ({u},{v}) uncovered");
                let b = raster.bary[idx];
                assert_relative_eq!(b[0] + b[1] + b[2], 1.0, epsilon = 1e-9);
                let t = topo.triangles[raster.tri_id[idx] as usize];
                let mut up = 0.0;
                let mut vp = 0.0;
                for k in 0..3 {
                    up += b[k] * topo.uv_coords[t[k]].0;
                    vp += b[k] * topo.uv_coords[t[k]].1;
                }
                assert_relative_eq!(up, u as f64, epsilon = 1e-9);
                assert_relative_eq!(vp, v as f64, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn test_embed_then_resample_round_trip_is_tight() {
        // Smooth curved patch whose UV layout covers the whole grid, so every
        // bilinear lookup has valid support.
        let n = 33;
        let (s, topo) = grid_mesh(n, n, |i, j| {
            let theta = -1.1 + 2.2 * (j as f64) / (n as f64 - 1.0);
            let y = -1.0 + 2.0 * (i as f64) / (n as f64 - 1.0);
            let r = 1.0 + 0.15 * (2.0 * theta).cos() * (1.5 * y).sin();
            [r * theta.sin(), y, r * theta.cos()]
        });
        let raster = rasterize_uv_triangles(&topo, n, n);
        let map = uv_embed(&s.positions, &topo, &raster);
        let back = shape_from_uv(&map, &topo).unwrap();
        let mut worst: f64 = 0.0;
        for (a, b) in s.positions.iter().zip(&back.positions) {
            worst = worst.max(norm3(sub3(*a, *b)));
        }
        // Vertices sit on triangulation nodes; interpolation error is bounded
        // by curvature over one texel cell.
        assert!(worst < 1e-2, "round-trip error {worst}");
    }

    #[test]
    fn test_shape_from_uv_constant_map_gives_constant_vertices() {
        let (_, topo) = grid_mesh(4, 4, |i, j| [j as f64, i as f64, 0.0]);
        let mut map = UvMap::zeros(4, 4);
        for t in 0..16 {
            map.data[t * 3] = 1.5;
            map.data[t * 3 + 1] = -2.0;
            map.data[t * 3 + 2] = 0.25;
            map.mask[t] = true;
        }
        let s = shape_from_uv(&map, &topo).unwrap();
        for p in &s.positions {
            assert_eq!(*p, [1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn test_dilate_normal_map_fills_ring_with_unit_normals() {
        let mut map = UvMap::zeros(7, 7);
        // One valid texel in the middle with normal +z.
        map.set(3, 3, [0.0, 0.0, 1.0]);
        let mi = map.texel_index(3, 3);
        map.mask[mi] = true;
        let plan = dilate_normal_map(&mut map, 2);
        assert!(!plan.steps.is_empty());
        // After two rounds the 5x5 block around (3,3) is filled.
        for u in 1..=5 {
            for v in 1..=5 {
                assert!(map.masked(u, v), "texel ({u},{v}) not filled");
                assert_relative_eq!(norm3(map.get(u, v)), 1.0, epsilon = 1e-12);
            }
        }
        assert!(!map.masked(0, 0));
    }

    #[test]
    fn test_dilate_backward_routes_gradient_to_sources() {
        let mut map = UvMap::zeros(5, 5);
        map.set(2, 2, [0.0, 0.0, 1.0]);
        let mi = map.texel_index(2, 2);
        map.mask[mi] = true;
        let plan = dilate_normal_map(&mut map, 1);
        let mut d = vec![0.0; 5 * 5 * 3];
        // Tangential upstream on one filled texel.
        let fi = map.texel_index(2, 3);
        d[fi * 3] = 1.0;
        dilate_normal_map_backward(&map, &plan, &mut d);
        // Gradient left the filled texel and reached the source.
        assert_eq!(d[fi * 3], 0.0);
        assert!(d[mi * 3].abs() > 0.0);
    }
}
