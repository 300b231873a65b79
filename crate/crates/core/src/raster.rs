//! The rendering layer: Z-buffer triangle rasterization with barycentric
//! interpolation, shaded-texture lookup per covered pixel, occlusion-aware
//! compositing, image-to-UV unwarping, and the analytic backward pass.
//!
//! Conventions: pixel centers sit at half-integer coordinates (x+0.5, y+0.5)
//! with x rightward and y downward; a pixel on a triangle edge belongs to the
//! triangle whose top or left edge it lies on, so shared edges are claimed
//! exactly once. Depth is camera-space z, smaller is closer. Visibility is
//! hard: the backward pass holds the pixel-to-triangle assignment fixed, so
//! vertex and projection gradients are exact conditional on coverage, and
//! silhouette motion is driven by the landmark term during fitting.

use crate::camera::{rotate, rotate_backward, ProjectedVertices, ProjectionParams};
use crate::error::{Error, Result};
use crate::lighting::{shade, shade_backward, ShLighting};
use crate::mesh::{
    dilate_normal_map, dilate_normal_map_backward, normalize_vjp, rasterize_uv_triangles,
    uv_embed, uv_embed_backward, vertex_normals, vertex_normals_backward, FillPlan, Topology,
    UvRaster, VertexShape,
};
use crate::uv::{sample_uv, sample_uv_backward, UvMap};

/// Row-major float RGB image; `data[(y * width + x) * 3 + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Image::zeros(width, height);
        for p in 0..width * height {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.pixel_index(x, y) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.pixel_index(x, y) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Bilinear sample of an image at continuous image-plane coordinates, where
/// pixel centers are at (x+0.5, y+0.5). Returns None outside the span of the
/// pixel-center grid; no clamping.
pub fn sample_image(img: &Image, x: f64, y: f64) -> Option<[f64; 3]> {
    let gx = x - 0.5;
    let gy = y - 0.5;
    let (w, h) = (img.width, img.height);
    if !(gx >= 0.0 && gx <= (w - 1) as f64 && gy >= 0.0 && gy <= (h - 1) as f64) {
        return None;
    }
    let cell = |g: f64, size: usize| -> (usize, f64) {
        if size == 1 {
            return (0, 0.0);
        }
        let mut i0 = g.floor() as usize;
        let mut fr = g - i0 as f64;
        if i0 >= size - 1 {
            // Top boundary: use the last interior cell with fraction 1.
            i0 = size - 2;
            fr = 1.0;
        }
        (i0, fr)
    };
    let (x0, fx) = cell(gx, w);
    let (y0, fy) = cell(gy, h);
    let mut out = [0.0; 3];
    for (dx, dy, wgt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if wgt == 0.0 {
            continue;
        }
        let px = (x0 + dx).min(w - 1);
        let py = (y0 + dy).min(h - 1);
        let base = (py * w + px) * 3;
        for c in 0..3 {
            out[c] += wgt * img.data[base + c];
        }
    }
    Some(out)
}

/// Per-pixel triangle assignment from rasterization: the enclosing triangle
/// (-1 = background), its barycentric weights in the triangle's stored vertex
/// order, and the interpolated camera-space depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBuffer {
    pub width: usize,
    pub height: usize,
    pub tri_id: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl FragmentBuffer {
    #[inline]
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// A rendered image plus the set of pixels covered by the mesh.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub rgb: Image,
    pub coverage: Vec<bool>,
}

/// Per-pixel blend weights in [0, 1] for occlusion-aware compositing.
#[derive(Debug, Clone)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub m: Vec<f64>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize, m: Vec<f64>) -> Result<Self> {
        if m.len() != width * height {
            return Err(Error::Mismatch(format!(
                "mask has {} values for a {width}x{height} image",
                m.len()
            )));
        }
        for (i, v) in m.iter().enumerate() {
            if !(*v >= 0.0 && *v <= 1.0) {
                return Err(Error::Domain(format!(
                    "mask value {v} at pixel {i} is outside [0, 1]"
                )));
            }
        }
        Ok(OcclusionMask { width, height, m })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        OcclusionMask { width, height, m: vec![1.0; width * height] }
    }
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// A zero edge function counts as inside only on top edges (horizontal,
/// pointing rightward in the positive orientation) and left edges (pointing
/// upward, i.e. decreasing y), so pixels on a shared edge are claimed by
/// exactly one of the two adjacent triangles.
#[inline]
fn accepts(w: f64, from: [f64; 2], to: [f64; 2]) -> bool {
    if w > 0.0 {
        return true;
    }
    if w < 0.0 {
        return false;
    }
    let d = [to[0] - from[0], to[1] - from[1]];
    (d[1] == 0.0 && d[0] > 0.0) || d[1] < 0.0
}

/// Coverage test of one triangle at one pixel center: barycentric weights in
/// the triangle's original vertex order plus interpolated depth, or None when
/// the center falls outside (or the triangle is degenerate).
///
/// This is the single source of truth for the per-pixel fragment math; the
/// rasterizer and its brute-force test oracle differ only in how they scan.
pub fn fragment_at(
    projected: &ProjectedVertices,
    tri: [usize; 3],
    px: f64,
    py: f64,
) -> Option<([f64; 3], f64)> {
    let a = projected.coords[tri[0]];
    let b = projected.coords[tri[1]];
    let c = projected.coords[tri[2]];
    if !(a[0].is_finite() && a[1].is_finite() && b[0].is_finite() && b[1].is_finite()
        && c[0].is_finite() && c[1].is_finite())
    {
        return None;
    }
    let area2 = edge(a, b, c);
    if area2 == 0.0 {
        return None;
    }
    // Reorder to positive orientation so the inside test is sign-uniform.
    let flipped = area2 < 0.0;
    let (pa, pb, pc) = if flipped { (a, c, b) } else { (a, b, c) };
    let p = [px, py];
    let w0 = edge(pb, pc, p);
    let w1 = edge(pc, pa, p);
    let w2 = edge(pa, pb, p);
    if !(accepts(w0, pb, pc) && accepts(w1, pc, pa) && accepts(w2, pa, pb)) {
        return None;
    }
    let s = w0 + w1 + w2;
    let l = [w0 / s, w1 / s, w2 / s];
    // Back to the stored vertex order.
    let lam = if flipped { [l[0], l[2], l[1]] } else { l };
    let z = lam[0] * projected.depth[tri[0]]
        + lam[1] * projected.depth[tri[1]]
        + lam[2] * projected.depth[tri[2]];
    Some((lam, z))
}

/// Z-buffer rasterization: each covered pixel gets the triangle with the
/// smallest interpolated depth at its center; exact depth ties go to the
/// lowest triangle index. Empty coverage is valid.
pub fn rasterize(
    projected: &ProjectedVertices,
    topo: &Topology,
    width: usize,
    height: usize,
) -> FragmentBuffer {
    let n = width * height;
    let mut frag = FragmentBuffer {
        width,
        height,
        tri_id: vec![-1; n],
        bary: vec![[0.0; 3]; n],
        depth: vec![f64::INFINITY; n],
    };
    for (ti, tri) in topo.triangles.iter().enumerate() {
        let pts = [
            projected.coords[tri[0]],
            projected.coords[tri[1]],
            projected.coords[tri[2]],
        ];
        if pts.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            continue;
        }
        let min_x = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        // Pixel centers are offset by 0.5; widen by one pixel for safety.
        let x_lo = ((min_x - 0.5).floor() as i64 - 1).max(0) as usize;
        let x_hi = ((max_x - 0.5).ceil() as i64 + 1).min(width as i64 - 1);
        let y_lo = ((min_y - 0.5).floor() as i64 - 1).max(0) as usize;
        let y_hi = ((max_y - 0.5).ceil() as i64 + 1).min(height as i64 - 1);
        if x_hi < x_lo as i64 || y_hi < y_lo as i64 {
            continue;
        }
        for y in y_lo..=y_hi as usize {
            for x in x_lo..=x_hi as usize {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if let Some((lam, z)) = fragment_at(projected, *tri, px, py) {
                    let idx = y * width + x;
                    if z < frag.depth[idx] {
                        frag.depth[idx] = z;
                        frag.tri_id[idx] = ti as i32;
                        frag.bary[idx] = lam;
                    }
                }
            }
        }
    }
    frag
}

/// Precomputed per-topology data reused across renders: the assignment of UV
/// texels to UV triangles, which depends only on the topology and grid size.
#[derive(Debug, Clone)]
pub struct RenderContext {
    pub u_size: usize,
    pub v_size: usize,
    pub uv_raster: UvRaster,
}

impl RenderContext {
    pub fn new(topo: &Topology, u_size: usize, v_size: usize) -> Self {
        RenderContext {
            u_size,
            v_size,
            uv_raster: rasterize_uv_triangles(topo, u_size, v_size),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    /// Color of pixels the mesh does not cover.
    pub background: [f64; 3],
    /// Rings of normal-map dilation guarding bilinear lookups at the
    /// covered-region boundary.
    pub dilation_rounds: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: [0.0; 3], dilation_rounds: 2 }
    }
}

/// Everything the backward pass needs from a forward render.
pub struct RenderState<'a> {
    pub topo: &'a Topology,
    pub ctx: &'a RenderContext,
    pub m: ProjectionParams,
    pub light: ShLighting,
    pub shape: VertexShape,
    pub rotated: VertexShape,
    pub projected: ProjectedVertices,
    /// Unit vertex normals of the rotated shape.
    pub normals: Vec<[f64; 3]>,
    /// Norms of the barycentric normal interpolations, per covered texel,
    /// saved for the normalization backward.
    raw_norms: Vec<f64>,
    /// Mask of texels covered by the UV triangulation (before dilation).
    embed_mask: Vec<bool>,
    /// Normalized, dilated normal map.
    pub normal_map: UvMap,
    fill_plan: FillPlan,
    /// Albedo restricted to the normal map's mask.
    pub albedo_work: UvMap,
    /// Shaded texture the pixels sample from.
    pub texture: UvMap,
    pub frag: FragmentBuffer,
    pub image: RenderedImage,
}

fn project_rotated(rotated: &VertexShape, m: &ProjectionParams) -> ProjectedVertices {
    let mut coords = Vec::with_capacity(rotated.len());
    let mut depth = Vec::with_capacity(rotated.len());
    for p in &rotated.positions {
        coords.push([m.f * p[0] + m.t2d[0], m.f * p[1] + m.t2d[1]]);
        depth.push(p[2]);
    }
    ProjectedVertices { coords, depth }
}

/// Build the shaded texture for a rotated shape: interpolate vertex normals
/// over the UV grid, normalize, dilate outward, and shade the albedo.
fn normal_map_pieces(
    rotated: &VertexShape,
    topo: &Topology,
    ctx: &RenderContext,
    rounds: usize,
) -> Result<(Vec<[f64; 3]>, Vec<f64>, Vec<bool>, UvMap, FillPlan)> {
    let normals = vertex_normals(rotated, topo)?;
    let mut nmap = uv_embed(&normals, topo, &ctx.uv_raster);
    let embed_mask = nmap.mask.clone();
    let texels = ctx.u_size * ctx.v_size;
    let mut raw_norms = vec![0.0; texels];
    for t in 0..texels {
        if !nmap.mask[t] {
            continue;
        }
        let g = [nmap.data[t * 3], nmap.data[t * 3 + 1], nmap.data[t * 3 + 2]];
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if n < 1e-12 {
            return Err(Error::Domain(format!(
                "interpolated normal vanishes at texel {t}; the surface folds over itself"
            )));
        }
        raw_norms[t] = n;
        for c in 0..3 {
            nmap.data[t * 3 + c] = g[c] / n;
        }
    }
    let fill_plan = dilate_normal_map(&mut nmap, rounds);
    Ok((normals, raw_norms, embed_mask, nmap, fill_plan))
}

/// Normalized, dilated normal map of an already-rotated shape over the UV
/// raster, as the renderer builds it before shading.
pub fn build_normal_map(
    rotated: &VertexShape,
    topo: &Topology,
    ctx: &RenderContext,
    rounds: usize,
) -> Result<UvMap> {
    let (_, _, _, nmap, _) = normal_map_pieces(rotated, topo, ctx, rounds)?;
    Ok(nmap)
}

fn build_texture(
    rotated: &VertexShape,
    albedo: &UvMap,
    light: &ShLighting,
    topo: &Topology,
    ctx: &RenderContext,
    rounds: usize,
) -> Result<(Vec<[f64; 3]>, Vec<f64>, Vec<bool>, UvMap, FillPlan, UvMap, UvMap)> {
    let (normals, raw_norms, embed_mask, nmap, fill_plan) =
        normal_map_pieces(rotated, topo, ctx, rounds)?;
    let texels = ctx.u_size * ctx.v_size;
    if albedo.u_size != ctx.u_size || albedo.v_size != ctx.v_size {
        return Err(Error::Mismatch(format!(
            "albedo map is {}x{} but the render context is {}x{}",
            albedo.u_size, albedo.v_size, ctx.u_size, ctx.v_size
        )));
    }
    for t in 0..texels {
        if nmap.mask[t] && !albedo.mask[t] {
            return Err(Error::Mismatch(format!(
                "albedo mask does not cover rendered UV texel {t}"
            )));
        }
    }
    let albedo_work = UvMap::from_parts(
        ctx.u_size,
        ctx.v_size,
        albedo.data.clone(),
        nmap.mask.clone(),
    )?;
    let texture = shade(&albedo_work, &nmap, light)?;
    Ok((normals, raw_norms, embed_mask, nmap, fill_plan, albedo_work, texture))
}

/// UV lookup point of a covered pixel: the barycentric combination of the
/// enclosing triangle's vertex UV coordinates.
fn lookup_point(topo: &Topology, tri: [usize; 3], lam: [f64; 3]) -> (f64, f64) {
    let mut u = 0.0;
    let mut v = 0.0;
    for k in 0..3 {
        let (tu, tv) = topo.uv_coords[tri[k]];
        u += lam[k] * tu;
        v += lam[k] * tv;
    }
    (u, v)
}

/// Forward render keeping every intermediate needed by [`render_backward`].
pub fn render_forward<'a>(
    m: &ProjectionParams,
    light: &ShLighting,
    shape: &VertexShape,
    albedo: &UvMap,
    topo: &'a Topology,
    ctx: &'a RenderContext,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<RenderState<'a>> {
    if width == 0 || height == 0 {
        return Err(Error::Domain(format!("image size {width}x{height} is empty")));
    }
    m.validate()?;
    light.validate()?;
    if shape.len() != topo.vertex_count() {
        return Err(Error::Mismatch(format!(
            "shape has {} vertices but topology expects {}",
            shape.len(),
            topo.vertex_count()
        )));
    }
    let rotated = rotate(shape, m);
    let projected = project_rotated(&rotated, m);
    let (normals, raw_norms, embed_mask, normal_map, fill_plan, albedo_work, texture) =
        build_texture(&rotated, albedo, light, topo, ctx, opts.dilation_rounds)?;
    let frag = rasterize(&projected, topo, width, height);
    let image = paint_fragments(&frag, topo, &texture, opts.background)?;
    Ok(RenderState {
        topo,
        ctx,
        m: *m,
        light: *light,
        shape: shape.clone(),
        rotated,
        projected,
        normals,
        raw_norms,
        embed_mask,
        normal_map,
        fill_plan,
        albedo_work,
        texture,
        frag,
        image,
    })
}

/// Paint a fragment buffer by sampling a UV texture at each covered pixel's
/// barycentric lookup point. Uncovered pixels get the background color.
pub fn paint_fragments(
    frag: &FragmentBuffer,
    topo: &Topology,
    texture: &UvMap,
    background: [f64; 3],
) -> Result<RenderedImage> {
    let mut rgb = Image::zeros(frag.width, frag.height);
    let mut coverage = vec![false; frag.width * frag.height];
    for idx in 0..frag.width * frag.height {
        let ti = frag.tri_id[idx];
        if ti < 0 {
            rgb.data[idx * 3..idx * 3 + 3].copy_from_slice(&background);
            continue;
        }
        coverage[idx] = true;
        let tri = topo.triangles[ti as usize];
        let p = lookup_point(topo, tri, frag.bary[idx]);
        let color = sample_uv(texture, p)?;
        rgb.data[idx * 3..idx * 3 + 3].copy_from_slice(&color);
    }
    Ok(RenderedImage { rgb, coverage })
}

/// Rasterize a shape under a projection and paint a precomposed texture,
/// bypassing the albedo-times-shading construction.
pub fn paint_texture(
    m: &ProjectionParams,
    texture: &UvMap,
    shape: &VertexShape,
    topo: &Topology,
    ctx: &RenderContext,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<(RenderedImage, FragmentBuffer)> {
    if width == 0 || height == 0 {
        return Err(Error::Domain(format!("image size {width}x{height} is empty")));
    }
    m.validate()?;
    if texture.u_size != ctx.u_size || texture.v_size != ctx.v_size {
        return Err(Error::Mismatch(format!(
            "texture is {}x{} but the render context is {}x{}",
            texture.u_size, texture.v_size, ctx.u_size, ctx.v_size
        )));
    }
    let rotated = rotate(shape, m);
    let projected = project_rotated(&rotated, m);
    let frag = rasterize(&projected, topo, width, height);
    let image = paint_fragments(&frag, topo, texture, opts.background)?;
    Ok((image, frag))
}

/// Render to an image and fragment buffer.
pub fn render(
    m: &ProjectionParams,
    light: &ShLighting,
    shape: &VertexShape,
    albedo: &UvMap,
    topo: &Topology,
    ctx: &RenderContext,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<(RenderedImage, FragmentBuffer)> {
    let state = render_forward(m, light, shape, albedo, topo, ctx, width, height, opts)?;
    Ok((state.image, state.frag))
}

/// Gradients of a scalar through the rendered image with respect to every
/// differentiable input. Layouts match the forward inputs; `d_params` packs
/// (f, pitch, yaw, roll, tx, ty).
pub struct RenderGrads {
    pub d_albedo: Vec<f64>,
    pub d_light: [[f64; 9]; 3],
    pub d_vertices: Vec<[f64; 3]>,
    pub d_params: [f64; 6],
}

/// Backward pass of the renderer with the pixel-to-triangle assignment held
/// fixed. Albedo and light gradients are exact; vertex and projection
/// gradients are exact conditional on fixed coverage.
pub fn render_backward(state: &RenderState, upstream: &[f64]) -> Result<RenderGrads> {
    let (w, h) = (state.frag.width, state.frag.height);
    if upstream.len() != w * h * 3 {
        return Err(Error::Mismatch(format!(
            "upstream image gradient has {} values, expected {}",
            upstream.len(),
            w * h * 3
        )));
    }
    let topo = state.topo;
    let texels = state.ctx.u_size * state.ctx.v_size;
    let q = state.shape.len();
    let mut d_texture = vec![0.0; texels * 3];
    let mut d_coords = vec![[0.0; 2]; q];
    for idx in 0..w * h {
        let ti = state.frag.tri_id[idx];
        if ti < 0 {
            continue;
        }
        let up = [
            upstream[idx * 3],
            upstream[idx * 3 + 1],
            upstream[idx * 3 + 2],
        ];
        if up == [0.0; 3] {
            continue;
        }
        let tri = topo.triangles[ti as usize];
        let lam = state.frag.bary[idx];
        let p = lookup_point(topo, tri, lam);
        let g = sample_uv_backward(&state.texture, p, up)?;
        for ((tu, tv), tg) in g.texels[..g.count].iter() {
            let base = (tu * state.ctx.v_size + tv) * 3;
            for c in 0..3 {
                d_texture[base + c] += tg[c];
            }
        }
        // Lookup point -> barycentric weights (UV coordinates are constants).
        let (du, dv) = g.dp;
        let mut d_lam = [0.0; 3];
        for k in 0..3 {
            let (tu, tv) = topo.uv_coords[tri[k]];
            d_lam[k] = du * tu + dv * tv;
        }
        // Barycentric weights -> projected vertex coordinates, replicating
        // the forward's orientation permutation.
        let a = state.projected.coords[tri[0]];
        let b = state.projected.coords[tri[1]];
        let c = state.projected.coords[tri[2]];
        let area2 = edge(a, b, c);
        let flipped = area2 < 0.0;
        let (pa, pb, pc) = if flipped { (a, c, b) } else { (a, b, c) };
        let (ia, ib, ic) = if flipped {
            (tri[0], tri[2], tri[1])
        } else {
            (tri[0], tri[1], tri[2])
        };
        let dl = if flipped {
            [d_lam[0], d_lam[2], d_lam[1]]
        } else {
            d_lam
        };
        let (px, py) = (
            (idx % w) as f64 + 0.5,
            (idx / w) as f64 + 0.5,
        );
        let pp = [px, py];
        let w0 = edge(pb, pc, pp);
        let w1 = edge(pc, pa, pp);
        let w2 = edge(pa, pb, pp);
        let s = w0 + w1 + w2;
        let l = [w0 / s, w1 / s, w2 / s];
        // lambda_i = w_i / sum(w): quotient rule.
        let mix = dl[0] * l[0] + dl[1] * l[1] + dl[2] * l[2];
        let dw = [(dl[0] - mix) / s, (dl[1] - mix) / s, (dl[2] - mix) / s];
        // Edge-function partials: dE(p, q, P)/dp = (q.y - P.y, P.x - q.x),
        // dE/dq = (P.y - p.y, p.x - P.x).
        let mut add = |vi: usize, g2: [f64; 2]| {
            d_coords[vi][0] += g2[0];
            d_coords[vi][1] += g2[1];
        };
        // w0 = E(pb, pc, P).
        add(ib, [dw[0] * (pc[1] - py), dw[0] * (px - pc[0])]);
        add(ic, [dw[0] * (py - pb[1]), dw[0] * (pb[0] - px)]);
        // w1 = E(pc, pa, P).
        add(ic, [dw[1] * (pa[1] - py), dw[1] * (px - pa[0])]);
        add(ia, [dw[1] * (py - pc[1]), dw[1] * (pc[0] - px)]);
        // w2 = E(pa, pb, P).
        add(ia, [dw[2] * (pb[1] - py), dw[2] * (px - pb[0])]);
        add(ib, [dw[2] * (py - pa[1]), dw[2] * (pa[0] - px)]);
    }
    // Texture -> albedo, light, normal map.
    let sg = shade_backward(&state.albedo_work, &state.normal_map, &state.light, &d_texture)?;
    let mut d_nmap = sg.d_normals;
    // Undo the dilation fill, leaving gradient on originally covered texels.
    dilate_normal_map_backward(&state.normal_map, &state.fill_plan, &mut d_nmap);
    // Undo the per-texel normalization.
    let mut d_embed = UvMap::zeros(state.ctx.u_size, state.ctx.v_size);
    d_embed.mask.copy_from_slice(&state.embed_mask);
    for t in 0..texels {
        if !state.embed_mask[t] {
            continue;
        }
        let y = [
            state.normal_map.data[t * 3],
            state.normal_map.data[t * 3 + 1],
            state.normal_map.data[t * 3 + 2],
        ];
        let wv = [d_nmap[t * 3], d_nmap[t * 3 + 1], d_nmap[t * 3 + 2]];
        let dg = normalize_vjp(y, state.raw_norms[t], wv);
        d_embed.data[t * 3..t * 3 + 3].copy_from_slice(&dg);
    }
    // Embedded map -> vertex normals -> rotated positions.
    let d_vertex_normals = uv_embed_backward(&d_embed, topo, &state.ctx.uv_raster);
    let mut d_rotated = vertex_normals_backward(&state.rotated, topo, &d_vertex_normals)?;
    // Projected coordinates -> scale, translation, rotated positions.
    let mut d_params = [0.0; 6];
    for i in 0..q {
        let [gx, gy] = d_coords[i];
        let r = state.rotated.positions[i];
        d_params[0] += gx * r[0] + gy * r[1];
        d_params[4] += gx;
        d_params[5] += gy;
        d_rotated[i][0] += state.m.f * gx;
        d_rotated[i][1] += state.m.f * gy;
    }
    // Rotated positions -> model positions and angles.
    let (d_vertices, d_angles) = rotate_backward(&state.shape, &state.m, &d_rotated);
    d_params[1] = d_angles[0];
    d_params[2] = d_angles[1];
    d_params[3] = d_angles[2];
    Ok(RenderGrads {
        d_albedo: sg.d_albedo,
        d_light: sg.d_light,
        d_vertices,
        d_params,
    })
}

/// Re-render with the pixel-to-triangle assignment taken from `frag` instead
/// of a fresh Z-buffer pass: barycentric weights are recomputed from the
/// current projection (without the inside test), so the smooth part of the
/// pipeline responds to perturbed inputs while coverage stays frozen. This is
/// the function finite differences must probe to validate [`render_backward`].
pub fn render_with_frozen_coverage(
    m: &ProjectionParams,
    light: &ShLighting,
    shape: &VertexShape,
    albedo: &UvMap,
    topo: &Topology,
    ctx: &RenderContext,
    frag: &FragmentBuffer,
    opts: &RenderOptions,
) -> Result<Image> {
    let rotated = rotate(shape, m);
    let projected = project_rotated(&rotated, m);
    let (_, _, _, _, _, _, texture) =
        build_texture(&rotated, albedo, light, topo, ctx, opts.dilation_rounds)?;
    let (w, h) = (frag.width, frag.height);
    let mut rgb = Image::zeros(w, h);
    for idx in 0..w * h {
        let ti = frag.tri_id[idx];
        if ti < 0 {
            rgb.data[idx * 3..idx * 3 + 3].copy_from_slice(&opts.background);
            continue;
        }
        let tri = topo.triangles[ti as usize];
        let a = projected.coords[tri[0]];
        let b = projected.coords[tri[1]];
        let c = projected.coords[tri[2]];
        let area2 = edge(a, b, c);
        if area2 == 0.0 {
            return Err(Error::Domain(format!(
                "frozen triangle {ti} became degenerate"
            )));
        }
        let flipped = area2 < 0.0;
        let (pa, pb, pc) = if flipped { (a, c, b) } else { (a, b, c) };
        let (px, py) = ((idx % w) as f64 + 0.5, (idx / w) as f64 + 0.5);
        let p = [px, py];
        let w0 = edge(pb, pc, p);
        let w1 = edge(pc, pa, p);
        let w2 = edge(pa, pb, p);
        let s = w0 + w1 + w2;
        let l = [w0 / s, w1 / s, w2 / s];
        let lam = if flipped { [l[0], l[2], l[1]] } else { l };
        let color = sample_uv(&texture, lookup_point(topo, tri, lam))?;
        rgb.data[idx * 3..idx * 3 + 3].copy_from_slice(&color);
    }
    Ok(rgb)
}

/// Per-pixel convex blend: rendered where the mask is 1, input where it is 0,
/// the weighted mix between. The binary endpoints pass values through
/// unchanged, bit for bit.
pub fn composite_with_mask(
    rendered: &RenderedImage,
    input: &Image,
    mask: &OcclusionMask,
) -> Result<Image> {
    let r = &rendered.rgb;
    if r.width != input.width
        || r.height != input.height
        || r.width != mask.width
        || r.height != mask.height
    {
        return Err(Error::Mismatch(format!(
            "composite dimensions disagree: rendered {}x{}, input {}x{}, mask {}x{}",
            r.width, r.height, input.width, input.height, mask.width, mask.height
        )));
    }
    let mut out = Image::zeros(r.width, r.height);
    for p in 0..r.width * r.height {
        let mv = mask.m[p];
        for c in 0..3 {
            let i = p * 3 + c;
            out.data[i] = if mv == 1.0 {
                r.data[i]
            } else if mv == 0.0 {
                input.data[i]
            } else {
                mv * r.data[i] + (1.0 - mv) * input.data[i]
            };
        }
    }
    Ok(out)
}

/// Backward of [`composite_with_mask`] toward the rendered image: the blend
/// weight per pixel. Pixels with mask 0 get exactly zero gradient.
pub fn composite_backward(mask: &OcclusionMask, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != mask.width * mask.height * 3 {
        return Err(Error::Mismatch(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            mask.width * mask.height * 3
        )));
    }
    let mut out = vec![0.0; upstream.len()];
    for p in 0..mask.width * mask.height {
        let mv = mask.m[p];
        if mv == 0.0 {
            continue;
        }
        for c in 0..3 {
            let i = p * 3 + c;
            out[i] = if mv == 1.0 { upstream[i] } else { mv * upstream[i] };
        }
    }
    Ok(out)
}

/// Pull an image back into UV space: for every texel inside the UV face
/// region, find its surface point from the UV triangulation, project it, and
/// bilinearly sample the image there. Texels whose interpolated rotated
/// normal faces away from the camera (z >= 0) or whose projection leaves the
/// image are marked invalid in the returned mask.
pub fn unwarp_to_uv(
    input: &Image,
    shape: &VertexShape,
    m: &ProjectionParams,
    topo: &Topology,
    ctx: &RenderContext,
) -> Result<UvMap> {
    m.validate()?;
    if shape.len() != topo.vertex_count() {
        return Err(Error::Mismatch(format!(
            "shape has {} vertices but topology expects {}",
            shape.len(),
            topo.vertex_count()
        )));
    }
    let rotated = rotate(shape, m);
    let normals = vertex_normals(&rotated, topo)?;
    let mut out = UvMap::zeros(ctx.u_size, ctx.v_size);
    for idx in 0..ctx.u_size * ctx.v_size {
        let ti = ctx.uv_raster.tri_id[idx];
        if ti < 0 {
            continue;
        }
        let tri = topo.triangles[ti as usize];
        let bw = ctx.uv_raster.bary[idx];
        let mut pos = [0.0; 3];
        let mut nrm = [0.0; 3];
        for k in 0..3 {
            for c in 0..3 {
                pos[c] += bw[k] * rotated.positions[tri[k]][c];
                nrm[c] += bw[k] * normals[tri[k]][c];
            }
        }
        // Camera looks along -z; surface points with normals not facing it
        // are the far side of the head and carry no image evidence.
        if nrm[2] >= 0.0 {
            continue;
        }
        let px = m.f * pos[0] + m.t2d[0];
        let py = m.f * pos[1] + m.t2d[1];
        match sample_image(input, px, py) {
            Some(color) => {
                out.data[idx * 3..idx * 3 + 3].copy_from_slice(&color);
                out.mask[idx] = true;
            }
            None => continue,
        }
    }
    Ok(out)
}
