//! Maps over the UV parameterization domain and bilinear sub-texel sampling.
//!
//! A [`UvMap`] stores three channels per texel plus a validity mask. The same
//! container holds positions (shape maps), reflectance (albedo maps), shading,
//! final textures, and unit normals; what the channels mean is up to the
//! operation consuming the map.
//!
//! Texels are addressed as `(u, v)` with `u in [0, u_size)` and
//! `v in [0, v_size)`, stored u-major: `data[(u * v_size + v) * 3 + c]`.
//! Continuous sample points live in `[0, u_size-1] x [0, v_size-1]`; integer
//! coordinates land exactly on texels.

use crate::error::{Error, Result};

/// Three-channel image over the UV grid with a per-texel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    pub u_size: usize,
    pub v_size: usize,
    /// `u_size * v_size * 3` values, u-major.
    pub data: Vec<f64>,
    /// `u_size * v_size` validity flags.
    pub mask: Vec<bool>,
}

impl UvMap {
    /// All-zero map with every texel masked out.
    pub fn zeros(u_size: usize, v_size: usize) -> Self {
        UvMap {
            u_size,
            v_size,
            data: vec![0.0; u_size * v_size * 3],
            mask: vec![false; u_size * v_size],
        }
    }

    /// Build from raw parts, validating lengths.
    pub fn from_parts(u_size: usize, v_size: usize, data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if data.len() != u_size * v_size * 3 {
            return Err(Error::Mismatch(format!(
                "uv map data length {} does not match {}x{}x3",
                data.len(),
                u_size,
                v_size
            )));
        }
        if mask.len() != u_size * v_size {
            return Err(Error::Mismatch(format!(
                "uv map mask length {} does not match {}x{}",
                mask.len(),
                u_size,
                v_size
            )));
        }
        Ok(UvMap { u_size, v_size, data, mask })
    }

    #[inline]
    pub fn texel_index(&self, u: usize, v: usize) -> usize {
        u * self.v_size + v
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        let i = self.texel_index(u, v) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: [f64; 3]) {
        let i = self.texel_index(u, v) * 3;
        self.data[i] = value[0];
        self.data[i + 1] = value[1];
        self.data[i + 2] = value[2];
    }

    #[inline]
    pub fn masked(&self, u: usize, v: usize) -> bool {
        self.mask[self.texel_index(u, v)]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mirror along the v axis (the horizontal flip of the unwrapped face):
    /// texel (u, v) swaps with (u, v_size-1-v). Data and mask both flip.
    pub fn flip_v(&self) -> UvMap {
        let mut out = self.clone();
        for u in 0..self.u_size {
            for v in 0..self.v_size {
                let src = self.texel_index(u, self.v_size - 1 - v);
                let dst = self.texel_index(u, v);
                out.mask[dst] = self.mask[src];
                for c in 0..3 {
                    out.data[dst * 3 + c] = self.data[src * 3 + c];
                }
            }
        }
        out
    }

    /// Check the albedo range invariant: values in [0,1] on masked-in texels.
    /// Enforced at I/O boundaries; fitting iterates are allowed to leave the
    /// range transiently.
    pub fn validate_albedo_range(&self) -> Result<()> {
        for u in 0..self.u_size {
            for v in 0..self.v_size {
                if !self.masked(u, v) {
                    continue;
                }
                for (c, &x) in self.get(u, v).iter().enumerate() {
                    if !(0.0..=1.0).contains(&x) {
                        return Err(Error::Domain(format!(
                            "albedo value {x} at texel ({u},{v}) channel {c} outside [0,1]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Resolved bilinear cell for a sample point: base texel `(u0, v0)` and
/// in-cell fractions `(fu, fv)`.
///
/// The base texel is the floor of the coordinate, which makes gradients on
/// integer lines right-sided. At the top boundary (`u = u_size-1` or
/// `v = v_size-1`, where no right cell exists) the last interior cell is used
/// with fraction 1, so the value is unchanged and the gradient is left-sided
/// there.
#[derive(Debug, Clone, Copy)]
struct Cell {
    u0: usize,
    v0: usize,
    fu: f64,
    fv: f64,
}

fn resolve_cell(map: &UvMap, p: (f64, f64)) -> Result<Cell> {
    let (u, v) = p;
    let u_max = (map.u_size - 1) as f64;
    let v_max = (map.v_size - 1) as f64;
    if !(u >= 0.0 && u <= u_max && v >= 0.0 && v <= v_max) {
        return Err(Error::OutOfRange(format!(
            "sample point ({u}, {v}) outside [0, {u_max}] x [0, {v_max}]"
        )));
    }
    let mut u0 = u.floor() as usize;
    let mut fu = u - u0 as f64;
    if map.u_size >= 2 && u0 >= map.u_size - 1 {
        u0 = map.u_size - 2;
        fu = u - u0 as f64;
    }
    let mut v0 = v.floor() as usize;
    let mut fv = v - v0 as f64;
    if map.v_size >= 2 && v0 >= map.v_size - 1 {
        v0 = map.v_size - 2;
        fv = v - v0 as f64;
    }
    Ok(Cell { u0, v0, fu, fv })
}

/// Bilinear sample of a map at continuous `(u, v)`.
///
/// Weighted sum over the up-to-4 neighboring texels with weights
/// `(1-|u-u'|) * (1-|v-v'|)`. Out-of-range points are an error, never clamped.
pub fn sample_uv(map: &UvMap, p: (f64, f64)) -> Result<[f64; 3]> {
    let cell = resolve_cell(map, p)?;
    let mut out = [0.0; 3];
    for (du, wu) in [(0usize, 1.0 - cell.fu), (1, cell.fu)] {
        if wu == 0.0 {
            continue;
        }
        for (dv, wv) in [(0usize, 1.0 - cell.fv), (1, cell.fv)] {
            if wv == 0.0 {
                continue;
            }
            let t = map.get(cell.u0 + du, cell.v0 + dv);
            let w = wu * wv;
            for c in 0..3 {
                out[c] += w * t[c];
            }
        }
    }
    Ok(out)
}

/// Gradients produced by [`sample_uv_backward`]: per-texel contributions plus
/// the derivative with respect to the sample point.
#[derive(Debug, Clone, Copy)]
pub struct SampleGrads {
    /// Number of valid entries in `texels`.
    pub count: usize,
    /// `((u, v), per-channel gradient)` for each supporting texel.
    pub texels: [((usize, usize), [f64; 3]); 4],
    /// Gradient with respect to `(u, v)` of the sample point.
    pub dp: (f64, f64),
}

/// Backward pass of [`sample_uv`].
///
/// Texel gradients are the bilinear weights times the upstream gradient.
/// Coordinate gradients are the analytic partials of the interpolant,
/// piecewise-linear in each axis; on integer lines the right-sided derivative
/// is used (floor-based cell), except at the top boundary where only the
/// left-sided one exists. Along an axis of extent 1 the coordinate gradient
/// is 0 (the interpolant is constant there).
pub fn sample_uv_backward(map: &UvMap, p: (f64, f64), upstream: [f64; 3]) -> Result<SampleGrads> {
    let cell = resolve_cell(map, p)?;
    let mut grads = SampleGrads {
        count: 0,
        texels: [((0, 0), [0.0; 3]); 4],
        dp: (0.0, 0.0),
    };
    let u_support = map.u_size >= 2;
    let v_support = map.v_size >= 2;
    let corner = |du: usize, dv: usize| map.get(cell.u0 + du, cell.v0 + dv);

    for (du, wu) in [(0usize, 1.0 - cell.fu), (1, cell.fu)] {
        if du == 1 && !u_support {
            continue;
        }
        for (dv, wv) in [(0usize, 1.0 - cell.fv), (1, cell.fv)] {
            if dv == 1 && !v_support {
                continue;
            }
            let w = wu * wv;
            let mut g = [0.0; 3];
            for c in 0..3 {
                g[c] = w * upstream[c];
            }
            grads.texels[grads.count] = ((cell.u0 + du, cell.v0 + dv), g);
            grads.count += 1;
        }
    }

    if u_support {
        // d value / d u = (1-fv) * (t10 - t00) + fv * (t11 - t01)
        let (t00, t10) = (corner(0, 0), corner(1, 0));
        let mut du = 0.0;
        for c in 0..3 {
            du += upstream[c] * (1.0 - cell.fv) * (t10[c] - t00[c]);
        }
        if v_support {
            let (t01, t11) = (corner(0, 1), corner(1, 1));
            for c in 0..3 {
                du += upstream[c] * cell.fv * (t11[c] - t01[c]);
            }
        }
        grads.dp.0 = du;
    }
    if v_support {
        let (t00, t01) = (corner(0, 0), corner(0, 1));
        let mut dv = 0.0;
        for c in 0..3 {
            dv += upstream[c] * (1.0 - cell.fu) * (t01[c] - t00[c]);
        }
        if u_support {
            let (t10, t11) = (corner(1, 0), corner(1, 1));
            for c in 0..3 {
                dv += upstream[c] * cell.fu * (t11[c] - t10[c]);
            }
        }
        grads.dp.1 = dv;
    }
    Ok(grads)
}
