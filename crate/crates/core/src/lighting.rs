//! Real spherical-harmonics Lambertian shading.
//!
//! Shading at a surface point is a linear combination of the first three SH
//! bands (9 basis functions) evaluated at the unit normal, with one
//! coefficient vector per color channel. The shaded texture is the per-texel
//! product of albedo and shading. Negative shading values are allowed; any
//! clamping happens at image write time, never inside the differentiable
//! graph, because clamping would zero gradients.

use crate::error::{Error, Result};
use crate::uv::UvMap;

/// Band-0 constant: 1/(2*sqrt(pi)).
pub const SH_C0: f64 = 0.28209479177387814;
/// Band-1 scale: sqrt(3/(4*pi)); applies to (y, z, x).
pub const SH_C1: f64 = 0.4886025119029199;
/// Band-2 scale for the xy, yz, xz terms: sqrt(15/(4*pi)).
pub const SH_C2: f64 = 1.0925484305920792;
/// Band-2 scale for the 3z^2-1 term: sqrt(5/(16*pi)).
pub const SH_C20: f64 = 0.31539156525252005;
/// Band-2 scale for the x^2-y^2 term: sqrt(15/(16*pi)).
pub const SH_C22: f64 = 0.5462742152960396;

/// Tolerated deviation of |n| from 1 for normals entering the basis.
pub const UNIT_NORMAL_TOL: f64 = 1e-6;

/// 27 lighting coefficients: 3 color channels times 9 SH basis functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShLighting {
    pub coeffs: [[f64; 9]; 3],
}

impl ShLighting {
    pub fn zeros() -> Self {
        ShLighting { coeffs: [[0.0; 9]; 3] }
    }

    /// Pure ambient light: only the band-0 coefficient per channel is set,
    /// so shading is the constant `rgb[c] / (2*sqrt(pi))`.
    pub fn ambient(rgb: [f64; 3]) -> Self {
        let mut l = ShLighting::zeros();
        for c in 0..3 {
            l.coeffs[c][0] = rgb[c];
        }
        l
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            for k in 0..9 {
                if !self.coeffs[c][k].is_finite() {
                    return Err(Error::Domain(format!(
                        "lighting coefficient [{c}][{k}] is not finite"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channel-major, band-minor flattening used by the parameter file format.
    pub fn to_flat(&self) -> [f64; 27] {
        let mut out = [0.0; 27];
        for c in 0..3 {
            out[c * 9..(c + 1) * 9].copy_from_slice(&self.coeffs[c]);
        }
        out
    }

    pub fn from_flat(flat: &[f64; 27]) -> Self {
        let mut l = ShLighting::zeros();
        for c in 0..3 {
            l.coeffs[c].copy_from_slice(&flat[c * 9..(c + 1) * 9]);
        }
        l
    }
}

fn check_unit(n: [f64; 3]) -> Result<()> {
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if !((norm - 1.0).abs() <= UNIT_NORMAL_TOL) {
        return Err(Error::Domain(format!(
            "sh_basis requires a unit normal, got |n| = {norm}"
        )));
    }
    Ok(())
}

/// The 9 real SH basis functions at a unit normal, bands 0 to 2, in the
/// order: 1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2 (each with its constant).
pub fn sh_basis(n: [f64; 3]) -> Result<[f64; 9]> {
    check_unit(n)?;
    let [x, y, z] = n;
    Ok([
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C20 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C22 * (x * x - y * y),
    ])
}

/// Gradient of each basis function with respect to the normal components.
pub fn sh_basis_grad(n: [f64; 3]) -> Result<[[f64; 3]; 9]> {
    check_unit(n)?;
    let [x, y, z] = n;
    Ok([
        [0.0, 0.0, 0.0],
        [0.0, SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [SH_C1, 0.0, 0.0],
        [SH_C2 * y, SH_C2 * x, 0.0],
        [0.0, SH_C2 * z, SH_C2 * y],
        [0.0, 0.0, SH_C20 * 6.0 * z],
        [SH_C2 * z, 0.0, SH_C2 * x],
        [SH_C22 * 2.0 * x, -SH_C22 * 2.0 * y, 0.0],
    ])
}

fn check_aligned(albedo: &UvMap, normals: &UvMap) -> Result<()> {
    if albedo.u_size != normals.u_size || albedo.v_size != normals.v_size {
        return Err(Error::Mismatch(format!(
            "albedo map is {}x{} but normal map is {}x{}",
            albedo.u_size, albedo.v_size, normals.u_size, normals.v_size
        )));
    }
    if albedo.mask != normals.mask {
        return Err(Error::Mismatch(
            "albedo and normal map masks differ".to_string(),
        ));
    }
    Ok(())
}

/// Per-texel shading map: for each masked-in texel, each channel is the dot
/// product of that channel's coefficients with the SH basis at the normal.
pub fn shading_map(normals: &UvMap, light: &ShLighting) -> Result<UvMap> {
    let mut out = UvMap::zeros(normals.u_size, normals.v_size);
    out.mask.copy_from_slice(&normals.mask);
    for t in 0..normals.u_size * normals.v_size {
        if !normals.mask[t] {
            continue;
        }
        let n = [
            normals.data[t * 3],
            normals.data[t * 3 + 1],
            normals.data[t * 3 + 2],
        ];
        let b = sh_basis(n)?;
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..9 {
                acc += light.coeffs[c][k] * b[k];
            }
            out.data[t * 3 + c] = acc;
        }
    }
    Ok(out)
}

/// Shaded texture: per-texel, per-channel product of albedo and shading.
/// The output mask equals the (shared) input mask.
pub fn shade(albedo: &UvMap, normals: &UvMap, light: &ShLighting) -> Result<UvMap> {
    check_aligned(albedo, normals)?;
    let mut out = shading_map(normals, light)?;
    for t in 0..albedo.u_size * albedo.v_size {
        if !albedo.mask[t] {
            continue;
        }
        for c in 0..3 {
            out.data[t * 3 + c] *= albedo.data[t * 3 + c];
        }
    }
    Ok(out)
}

/// Gradients produced by [`shade_backward`]; data layouts match the inputs.
pub struct ShadeGrads {
    pub d_albedo: Vec<f64>,
    pub d_light: [[f64; 9]; 3],
    pub d_normals: Vec<f64>,
}

/// Backward pass of [`shade`] for an upstream gradient on the texture data
/// (length U*V*3, zero expected on masked-out texels).
///
/// The normal gradient is projected onto the tangent plane of the unit
/// sphere: normals are constrained to unit length, so only tangential
/// components are meaningful, and the upstream normalization step in the
/// rendering chain makes the projection idempotent.
pub fn shade_backward(
    albedo: &UvMap,
    normals: &UvMap,
    light: &ShLighting,
    upstream: &[f64],
) -> Result<ShadeGrads> {
    check_aligned(albedo, normals)?;
    let texels = albedo.u_size * albedo.v_size;
    if upstream.len() != texels * 3 {
        return Err(Error::Mismatch(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            texels * 3
        )));
    }
    let mut g = ShadeGrads {
        d_albedo: vec![0.0; texels * 3],
        d_light: [[0.0; 9]; 3],
        d_normals: vec![0.0; texels * 3],
    };
    for t in 0..texels {
        if !albedo.mask[t] {
            continue;
        }
        let n = [
            normals.data[t * 3],
            normals.data[t * 3 + 1],
            normals.data[t * 3 + 2],
        ];
        let b = sh_basis(n)?;
        let db = sh_basis_grad(n)?;
        let mut dn = [0.0; 3];
        for c in 0..3 {
            let up = upstream[t * 3 + c];
            let a = albedo.data[t * 3 + c];
            let mut shading = 0.0;
            for k in 0..9 {
                shading += light.coeffs[c][k] * b[k];
                g.d_light[c][k] += up * a * b[k];
                let w = up * a * light.coeffs[c][k];
                dn[0] += w * db[k][0];
                dn[1] += w * db[k][1];
                dn[2] += w * db[k][2];
            }
            g.d_albedo[t * 3 + c] = up * shading;
        }
        // Project out the radial component; |n| = 1 within tolerance.
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let nh = [n[0] / norm, n[1] / norm, n[2] / norm];
        let radial = dn[0] * nh[0] + dn[1] * nh[1] + dn[2] * nh[2];
        for k in 0..3 {
            g.d_normals[t * 3 + k] = dn[k] - radial * nh[k];
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        // Uniform on the sphere: z uniform in [-1, 1], azimuth uniform.
        let z: f64 = rng.random_range(-1.0..1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        [r * phi.cos(), r * phi.sin(), z]
    }

    fn random_maps(rng: &mut ChaCha8Rng, u: usize, v: usize) -> (UvMap, UvMap) {
        let mut albedo = UvMap::zeros(u, v);
        let mut normals = UvMap::zeros(u, v);
        for t in 0..u * v {
            let masked = rng.random_range(0.0..1.0) < 0.8;
            albedo.mask[t] = masked;
            normals.mask[t] = masked;
            if masked {
                for c in 0..3 {
                    albedo.data[t * 3 + c] = rng.random_range(0.0..1.0);
                }
                let n = random_unit(rng);
                normals.data[t * 3..t * 3 + 3].copy_from_slice(&n);
            }
        }
        (albedo, normals)
    }

    fn random_light(rng: &mut ChaCha8Rng) -> ShLighting {
        let mut l = ShLighting::zeros();
        for c in 0..3 {
            for k in 0..9 {
                l.coeffs[c][k] = rng.random_range(-1.0..1.0);
            }
        }
        l
    }

    #[test]
    fn test_band0_is_inverse_two_sqrt_pi_for_any_unit_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let want = 1.0 / (2.0 * PI.sqrt());
        for _ in 0..20 {
            let b = sh_basis(random_unit(&mut rng)).expect("unit normal");
            assert_relative_eq!(b[0], want, epsilon = 1e-15);
            assert_relative_eq!(b[0], 0.2820948, epsilon = 1e-7);
        }
    }

    #[test]
    fn test_z_axis_normal_activates_only_z_linear_band1_term() {
        let b = sh_basis([0.0, 0.0, 1.0]).expect("unit normal");
        assert_eq!(b[1], 0.0, "y-linear term must vanish");
        assert_relative_eq!(b[2], SH_C1, epsilon = 1e-15);
        assert_eq!(b[3], 0.0, "x-linear term must vanish");
        assert_eq!(b[4], 0.0);
        assert_eq!(b[5], 0.0);
        assert_relative_eq!(b[6], 2.0 * SH_C20, epsilon = 1e-15);
        assert_eq!(b[7], 0.0);
        assert_eq!(b[8], 0.0);
    }

    #[test]
    fn test_diagonal_normal_matches_textbook_formula_evaluation() {
        // Independent per-term evaluation from the closed-form normalization
        // constants, not the frozen numeric constants above.
        let s = 1.0 / 3.0_f64.sqrt();
        let n = [s, s, s];
        let c0 = 0.5 * (1.0 / PI).sqrt();
        let c1 = (3.0 / (4.0 * PI)).sqrt();
        let c2 = (15.0 / (4.0 * PI)).sqrt();
        let c20 = 0.25 * (5.0 / PI).sqrt();
        let c22 = 0.25 * (15.0 / PI).sqrt();
        let want = [
            c0,
            c1 * s,
            c1 * s,
            c1 * s,
            c2 * s * s,
            c2 * s * s,
            c20 * (3.0 * s * s - 1.0),
            c2 * s * s,
            c22 * (s * s - s * s),
        ];
        let got = sh_basis(n).expect("unit normal");
        for k in 0..9 {
            assert_relative_eq!(got[k], want[k], epsilon = 1e-14);
        }
        assert_relative_eq!(got[6], 0.0, epsilon = 1e-15);
        assert_eq!(got[8], 0.0, "x^2 - y^2 vanishes on the diagonal");
    }

    #[test]
    fn test_non_unit_normal_is_domain_error() {
        assert!(matches!(
            sh_basis([0.0, 0.0, 2.0]),
            Err(crate::error::Error::Domain(_))
        ));
        assert!(matches!(
            sh_basis([0.0, 0.0, 0.0]),
            Err(crate::error::Error::Domain(_))
        ));
        assert!(sh_basis([0.0, 0.0, 1.0 + 5e-7]).is_ok(), "tolerance is 1e-6");
    }

    #[test]
    fn test_basis_grad_matches_finite_differences_without_renormalization() {
        // The raw basis is a polynomial in n; its gradient is checked off the
        // sphere constraint by comparing unconstrained central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = 1e-6;
        for _ in 0..20 {
            let n = random_unit(&mut rng);
            let grad = sh_basis_grad(n).expect("unit normal");
            for k in 0..9 {
                for axis in 0..3 {
                    let mut plus = n;
                    plus[axis] += h;
                    let mut minus = n;
                    minus[axis] -= h;
                    // Evaluate the polynomial directly; perturbed n is not unit.
                    let poly = |m: [f64; 3]| -> f64 {
                        let [x, y, z] = m;
                        [
                            SH_C0,
                            SH_C1 * y,
                            SH_C1 * z,
                            SH_C1 * x,
                            SH_C2 * x * y,
                            SH_C2 * y * z,
                            SH_C20 * (3.0 * z * z - 1.0),
                            SH_C2 * x * z,
                            SH_C22 * (x * x - y * y),
                        ][k]
                    };
                    let fd = (poly(plus) - poly(minus)) / (2.0 * h);
                    assert_relative_eq!(grad[k][axis], fd, max_relative = 1e-6, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn test_monte_carlo_orthonormality_of_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let samples = 100_000;
        let mut gram = [[0.0; 9]; 9];
        for _ in 0..samples {
            let b = sh_basis(random_unit(&mut rng)).expect("unit normal");
            for i in 0..9 {
                for j in 0..9 {
                    gram[i][j] += b[i] * b[j];
                }
            }
        }
        let scale = 4.0 * PI / samples as f64;
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = gram[i][j] * scale;
                assert!(
                    (got - want).abs() < 2e-2,
                    "gram[{i}][{j}] = {got}, want {want} within 2e-2"
                );
            }
        }
    }

    #[test]
    fn test_ambient_light_shades_albedo_by_constant_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (albedo, normals) = random_maps(&mut rng, 5, 4);
        let light = ShLighting::ambient([0.9, 0.9, 0.9]);
        let tex = shade(&albedo, &normals, &light).expect("aligned maps");
        let factor = 0.9 / (2.0 * PI.sqrt());
        for t in 0..20 {
            for c in 0..3 {
                if albedo.mask[t] {
                    assert_relative_eq!(
                        tex.data[t * 3 + c],
                        albedo.data[t * 3 + c] * factor,
                        epsilon = 1e-15
                    );
                }
            }
        }
    }

    #[test]
    fn test_zero_albedo_gives_zero_texture() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (mut albedo, normals) = random_maps(&mut rng, 4, 4);
        albedo.data.iter_mut().for_each(|v| *v = 0.0);
        let light = random_light(&mut rng);
        let tex = shade(&albedo, &normals, &light).expect("aligned maps");
        assert!(tex.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn test_shade_matches_scalar_loop_oracle_on_4x4_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (albedo, normals) = random_maps(&mut rng, 4, 4);
        let light = random_light(&mut rng);
        let tex = shade(&albedo, &normals, &light).expect("aligned maps");
        // Oracle: per-texel scalar evaluation with textbook constants.
        let c0 = 0.5 * (1.0 / PI).sqrt();
        let c1 = (3.0 / (4.0 * PI)).sqrt();
        let c2 = (15.0 / (4.0 * PI)).sqrt();
        let c20 = 0.25 * (5.0 / PI).sqrt();
        let c22 = 0.25 * (15.0 / PI).sqrt();
        for t in 0..16 {
            if !albedo.mask[t] {
                for c in 0..3 {
                    assert_eq!(tex.data[t * 3 + c], 0.0);
                }
                continue;
            }
            let (x, y, z) = (
                normals.data[t * 3],
                normals.data[t * 3 + 1],
                normals.data[t * 3 + 2],
            );
            let basis = [
                c0,
                c1 * y,
                c1 * z,
                c1 * x,
                c2 * x * y,
                c2 * y * z,
                c20 * (3.0 * z * z - 1.0),
                c2 * x * z,
                c22 * (x * x - y * y),
            ];
            for c in 0..3 {
                let mut shading = 0.0;
                for k in 0..9 {
                    shading += light.coeffs[c][k] * basis[k];
                }
                let want = albedo.data[t * 3 + c] * shading;
                assert_relative_eq!(tex.data[t * 3 + c], want, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn test_shade_is_linear_in_lighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (albedo, normals) = random_maps(&mut rng, 4, 4);
        let l1 = random_light(&mut rng);
        let l2 = random_light(&mut rng);
        let mut sum = ShLighting::zeros();
        for c in 0..3 {
            for k in 0..9 {
                sum.coeffs[c][k] = l1.coeffs[c][k] + l2.coeffs[c][k];
            }
        }
        let t1 = shade(&albedo, &normals, &l1).expect("aligned");
        let t2 = shade(&albedo, &normals, &l2).expect("aligned");
        let ts = shade(&albedo, &normals, &sum).expect("aligned");
        for i in 0..ts.data.len() {
            assert_relative_eq!(ts.data[i], t1.data[i] + t2.data[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn test_mask_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (albedo, mut normals) = random_maps(&mut rng, 3, 3);
        let flip = albedo.mask.iter().position(|m| *m).expect("some texel masked in");
        normals.mask[flip] = false;
        assert!(matches!(
            shade(&albedo, &normals, &ShLighting::zeros()),
            Err(crate::error::Error::Mismatch(_))
        ));
    }

    #[test]
    fn test_backward_zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (albedo, normals) = random_maps(&mut rng, 3, 3);
        let light = random_light(&mut rng);
        let g = shade_backward(&albedo, &normals, &light, &vec![0.0; 27]).expect("aligned");
        assert!(g.d_albedo.iter().all(|v| *v == 0.0));
        assert!(g.d_normals.iter().all(|v| *v == 0.0));
        assert_eq!(g.d_light, [[0.0; 9]; 3]);
    }

    #[test]
    fn test_backward_ambient_light_gives_zero_normal_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let (albedo, normals) = random_maps(&mut rng, 3, 3);
        let light = ShLighting::ambient([1.0, 0.5, 0.25]);
        let upstream: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = shade_backward(&albedo, &normals, &light, &upstream).expect("aligned");
        assert!(
            g.d_normals.iter().all(|v| v.abs() < 1e-15),
            "band 0 is constant in the normal"
        );
    }

    #[test]
    fn test_shade_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-6;
        for _ in 0..50 {
            let (albedo, normals) = random_maps(&mut rng, 3, 2);
            let light = random_light(&mut rng);
            let upstream: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scalar = |a: &UvMap, n: &UvMap, l: &ShLighting| -> f64 {
                let tex = shade(a, n, l).expect("aligned");
                tex.data.iter().zip(&upstream).map(|(t, u)| t * u).sum()
            };
            let g = shade_backward(&albedo, &normals, &light, &upstream).expect("aligned");
            // Albedo path (exact linear dependence).
            for t in 0..6 {
                if !albedo.mask[t] {
                    continue;
                }
                for c in 0..3 {
                    let mut plus = albedo.clone();
                    plus.data[t * 3 + c] += h;
                    let mut minus = albedo.clone();
                    minus.data[t * 3 + c] -= h;
                    let fd = (scalar(&plus, &normals, &light) - scalar(&minus, &normals, &light))
                        / (2.0 * h);
                    assert_relative_eq!(
                        g.d_albedo[t * 3 + c],
                        fd,
                        max_relative = 1e-5,
                        epsilon = 1e-9
                    );
                }
            }
            // Lighting path.
            for c in 0..3 {
                for k in 0..9 {
                    let mut plus = light;
                    plus.coeffs[c][k] += h;
                    let mut minus = light;
                    minus.coeffs[c][k] -= h;
                    let fd = (scalar(&albedo, &normals, &plus) - scalar(&albedo, &normals, &minus))
                        / (2.0 * h);
                    assert_relative_eq!(
                        g.d_light[c][k],
                        fd,
                        max_relative = 1e-5,
                        epsilon = 1e-9
                    );
                }
            }
            // Normal path: perturb then renormalize, so the finite difference
            // lives on the sphere and matches the tangent-projected gradient.
            for t in 0..6 {
                if !normals.mask[t] {
                    continue;
                }
                for axis in 0..3 {
                    let renorm = |nm: &UvMap| -> UvMap {
                        let mut out = nm.clone();
                        let base = t * 3;
                        let v = [out.data[base], out.data[base + 1], out.data[base + 2]];
                        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        for k in 0..3 {
                            out.data[base + k] = v[k] / norm;
                        }
                        out
                    };
                    let mut plus = normals.clone();
                    plus.data[t * 3 + axis] += h;
                    let plus = renorm(&plus);
                    let mut minus = normals.clone();
                    minus.data[t * 3 + axis] -= h;
                    let minus = renorm(&minus);
                    let fd = (scalar(&albedo, &plus, &light) - scalar(&albedo, &minus, &light))
                        / (2.0 * h);
                    assert_relative_eq!(
                        g.d_normals[t * 3 + axis],
                        fd,
                        max_relative = 1e-4,
                        epsilon = 1e-8
                    );
                }
            }
        }
    }

    #[test]
    fn test_lighting_flat_round_trip_is_channel_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let l = random_light(&mut rng);
        let flat = l.to_flat();
        assert_eq!(flat[0], l.coeffs[0][0]);
        assert_eq!(flat[9], l.coeffs[1][0]);
        assert_eq!(flat[26], l.coeffs[2][8]);
        assert_eq!(ShLighting::from_flat(&flat), l);
    }
}
