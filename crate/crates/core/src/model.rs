//! Morphable-model containers: a linear mean-plus-bases decoder for shape
//! and albedo, a decoder interface that admits nonlinear drop-ins, and a
//! tiny fixed-weight perceptron exercising that interface in tests.

use crate::error::{Error, Result};
use crate::mesh::VertexShape;
use crate::uv::UvMap;

/// Deterministic map from a parameter vector to a flat output (vertex
/// coordinates or UV texel data), with the matching vector-Jacobian product.
pub trait Decoder {
    fn param_dim(&self) -> usize;
    fn output_len(&self) -> usize;
    fn decode(&self, params: &[f64]) -> Result<Vec<f64>>;
    /// Upstream gradient on the output pulled back to the parameters.
    fn decode_backward(&self, params: &[f64], upstream: &[f64]) -> Result<Vec<f64>>;
}

/// Mean vector plus a basis matrix: output = mean + bases * params.
///
/// `bases` is row-major with one row per output entry and one column per
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub mean: Vec<f64>,
    pub bases: Vec<f64>,
    pub param_dim: usize,
}

impl LinearModel {
    pub fn new(mean: Vec<f64>, bases: Vec<f64>, param_dim: usize) -> Result<Self> {
        if param_dim == 0 {
            return Err(Error::Domain("a model needs at least one parameter".into()));
        }
        if bases.len() != mean.len() * param_dim {
            return Err(Error::Mismatch(format!(
                "basis matrix has {} entries, expected {} rows x {} columns",
                bases.len(),
                mean.len(),
                param_dim
            )));
        }
        Ok(LinearModel { mean, bases, param_dim })
    }

    pub fn output_len(&self) -> usize {
        self.mean.len()
    }

    /// The same model restricted to its first `k` basis columns.
    pub fn truncated(&self, k: usize) -> Result<LinearModel> {
        if k == 0 || k > self.param_dim {
            return Err(Error::OutOfRange(format!(
                "cannot keep {k} of {} basis columns",
                self.param_dim
            )));
        }
        let rows = self.mean.len();
        let mut bases = Vec::with_capacity(rows * k);
        for r in 0..rows {
            bases.extend_from_slice(&self.bases[r * self.param_dim..r * self.param_dim + k]);
        }
        LinearModel::new(self.mean.clone(), bases, k)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_dim {
            return Err(Error::Mismatch(format!(
                "{} parameters supplied, model expects {}",
                params.len(),
                self.param_dim
            )));
        }
        Ok(())
    }
}

impl Decoder for LinearModel {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn output_len(&self) -> usize {
        self.mean.len()
    }

    fn decode(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let mut out = self.mean.clone();
        for r in 0..out.len() {
            let row = &self.bases[r * self.param_dim..(r + 1) * self.param_dim];
            let mut acc = 0.0;
            for (b, p) in row.iter().zip(params) {
                acc += b * p;
            }
            out[r] += acc;
        }
        Ok(out)
    }

    fn decode_backward(&self, params: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if upstream.len() != self.mean.len() {
            return Err(Error::Mismatch(format!(
                "upstream gradient has {} entries, output has {}",
                upstream.len(),
                self.mean.len()
            )));
        }
        let mut grad = vec![0.0; self.param_dim];
        for r in 0..upstream.len() {
            let g = upstream[r];
            if g == 0.0 {
                continue;
            }
            let row = &self.bases[r * self.param_dim..(r + 1) * self.param_dim];
            for (k, b) in row.iter().enumerate() {
                grad[k] += b * g;
            }
        }
        Ok(grad)
    }
}

/// Decode a parameter vector to vertex positions ([x, y, z] triples).
pub fn decode_shape(dec: &dyn Decoder, params: &[f64]) -> Result<VertexShape> {
    let flat = dec.decode(params)?;
    VertexShape::from_flat(&flat)
}

/// Flatten per-vertex gradients into the layout `decode_backward` expects.
pub fn flatten_vertex_grads(d_vertices: &[[f64; 3]]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(d_vertices.len() * 3);
    for v in d_vertices {
        flat.extend_from_slice(v);
    }
    flat
}

/// Decode a parameter vector to a fully masked-in UV albedo map.
pub fn decode_albedo(
    dec: &dyn Decoder,
    params: &[f64],
    u_size: usize,
    v_size: usize,
) -> Result<UvMap> {
    let flat = dec.decode(params)?;
    if flat.len() != u_size * v_size * 3 {
        return Err(Error::Mismatch(format!(
            "decoder produced {} values, a {u_size}x{v_size} RGB map needs {}",
            flat.len(),
            u_size * v_size * 3
        )));
    }
    UvMap::from_parts(u_size, v_size, flat, vec![true; u_size * v_size])
}

/// Two-layer tanh perceptron with fixed pseudo-random weights. It stands in
/// for learned nonlinear decoders in interface and gradient tests; it claims
/// no modeling power.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    pub param_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TinyMlp {
    pub fn seeded(param_dim: usize, hidden_dim: usize, out_dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-scale..scale)).collect()
        };
        TinyMlp {
            param_dim,
            hidden_dim,
            out_dim,
            w1: draw(hidden_dim * param_dim, 0.8),
            b1: draw(hidden_dim, 0.3),
            w2: draw(out_dim * hidden_dim, 0.8),
            b2: draw(out_dim, 0.3),
        }
    }

    fn hidden(&self, params: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_dim];
        for j in 0..self.hidden_dim {
            let mut acc = self.b1[j];
            for (k, p) in params.iter().enumerate() {
                acc += self.w1[j * self.param_dim + k] * p;
            }
            h[j] = acc.tanh();
        }
        h
    }
}

impl Decoder for TinyMlp {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn output_len(&self) -> usize {
        self.out_dim
    }

    fn decode(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.param_dim {
            return Err(Error::Mismatch(format!(
                "{} parameters supplied, decoder expects {}",
                params.len(),
                self.param_dim
            )));
        }
        let h = self.hidden(params);
        let mut out = vec![0.0; self.out_dim];
        for i in 0..self.out_dim {
            let mut acc = self.b2[i];
            for (j, hj) in h.iter().enumerate() {
                acc += self.w2[i * self.hidden_dim + j] * hj;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    fn decode_backward(&self, params: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.param_dim {
            return Err(Error::Mismatch(format!(
                "{} parameters supplied, decoder expects {}",
                params.len(),
                self.param_dim
            )));
        }
        if upstream.len() != self.out_dim {
            return Err(Error::Mismatch(format!(
                "upstream gradient has {} entries, output has {}",
                upstream.len(),
                self.out_dim
            )));
        }
        let h = self.hidden(params);
        // Pull back through the linear output layer.
        let mut dh = vec![0.0; self.hidden_dim];
        for i in 0..self.out_dim {
            for j in 0..self.hidden_dim {
                dh[j] += self.w2[i * self.hidden_dim + j] * upstream[i];
            }
        }
        // Through tanh: d pre-activation = (1 - h^2) dh.
        let mut grad = vec![0.0; self.param_dim];
        for j in 0..self.hidden_dim {
            let dpre = (1.0 - h[j] * h[j]) * dh[j];
            for k in 0..self.param_dim {
                grad[k] += self.w1[j * self.param_dim + k] * dpre;
            }
        }
        Ok(grad)
    }
}
