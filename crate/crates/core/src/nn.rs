//! Named parameters and the layers shared by every encoder.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

/// Parameters of a [`ParamStore`] bound to one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding over caller-provided nodes, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    /// Routes one parameter to a different node.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Accumulates this binding's gradients into `acc` (one tensor per parameter).
    pub fn accumulate(&self, grads: &Gradients, acc: &mut [Tensor]) {
        for (v, a) in self.vars.iter().zip(acc.iter_mut()) {
            if let Some(g) = grads.raw(*v) {
                a.data_mut().iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier(rng, &[fan_in, fan_out], fan_in, fan_out),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x · W + b` for `x: T × fan_in`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), self.eps)
    }
}

/// Post-norm transformer encoder layer.
///
/// Rows of the input are partitioned into independent segments; each segment
/// attends only to itself, plus an optional shared block of memory tokens that
/// serve as extra keys and values but are not themselves updated.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.attn.query"), d_model, d_model, true),
            key: Linear::new(store, rng, &format!("{name}.attn.key"), d_model, d_model, true),
            value: Linear::new(store, rng, &format!("{name}.attn.value"), d_model, d_model, true),
            output: Linear::new(store, rng, &format!("{name}.attn.output"), d_model, d_model, true),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d_model, d_ff, true),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), d_ff, d_model, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            heads,
        })
    }

    /// Runs the layer over `x` (`T × d`). `segments` must tile `0..T` in order.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        segments: &[Range<usize>],
        memory: Option<Var>,
    ) -> Result<Var> {
        let rows = g.shape(x)[0];
        let mut cursor = 0;
        for s in segments {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::Internal(format!("segments do not tile rows: {segments:?}")));
            }
            cursor = s.end;
        }
        if cursor != rows {
            return Err(Error::Internal(format!("segments cover {cursor} of {rows} rows")));
        }
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let mem = match memory {
            Some(m) => Some((self.key.forward(g, p, m)?, self.value.forward(g, p, m)?)),
            None => None,
        };
        let mut outs = Vec::with_capacity(segments.len());
        for s in segments {
            let len = s.end - s.start;
            let qs = g.slice_rows(q, s.start, len)?;
            let mut ks = g.slice_rows(k, s.start, len)?;
            let mut vs = g.slice_rows(v, s.start, len)?;
            if let Some((mk, mv)) = mem {
                ks = g.concat_rows(&[ks, mk])?;
                vs = g.concat_rows(&[vs, mv])?;
            }
            outs.push(g.attention(qs, ks, vs, self.heads)?);
        }
        let attn = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
        let attn = self.output.forward(g, p, attn)?;
        let h = g.add(x, attn)?;
        let h = self.norm1.forward(g, p, h)?;
        let f = self.ff1.forward(g, p, h)?;
        let f = g.relu(f)?;
        let f = self.ff2.forward(g, p, f)?;
        let out = g.add(h, f)?;
        self.norm2.forward(g, p, out)
    }
}

/// Constant `segments.len() × rows` matrix averaging the rows of each segment.
/// Empty segments yield zero rows.
pub fn segment_mean_matrix(segments: &[Range<usize>], rows: usize) -> Tensor {
    let mut data = vec![0.0; segments.len() * rows];
    for (i, s) in segments.iter().enumerate() {
        let len = s.len();
        for r in s.clone() {
            data[i * rows + r] = 1.0 / len as f64;
        }
    }
    Tensor::new(vec![segments.len(), rows], data).expect("segment matrix shape")
}

/// Fixed sinusoidal encoding of integer positions.
pub fn sinusoidal_positions(positions: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("position shape")
}

/// Number of Fourier features produced per point by [`coordinate_features`].
pub const COORD_FEATURES: usize = 16;

/// Fourier features of normalized `(x, y)` points: `sin/cos(π·k·x)`, `sin/cos(π·k·y)`, k = 1..4.
pub fn coordinate_features(points: &[(f64, f64)]) -> Tensor {
    let mut data = Vec::with_capacity(points.len() * COORD_FEATURES);
    for &(x, y) in points {
        for k in 1..=4 {
            let w = std::f64::consts::PI * k as f64;
            data.extend([(w * x).sin(), (w * x).cos(), (w * y).sin(), (w * y).cos()]);
        }
    }
    Tensor::new(vec![points.len(), COORD_FEATURES], data).expect("coordinate shape")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn segment_mean_handles_empty_segments() {
        let m = segment_mean_matrix(&[0..2, 2..2, 2..5], 5);
        assert_eq!(m.shape(), &[3, 5]);
        assert_eq!(m.row_slice(0), &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert!(m.row_slice(1).iter().all(|&v| v == 0.0));
        assert!((m.row_slice(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn encoder_layer_rejects_bad_segments_and_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(EncoderLayer::new(&mut store, &mut rng, "x", 6, 4, 8).is_err());
        let layer = EncoderLayer::new(&mut store, &mut rng, "l", 4, 2, 8).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.leaf(Tensor::full(&[3, 4], 0.5)).unwrap();
        assert!(layer.forward(&mut g, &p, x, &[0..2], None).is_err());
        assert!(layer.forward(&mut g, &p, x, &[0..1, 2..3], None).is_err());
        assert!(layer.forward(&mut g, &p, x, &[0..1, 1..3], None).is_ok());
    }

    #[test]
    fn segments_do_not_interact() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = EncoderLayer::new(&mut store, &mut rng, "l", 4, 2, 8).unwrap();
        let a: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin()).collect();
        let run = |tail: Vec<f64>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g).unwrap();
            let mut data = a.clone();
            data.extend(tail);
            let x = g.leaf(Tensor::new(vec![4, 4], data).unwrap()).unwrap();
            let y = layer.forward(&mut g, &p, x, &[0..2, 2..4], None).unwrap();
            g.value(y).data()[..8].to_vec()
        };
        assert_eq!(run(vec![0.1; 8]), run((0..8).map(|i| i as f64).collect()));
    }
}
