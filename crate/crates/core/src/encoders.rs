//! Unimodal encoders: a shallow CNN over the frame, a small transformer over
//! box tokens, and the box coordinates themselves.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{BoxCoords, PAD};
use crate::error::{Error, Result};
use crate::nn::{segment_mean_matrix, sinusoidal_positions, uniform, xavier, Bound, EncoderLayer, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    /// Output channels of the stride-2 stages.
    pub channels: Vec<usize>,
    /// Extra stride-1 stages appended for the deeper backbone variant.
    pub extra_stages: usize,
    pub kernel_size: usize,
    pub bias: bool,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            extra_stages: 0,
            kernel_size: 3,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stage {
    kernel: ParamId,
    bias: Option<ParamId>,
    stride: usize,
}

/// Feature map of one frame plus the geometry needed to map normalized frame
/// coordinates onto it.
#[derive(Debug, Clone, Copy)]
pub struct VisualFeatureMap {
    /// `C × H_f × W_f`.
    pub values: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl VisualFeatureMap {
    /// Continuous feature-map coordinate `(u, v)` of a normalized point; cell
    /// `(i, j)` has its center at `(j, i)`.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.width as f64 - 0.5, y * self.height as f64 - 0.5)
    }

    /// Normalized frame coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    pub frame_height: usize,
    pub frame_width: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    stages: Vec<Stage>,
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl VisualEncoder {
    /// Builds the backbone for frames of `frame_height × frame_width`; the
    /// resulting map must be at least `min_extent` in both directions.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &VisualConfig,
        frame_height: usize,
        frame_width: usize,
        min_extent: usize,
    ) -> Result<Self> {
        if config.channels.is_empty() || config.kernel_size == 0 || config.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "visual encoder needs at least one stage and an odd kernel, got {:?} / {}",
                config.channels, config.kernel_size
            )));
        }
        let k = config.kernel_size;
        let pad = k / 2;
        let (mut c, mut h, mut w) = (3, frame_height, frame_width);
        let mut stages = Vec::new();
        let last = *config.channels.last().expect("non-empty");
        let plan = config
            .channels
            .iter()
            .map(|&f| (f, 2))
            .chain(std::iter::repeat_n((last, 1), config.extra_stages));
        for (i, (f, stride)) in plan.enumerate() {
            let (nh, nw) = match (out_extent(h, k, stride, pad), out_extent(w, k, stride, pad)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => {
                    return Err(Error::Config(format!(
                        "frame {frame_height}x{frame_width} is too small for visual stage {i}"
                    )))
                }
            };
            let fan_in = c * k * k;
            let kernel = store.add(
                format!("visual.conv{i}.weight"),
                xavier(rng, &[f, c, k, k], fan_in, f * k * k),
            );
            let bias = config
                .bias
                .then(|| store.add(format!("visual.conv{i}.bias"), Tensor::zeros(&[f])));
            stages.push(Stage { kernel, bias, stride });
            (c, h, w) = (f, nh, nw);
        }
        if h < min_extent || w < min_extent {
            return Err(Error::Config(format!(
                "frame {frame_height}x{frame_width} yields a {h}x{w} feature map, smaller than {min_extent}"
            )));
        }
        Ok(Self {
            config: config.clone(),
            frame_height,
            frame_width,
            out_channels: c,
            out_height: h,
            out_width: w,
            stages,
        })
    }

    /// Conv + ReLU stages over a `3 × H × W` frame.
    pub fn encode(&self, g: &mut Graph, p: &Bound, frame: Var) -> Result<VisualFeatureMap> {
        if g.shape(frame) != [3, self.frame_height, self.frame_width] {
            return Err(Error::Config(format!(
                "frame shape {:?} does not match configured 3x{}x{}",
                g.shape(frame),
                self.frame_height,
                self.frame_width
            )));
        }
        let pad = self.config.kernel_size / 2;
        let mut x = frame;
        for s in &self.stages {
            let y = g.conv2d(x, p.var(s.kernel), s.bias.map(|b| p.var(b)), s.stride, pad)?;
            x = g.relu(y)?;
        }
        Ok(VisualFeatureMap {
            values: x,
            channels: self.out_channels,
            height: self.out_height,
            width: self.out_width,
        })
    }

    /// Pre-activation output of the first stage (diagnostics and tests).
    pub fn first_stage(&self, g: &mut Graph, p: &Bound, frame: Var) -> Result<Var> {
        let s = self.stages[0];
        g.conv2d(frame, p.var(s.kernel), s.bias.map(|b| p.var(b)), s.stride, self.config.kernel_size / 2)
    }
}

/// Convenience wrapper: runs the encoder on a constant frame.
pub fn encode_visual(enc: &VisualEncoder, store: &ParamStore, frame: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g)?;
    let f = g.constant(frame.clone())?;
    let map = enc.encode(&mut g, &p, f)?;
    Ok(g.value(map.values).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub d_text: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            layers: 2,
            heads: 4,
            d_ff: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab_size: usize,
    pub embedding: ParamId,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &TextConfig, vocab_size: usize) -> Result<Self> {
        if config.d_text == 0 || vocab_size < 2 {
            return Err(Error::Config("text encoder needs d_text > 0 and a vocabulary".into()));
        }
        let embedding = store.add("text.embedding", uniform(rng, &[vocab_size, config.d_text], 0.5));
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("text.layer{i}"), config.d_text, config.heads, config.d_ff))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            vocab_size,
            embedding,
            layers,
        })
    }

    /// Encodes a batch of token sequences into `n × d_text`. PAD positions are
    /// dropped before attention, so they can neither attend nor be attended
    /// to; an all-PAD sequence pools to the zero vector.
    pub fn encode(&self, g: &mut Graph, p: &Bound, sequences: &[&[u32]]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans: Vec<Range<usize>> = Vec::with_capacity(sequences.len());
        for (r, seq) in sequences.iter().enumerate() {
            let start = ids.len();
            for (pos, &t) in seq.iter().enumerate() {
                if t as usize >= self.vocab_size {
                    return Err(Error::Data(format!(
                        "token id {t} in sequence {r} is outside the vocabulary of {}",
                        self.vocab_size
                    )));
                }
                if t != PAD {
                    ids.push(t as usize);
                    positions.push(pos);
                }
            }
            spans.push(start..ids.len());
        }
        let d = self.config.d_text;
        if ids.is_empty() {
            return g.constant(Tensor::zeros(&[sequences.len(), d]));
        }
        let emb = g.gather_rows(p.var(self.embedding), &ids)?;
        let pos = g.constant(sinusoidal_positions(&positions, d))?;
        let mut x = g.add(emb, pos)?;
        let segments: Vec<Range<usize>> = spans.iter().filter(|s| !s.is_empty()).cloned().collect();
        for layer in &self.layers {
            x = layer.forward(g, p, x, &segments, None)?;
        }
        let pool = g.constant(segment_mean_matrix(&spans, ids.len()))?;
        g.matmul(pool, x)
    }
}

/// Convenience wrapper returning one row per sequence.
pub fn encode_text(enc: &TextEncoder, store: &ParamStore, sequences: &[&[u32]]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g)?;
    let v = enc.encode(&mut g, &p, sequences)?;
    Ok(g.value(v).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionFeature {
    pub values: [f64; 4],
}

pub fn encode_position(b: &BoxCoords) -> PositionFeature {
    PositionFeature { values: b.to_array() }
}
