//! The full per-frame network: encoders, fusion, CorrelationNet and the
//! classification head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::contrastive::{ProjectionConfig, ProjectionHead};
use crate::correlation::{build_neighbor_graph, CorrelationConfig, CorrelationNet};
use crate::data::{BoxCoords, DatasetConfig, FrameSample, NUM_CLASSES};
use crate::encoders::{TextConfig, TextEncoder, VisualConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse, CrossAttention, FusionConfig, RoiConfig};
use crate::nn::{Bound, Linear, ParamStore};
use crate::rng::{stream, MODEL_INIT};
use crate::tensor::Tensor;

/// Architecture hyperparameters independent of the dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub visual: VisualConfig,
    pub text: TextConfig,
    pub roi: RoiConfig,
    pub fusion: FusionConfig,
    pub correlation: CorrelationConfig,
    /// Heads that map embeddings into the contrastive space.
    pub projection: ProjectionConfig,
}

impl ArchConfig {
    /// Widths of the original setup (text encoder 4 × 768, fusion 2 × 256 with 8 heads).
    pub fn full_scale() -> Self {
        Self {
            text: TextConfig {
                d_text: 768,
                layers: 4,
                heads: 12,
                d_ff: 3072,
            },
            fusion: FusionConfig {
                d_model: 256,
                layers: 2,
                heads: 8,
                d_ff: 1024,
                d_vis: 256,
            },
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub vocab_size: usize,
    pub arch: ArchConfig,
}

impl ModelConfig {
    pub fn for_dataset(arch: &ArchConfig, data: &DatasetConfig) -> Self {
        Self {
            frame_height: data.frame_height,
            frame_width: data.frame_width,
            vocab_size: data.vocab_size,
            arch: arch.clone(),
        }
    }

    pub fn d_fused(&self) -> usize {
        self.arch.fusion.d_vis + self.arch.text.d_text
    }
}

/// Inputs removed for an ablation. Dropped modalities are replaced by zeros at
/// the fusion boundary so every variant shares one architecture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputMask {
    pub drop_cv: bool,
    pub drop_nlp: bool,
    pub drop_pos: bool,
    pub drop_correlation: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    /// `n × d_vis`, absent when the visual modality is dropped.
    pub f_vis: Option<Var>,
    /// `n × d_text`, absent when the text modality is dropped.
    pub f_text: Option<Var>,
    /// `n × d_fused`.
    pub fused: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FrameOutput {
    pub embeddings: Embeddings,
    /// `n × 2·d_fused`.
    pub final_features: Var,
    /// `n × 4`.
    pub logits: Var,
    pub weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Cgmm {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub fusion: CrossAttention,
    pub correlation: CorrelationNet,
    pub head: Linear,
    pub proj_visual: ProjectionHead,
    pub proj_text: ProjectionHead,
}

impl Cgmm {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, MODEL_INIT, 0);
        let mut store = ParamStore::new();
        let a = &config.arch;
        a.roi.validate()?;
        let min_extent = a.roi.out_height.max(a.roi.out_width);
        let visual = VisualEncoder::new(&mut store, &mut rng, &a.visual, config.frame_height, config.frame_width, min_extent)?;
        let text = TextEncoder::new(&mut store, &mut rng, &a.text, config.vocab_size)?;
        let fusion = CrossAttention::new(&mut store, &mut rng, &a.fusion, &a.roi, visual.out_channels)?;
        let d_fused = config.d_fused();
        let correlation = CorrelationNet::new(&mut store, &mut rng, &a.correlation, d_fused)?;
        let head = Linear::new(&mut store, &mut rng, "head", 2 * d_fused, NUM_CLASSES, true);
        let proj_visual = ProjectionHead::new(&mut store, &mut rng, "proj_visual", a.fusion.d_vis, &a.projection)?;
        let proj_text = ProjectionHead::new(&mut store, &mut rng, "proj_text", a.text.d_text, &a.projection)?;
        Ok(Self {
            config: config.clone(),
            store,
            visual,
            text,
            fusion,
            correlation,
            head,
            proj_visual,
            proj_text,
        })
    }

    pub fn d_fused(&self) -> usize {
        self.config.d_fused()
    }

    /// Parameters trained by contrastive pre-training: everything before
    /// CorrelationNet, plus the projection heads.
    pub fn is_encoder_param(name: &str) -> bool {
        ["visual.", "text.", "fusion.", "proj_visual.", "proj_text."].iter().any(|p| name.starts_with(p))
    }

    pub fn boxes(sample: &FrameSample, mask: &InputMask) -> Vec<BoxCoords> {
        sample
            .boxes
            .iter()
            .map(|b| if mask.drop_pos { BoxCoords::FULL_FRAME } else { b.coords })
            .collect()
    }

    /// Per-box fused features.
    pub fn embed(&self, g: &mut Graph, p: &Bound, sample: &FrameSample, mask: &InputMask) -> Result<Embeddings> {
        let n = sample.boxes.len();
        if n == 0 {
            return Err(Error::Data("frame has no text boxes".into()));
        }
        let boxes = Self::boxes(sample, mask);
        let f_vis = if mask.drop_cv {
            None
        } else {
            let frame = g.constant(sample.frame.clone())?;
            let map = self.visual.encode(g, p, frame)?;
            let tokens = self.fusion.frame_tokens(g, p, &map)?;
            Some(self.fusion.forward(g, p, &map, tokens, &boxes)?)
        };
        let f_text = if mask.drop_nlp {
            None
        } else {
            let seqs: Vec<&[u32]> = sample.boxes.iter().map(|b| b.tokens.as_slice()).collect();
            Some(self.text.encode(g, p, &seqs)?)
        };
        let vis = match f_vis {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[n, self.config.arch.fusion.d_vis]))?,
        };
        let text = match f_text {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[n, self.config.arch.text.d_text]))?,
        };
        let fused = fuse(g, vis, text)?;
        Ok(Embeddings { f_vis, f_text, fused })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, sample: &FrameSample, mask: &InputMask) -> Result<FrameOutput> {
        let embeddings = self.embed(g, p, sample, mask)?;
        let (final_features, weights) = if mask.drop_correlation {
            (self.correlation.bypass(g, embeddings.fused)?, None)
        } else {
            let graph = build_neighbor_graph(&Self::boxes(sample, mask), self.config.arch.correlation.max_neighbors);
            let out = self.correlation.forward(g, p, embeddings.fused, &graph)?;
            (out.features, out.weights)
        };
        let logits = self.head.forward(g, p, final_features)?;
        Ok(FrameOutput {
            embeddings,
            final_features,
            logits,
            weights,
        })
    }

    /// Head logits of one frame, `n × 4`.
    pub fn logits(&self, sample: &FrameSample, mask: &InputMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g)?;
        let out = self.forward(&mut g, &p, sample, mask)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn predict(&self, sample: &FrameSample, mask: &InputMask) -> Result<Vec<usize>> {
        let logits = self.logits(sample, mask)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row_slice(r);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }

    /// Checks that the model can consume samples of `data`.
    pub fn check_dataset(&self, data: &DatasetConfig) -> Result<()> {
        let c = &self.config;
        if (c.frame_height, c.frame_width) != (data.frame_height, data.frame_width) || c.vocab_size != data.vocab_size {
            return Err(Error::Config(format!(
                "model expects {}x{} frames and {} tokens, dataset has {}x{} and {}",
                c.frame_height, c.frame_width, c.vocab_size, data.frame_height, data.frame_width, data.vocab_size
            )));
        }
        Ok(())
    }
}
