//! Patch extraction and frame/patch cross-attention producing the per-box
//! visual feature, then concatenation with the text feature.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SparseMap, Var};
use crate::data::BoxCoords;
use crate::encoders::VisualFeatureMap;
use crate::error::{Error, Result};
use crate::nn::{coordinate_features, segment_mean_matrix, xavier, Bound, EncoderLayer, Linear, ParamId, ParamStore, COORD_FEATURES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub out_height: usize,
    pub out_width: usize,
    pub samples_per_bin: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            out_height: 3,
            out_width: 3,
            samples_per_bin: 2,
        }
    }
}

impl RoiConfig {
    pub fn bins(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_height == 0 || self.out_width == 0 || self.samples_per_bin == 0 {
            return Err(Error::Config(format!("invalid roi configuration {self:?}")));
        }
        Ok(())
    }
}

/// Bilinear weights of the point `(u, v)` (feature-cell units) over an
/// `h × w` grid. Points more than one cell outside the grid contribute nothing;
/// points in the border band are clamped onto the edge cells.
pub fn bilinear_weights(u: f64, v: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    if v < -1.0 || v > h as f64 || u < -1.0 || u > w as f64 {
        return Vec::new();
    }
    let axis = |t: f64, n: usize| -> (usize, usize, f64) {
        let t = t.max(0.0);
        let lo = t.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, t - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(v, h);
    let (x0, x1, lx) = axis(u, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

/// Spatial sampling weights of every output bin (row-major) for one box.
pub fn roi_bins(b: &BoxCoords, h: usize, w: usize, cfg: &RoiConfig) -> Result<Vec<Vec<(usize, f64)>>> {
    cfg.validate()?;
    b.validate()?;
    let (u0, v0) = (b.x0 * w as f64 - 0.5, b.y0 * h as f64 - 0.5);
    let (u1, v1) = (b.x1 * w as f64 - 0.5, b.y1 * h as f64 - 0.5);
    let (rw, rh) = (u1 - u0, v1 - v0);
    if rw <= 0.0 || rh <= 0.0 || !rw.is_finite() || !rh.is_finite() {
        return Err(Error::Data(format!("box {:?} has zero area on the feature map", b.to_array())));
    }
    let s = cfg.samples_per_bin;
    let (bw, bh) = (rw / cfg.out_width as f64, rh / cfg.out_height as f64);
    let norm = 1.0 / (s * s) as f64;
    let mut bins = Vec::with_capacity(cfg.bins());
    for py in 0..cfg.out_height {
        for px in 0..cfg.out_width {
            let mut acc: Vec<(usize, f64)> = Vec::with_capacity(4 * s * s);
            for iy in 0..s {
                let v = v0 + py as f64 * bh + (iy as f64 + 0.5) * bh / s as f64;
                for ix in 0..s {
                    let u = u0 + px as f64 * bw + (ix as f64 + 0.5) * bw / s as f64;
                    acc.extend(bilinear_weights(u, v, h, w).into_iter().map(|(c, wt)| (c, wt * norm)));
                }
            }
            acc.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
            for (c, wt) in acc {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += wt,
                    _ => merged.push((c, wt)),
                }
            }
            merged.retain(|e| e.1 != 0.0);
            bins.push(merged);
        }
    }
    Ok(bins)
}

/// Normalized centers of the output bins of a box, row-major.
pub fn bin_centers(b: &BoxCoords, cfg: &RoiConfig) -> Vec<(f64, f64)> {
    let (bw, bh) = ((b.x1 - b.x0) / cfg.out_width as f64, (b.y1 - b.y0) / cfg.out_height as f64);
    (0..cfg.out_height)
        .flat_map(|py| {
            (0..cfg.out_width).map(move |px| (b.x0 + (px as f64 + 0.5) * bw, b.y0 + (py as f64 + 0.5) * bh))
        })
        .collect()
}

/// Sparse map from a `C × H × W` feature map to the patches of `boxes`,
/// laid out as `(boxes · bins) × C` token rows.
pub fn roi_token_map(channels: usize, h: usize, w: usize, boxes: &[BoxCoords], cfg: &RoiConfig) -> Result<SparseMap> {
    let plane = h * w;
    let bins = cfg.bins();
    let mut entries = Vec::with_capacity(boxes.len() * bins * channels);
    for b in boxes {
        for bin in roi_bins(b, h, w, cfg)? {
            for c in 0..channels {
                entries.push(bin.iter().map(|&(cell, wt)| (c * plane + cell, wt)).collect());
            }
        }
    }
    Ok(SparseMap {
        input_len: channels * plane,
        out_shape: vec![boxes.len() * bins, channels],
        entries,
    })
}

/// ROI align of one box: `C × out_height × out_width`.
pub fn roi_align(g: &mut Graph, map: &VisualFeatureMap, b: &BoxCoords, cfg: &RoiConfig) -> Result<Var> {
    let plane = map.height * map.width;
    let bins = roi_bins(b, map.height, map.width, cfg)?;
    let mut entries = Vec::with_capacity(map.channels * bins.len());
    for c in 0..map.channels {
        for bin in &bins {
            entries.push(bin.iter().map(|&(cell, wt)| (c * plane + cell, wt)).collect());
        }
    }
    let sm = SparseMap {
        input_len: map.channels * plane,
        out_shape: vec![map.channels, cfg.out_height, cfg.out_width],
        entries,
    };
    g.sparse(map.values, Arc::new(sm))
}

/// ROI align on a plain `C × H × W` tensor.
pub fn roi_align_tensor(values: &Tensor, b: &BoxCoords, cfg: &RoiConfig) -> Result<Tensor> {
    let (c, h, w) = match values.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Config(format!("roi_align expects C x H x W, got {s:?}"))),
    };
    let mut g = Graph::new();
    let v = g.constant(values.clone())?;
    let map = VisualFeatureMap {
        values: v,
        channels: c,
        height: h,
        width: w,
    };
    let out = roi_align(&mut g, &map, b, cfg)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_vis: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 64,
            d_vis: 32,
        }
    }
}

/// Transformer over patch tokens that also attend to the whole-frame tokens.
///
/// Frame tokens act as a shared memory: they are projected once per frame and
/// provide keys/values to every box's patch tokens, which are the only tokens
/// updated layer to layer.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub config: FusionConfig,
    pub roi: RoiConfig,
    pub patch_proj: Linear,
    pub frame_proj: Linear,
    pub segment: ParamId,
    pub coord_proj: Linear,
    layers: Vec<EncoderLayer>,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &FusionConfig,
        roi: &RoiConfig,
        channels: usize,
    ) -> Result<Self> {
        roi.validate()?;
        let d = config.d_model;
        if d == 0 || config.d_vis == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        Ok(Self {
            config: config.clone(),
            roi: *roi,
            patch_proj: Linear::new(store, rng, "fusion.patch_proj", channels, d, true),
            frame_proj: Linear::new(store, rng, "fusion.frame_proj", channels, d, true),
            segment: store.add("fusion.segment", xavier(rng, &[2, d], 2, d)),
            coord_proj: Linear::new(store, rng, "fusion.coord_proj", COORD_FEATURES, d, false),
            layers: (0..config.layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("fusion.layer{i}"), d, config.heads, config.d_ff))
                .collect::<Result<Vec<_>>>()?,
            out: Linear::new(store, rng, "fusion.out", d, config.d_vis, true),
        })
    }

    fn tokens(&self, g: &mut Graph, p: &Bound, raw: Var, proj: &Linear, segment: usize, points: &[(f64, f64)]) -> Result<Var> {
        let x = proj.forward(g, p, raw)?;
        let seg = g.gather_rows(p.var(self.segment), &[segment])?;
        let x = g.add_row(x, seg)?;
        let coords = g.constant(coordinate_features(points))?;
        let c = self.coord_proj.forward(g, p, coords)?;
        g.add(x, c)
    }

    /// Whole-frame tokens: one per feature cell, `(H_f · W_f) × d_model`.
    pub fn frame_tokens(&self, g: &mut Graph, p: &Bound, map: &VisualFeatureMap) -> Result<Var> {
        let flat = g.reshape(map.values, &[map.channels, map.height * map.width])?;
        let cells = g.transpose(flat)?;
        let points: Vec<(f64, f64)> = (0..map.height)
            .flat_map(|r| (0..map.width).map(move |c| (r, c)))
            .map(|(r, c)| map.cell_center(r, c))
            .collect();
        self.tokens(g, p, cells, &self.frame_proj, 1, &points)
    }

    /// Per-box visual features `n × d_vis`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        map: &VisualFeatureMap,
        frame_tokens: Var,
        boxes: &[BoxCoords],
    ) -> Result<Var> {
        if boxes.is_empty() {
            return Err(Error::Data("cross-attention needs at least one box".into()));
        }
        let sm = roi_token_map(map.channels, map.height, map.width, boxes, &self.roi)?;
        let patches = g.sparse(map.values, Arc::new(sm))?;
        let points: Vec<(f64, f64)> = boxes.iter().flat_map(|b| bin_centers(b, &self.roi)).collect();
        let mut x = self.tokens(g, p, patches, &self.patch_proj, 0, &points)?;
        let bins = self.roi.bins();
        let segments: Vec<_> = (0..boxes.len()).map(|i| i * bins..(i + 1) * bins).collect();
        for layer in &self.layers {
            x = layer.forward(g, p, x, &segments, Some(frame_tokens))?;
        }
        let pool = g.constant(segment_mean_matrix(&segments, boxes.len() * bins))?;
        let pooled = g.matmul(pool, x)?;
        self.out.forward(g, p, pooled)
    }
}

/// `[f_vis ‖ f_text]` row-wise.
pub fn fuse(g: &mut Graph, f_vis: Var, f_text: Var) -> Result<Var> {
    if g.shape(f_vis).len() != 2 || g.shape(f_text).len() != 2 || g.shape(f_vis)[0] != g.shape(f_text)[0] {
        return Err(Error::Config(format!(
            "cannot fuse visual {:?} with text {:?}",
            g.shape(f_vis),
            g.shape(f_text)
        )));
    }
    g.concat_cols(&[f_vis, f_text])
}

/// Single-vector form of [`fuse`] with dimension checks.
pub fn fuse_vectors(f_vis: &[f64], f_text: &[f64], d_vis: usize, d_text: usize) -> Result<Vec<f64>> {
    if f_vis.len() != d_vis || f_text.len() != d_text {
        return Err(Error::Config(format!(
            "fuse expects {d_vis} + {d_text} values, got {} + {}",
            f_vis.len(),
            f_text.len()
        )));
    }
    Ok(f_vis.iter().chain(f_text).copied().collect())
}
