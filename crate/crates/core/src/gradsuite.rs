//! Randomized finite-difference checks for every differentiable op and module.
//!
//! Each case draws fresh shapes and values per trial from a keyed stream and
//! reduces the output to a scalar with random fixed weights, so no gradient
//! coordinate is trivially uniform.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, SparseMap, Var};
use crate::contrastive::{contrastive_loss, joint_loss, ProjectionConfig};
use crate::correlation::{build_neighbor_graph, CorrelationConfig, CorrelationNet};
use crate::data::{BoxCoords, FrameSample, Label, Split, TextBox};
use crate::encoders::{TextConfig, TextEncoder, VisualConfig, VisualEncoder, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::fusion::{roi_align, CrossAttention, FusionConfig, RoiConfig};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::{ArchConfig, Cgmm, InputMask, ModelConfig};
use crate::nn::{uniform, Bound, ParamStore};
use crate::rng::{stream, GRADCHECK};
use crate::tensor::Tensor;

pub const MODULES: [&str; 6] = ["autodiff", "encoders", "fusion", "correlationnet", "contrastive", "model"];

type CaseFn = fn(&mut ChaCha8Rng, GradCheckOptions) -> GradCheckReport;

struct Case {
    module: &'static str,
    name: &'static str,
    run: CaseFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub module: &'static str,
    pub case: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

/// Random matrix with `1..=rows × 1..=cols` extents.
fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let shape = [dim(rng, 1, rows), dim(rng, 1, cols)];
    rand_t(rng, &shape)
}

/// `Σ y ⊙ w` for weights fixed by `key`, whatever the shape of `y`.
fn project(g: &mut Graph, y: Var, key: u64) -> Result<Var> {
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(key), g.shape(y), 1.0);
    let w = g.constant(w.reshape(g.shape(y))?)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, opts: GradCheckOptions, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let key: u64 = rng.gen();
    grad_check(
        |g, x| {
            let y = f(g, x)?;
            project(g, y, key)
        },
        &inputs,
        opts,
    )
}

fn op_matmul(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let x = vec![rand_t(rng, &[m, k]), rand_t(rng, &[k, n])];
    check(rng, x, o, |g, x| g.matmul(x[0], x[1]))
}

fn op_matmul_bt(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let x = vec![rand_t(rng, &[m, k]), rand_t(rng, &[n, k])];
    check(rng, x, o, |g, x| g.matmul_bt(x[0], x[1]))
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
    vec![rand_t(rng, &[r, c]), rand_t(rng, &[r, c])]
}

fn op_add(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = pair(rng);
    check(rng, x, o, |g, x| g.add(x[0], x[1]))
}

fn op_sub(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = pair(rng);
    check(rng, x, o, |g, x| g.sub(x[0], x[1]))
}

fn op_mul(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = pair(rng);
    check(rng, x, o, |g, x| g.mul(x[0], x[1]))
}

fn op_add_row(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let x = vec![rand_t(rng, &[r, c]), rand_t(rng, &[c])];
    check(rng, x, o, |g, x| g.add_row(x[0], x[1]))
}

fn op_scale(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let c: f64 = rng.gen_range(-3.0..3.0);
    let x = vec![rand_mat(rng, 4, 4)];
    check(rng, x, o, move |g, x| g.scale(x[0], c))
}

fn op_relu(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = vec![rand_mat(rng, 4, 4)];
    check(rng, x, o, |g, x| g.relu(x[0]))
}

fn op_softmax(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    let axis = dim(rng, 0, 2);
    let x = vec![rand_t(rng, &shape).map(|v| 3.0 * v)];
    check(rng, x, o, move |g, x| g.softmax(x[0], axis))
}

fn op_layer_norm(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
    let x = vec![rand_t(rng, &[r, c]), rand_t(rng, &[c]), rand_t(rng, &[c])];
    check(rng, x, o, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5))
}

fn op_conv2d(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (c, f, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
    let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
    let x = vec![rand_t(rng, &[c, h, w]), rand_t(rng, &[f, c, k, k]), rand_t(rng, &[f])];
    check(rng, x, o, move |g, x| g.conv2d(x[0], x[1], Some(x[2]), stride, pad))
}

fn op_sparse(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (n, m) = (dim(rng, 1, 8), dim(rng, 1, 6));
    let entries = (0..m)
        .map(|_| (0..dim(rng, 0, 4)).map(|_| (rng.gen_range(0..n), rng.gen_range(-1.0..1.0))).collect())
        .collect();
    let map = Arc::new(SparseMap {
        input_len: n,
        out_shape: vec![m],
        entries,
    });
    let x = vec![rand_t(rng, &[n])];
    check(rng, x, o, move |g, x| g.sparse(x[0], map.clone()))
}

fn op_concat_rows(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let c = dim(rng, 1, 4);
    let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let x = vec![rand_t(rng, &[a, c]), rand_t(rng, &[b, c])];
    check(rng, x, o, |g, x| g.concat_rows(&[x[0], x[1], x[0]]))
}

fn op_concat_cols(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let r = dim(rng, 1, 4);
    let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let x = vec![rand_t(rng, &[r, a]), rand_t(rng, &[r, b])];
    check(rng, x, o, |g, x| g.concat_cols(&[x[1], x[0], x[1]]))
}

fn op_slice_rows(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let r = dim(rng, 1, 5);
    let start = dim(rng, 0, r - 1);
    let len = dim(rng, 1, r - start);
    let c = dim(rng, 1, 3);
    let x = vec![rand_t(rng, &[r, c])];
    check(rng, x, o, move |g, x| g.slice_rows(x[0], start, len))
}

fn op_reshape(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let x = vec![rand_t(rng, &[a, b, 2])];
    check(rng, x, o, move |g, x| g.reshape(x[0], &[2 * b, a]))
}

fn op_transpose(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = vec![rand_mat(rng, 4, 4)];
    check(rng, x, o, |g, x| g.transpose(x[0]))
}

fn op_gather_rows(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let r = dim(rng, 1, 4);
    let index: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.gen_range(0..r)).collect();
    let c = dim(rng, 1, 3);
    let x = vec![rand_t(rng, &[r, c])];
    check(rng, x, o, move |g, x| g.gather_rows(x[0], &index))
}

fn op_scatter_dense(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (n, k, width) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 5));
    let cols: Vec<usize> = (0..n * k).map(|_| rng.gen_range(0..width)).collect();
    let x = vec![rand_t(rng, &[n, k])];
    check(rng, x, o, move |g, x| g.scatter_dense(x[0], &cols, width))
}

fn op_cross_entropy(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (b, k) = (dim(rng, 1, 5), dim(rng, 2, 5));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
    let x = vec![rand_t(rng, &[b, k]).map(|v| 3.0 * v)];
    check(rng, x, o, move |g, x| g.cross_entropy(x[0], &labels))
}

fn op_remove_diagonal(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let n = dim(rng, 2, 5);
    let x = vec![rand_t(rng, &[n, n])];
    check(rng, x, o, |g, x| g.remove_diagonal(x[0]))
}

fn op_normalize_rows(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = vec![rand_mat(rng, 4, 4).map(|v| v + 0.1f64.copysign(v))];
    check(rng, x, o, |g, x| g.normalize_rows(x[0]))
}

fn op_attention(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let heads = dim(rng, 1, 2);
    let d = heads * dim(rng, 1, 3);
    let (tq, tk) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let x = vec![rand_t(rng, &[tq, d]), rand_t(rng, &[tk, d]), rand_t(rng, &[tk, d])];
    check(rng, x, o, move |g, x| g.attention(x[0], x[1], x[2], heads))
}

fn op_sum(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = vec![rand_mat(rng, 4, 4)];
    check(rng, x, o, |g, x| g.sum(x[0]))
}

fn op_mean(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let x = vec![rand_mat(rng, 4, 4)];
    check(rng, x, o, |g, x| g.mean(x[0]))
}

/// Parameters of `store` followed by `extra`, bound for a module call.
fn with_params(store: &ParamStore, extra: Vec<Tensor>) -> Vec<Tensor> {
    let mut x = store.tensors().to_vec();
    x.extend(extra);
    x
}

fn split_params(x: &[Var], n: usize) -> (Bound, &[Var]) {
    (Bound::from_vars(x[..n].to_vec()), &x[n..])
}

fn mod_visual(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let cfg = VisualConfig {
        channels: vec![dim(rng, 1, 3), dim(rng, 1, 3)],
        ..VisualConfig::default()
    };
    let mut store = ParamStore::new();
    let (h, w) = (dim(rng, 6, 10), dim(rng, 6, 10));
    let enc = match VisualEncoder::new(&mut store, rng, &cfg, h, w, 1) {
        Ok(e) => e,
        Err(e) => return failed(e),
    };
    let n = store.len();
    let x = with_params(&store, vec![uniform(rng, &[3, h, w], 0.5).map(|v| v + 0.5)]);
    check(rng, x, o, move |g, x| {
        let (p, rest) = split_params(x, n);
        Ok(enc.encode(g, &p, rest[0])?.values)
    })
}

// Layer norm over fewer than 4 features is close to a sign function (width
// about sqrt(eps)); central differences at h = 1e-5 are then dominated by
// truncation error, so sampled model widths start at 4.

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    let real = dim(rng, 1, len);
    (0..len).map(|i| if i < real { rng.gen_range(1..vocab as u32) } else { 0 }).collect()
}

fn mod_text(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let heads = dim(rng, 1, 2);
    let cfg = TextConfig {
        d_text: heads * dim(rng, 2, 3).max(4 / heads),
        layers: dim(rng, 1, 2),
        heads,
        d_ff: dim(rng, 2, 4),
    };
    let vocab = 10;
    let mut store = ParamStore::new();
    let enc = match TextEncoder::new(&mut store, rng, &cfg, vocab) {
        Ok(e) => e,
        Err(e) => return failed(e),
    };
    let seqs: Vec<Vec<u32>> = (0..dim(rng, 1, 3)).map(|_| random_tokens(rng, vocab, 4)).collect();
    let n = store.len();
    let x = with_params(&store, Vec::new());
    check(rng, x, o, move |g, x| {
        let (p, _) = split_params(x, n);
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        enc.encode(g, &p, &refs)
    })
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxCoords {
    let (x0, y0) = (rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7));
    BoxCoords {
        x0,
        y0,
        x1: x0 + rng.gen_range(0.05..0.3),
        y1: y0 + rng.gen_range(0.05..0.3),
    }
}

fn mod_roi_align(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (c, h, w) = (dim(rng, 1, 3), dim(rng, 2, 6), dim(rng, 2, 6));
    let cfg = RoiConfig {
        out_height: dim(rng, 1, 3),
        out_width: dim(rng, 1, 3),
        samples_per_bin: dim(rng, 1, 2),
    };
    let b = random_box(rng);
    let x = vec![rand_t(rng, &[c, h, w])];
    check(rng, x, o, move |g, x| {
        let map = VisualFeatureMap {
            values: x[0],
            channels: c,
            height: h,
            width: w,
        };
        roi_align(g, &map, &b, &cfg)
    })
}

fn mod_cross_attention(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let heads = dim(rng, 1, 2);
    let cfg = FusionConfig {
        d_model: heads * dim(rng, 2, 3).max(4 / heads),
        layers: dim(rng, 1, 2),
        heads,
        d_ff: dim(rng, 2, 4),
        d_vis: dim(rng, 1, 3),
    };
    let roi = RoiConfig {
        out_height: 2,
        out_width: 2,
        samples_per_bin: 1,
    };
    let (c, h, w) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4));
    let mut store = ParamStore::new();
    let f = match CrossAttention::new(&mut store, rng, &cfg, &roi, c) {
        Ok(f) => f,
        Err(e) => return failed(e),
    };
    let boxes: Vec<BoxCoords> = (0..dim(rng, 1, 3)).map(|_| random_box(rng)).collect();
    let n = store.len();
    let x = with_params(&store, vec![rand_t(rng, &[c, h, w])]);
    check(rng, x, o, move |g, x| {
        let (p, rest) = split_params(x, n);
        let map = VisualFeatureMap {
            values: rest[0],
            channels: c,
            height: h,
            width: w,
        };
        let tokens = f.frame_tokens(g, &p, &map)?;
        f.forward(g, &p, &map, tokens, &boxes)
    })
}

fn mod_correlation(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let cfg = CorrelationConfig {
        d_corr: dim(rng, 1, 4),
        max_neighbors: dim(rng, 1, 4),
    };
    let (n_boxes, d) = (dim(rng, 1, 5), dim(rng, 1, 4));
    let mut store = ParamStore::new();
    let net = match CorrelationNet::new(&mut store, rng, &cfg, d) {
        Ok(n) => n,
        Err(e) => return failed(e),
    };
    let boxes: Vec<BoxCoords> = (0..n_boxes).map(|_| random_box(rng)).collect();
    let graph = build_neighbor_graph(&boxes, cfg.max_neighbors);
    let n = store.len();
    let x = with_params(&store, vec![rand_t(rng, &[n_boxes, d])]);
    check(rng, x, o, move |g, x| {
        let (p, rest) = split_params(x, n);
        Ok(net.forward(g, &p, rest[0], &graph)?.features)
    })
}

fn mod_contrastive_loss(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let (n, d) = (dim(rng, 2, 4), dim(rng, 2, 5));
    let tau = rng.gen_range(0.1..1.0);
    let x = vec![rand_t(rng, &[2 * n, d]).map(|v| v + 0.1f64.copysign(v))];
    check(rng, x, o, move |g, x| contrastive_loss(g, x[0], tau))
}

fn mod_joint_loss(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let alpha = rng.gen_range(0.0..=1.0);
    let x = vec![rand_t(rng, &[1]), rand_t(rng, &[1])];
    check(rng, x, o, move |g, x| joint_loss(g, x[0], x[1], alpha))
}

/// Smallest useful configuration of the whole network.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        frame_height: 16,
        frame_width: 16,
        vocab_size: 12,
        arch: ArchConfig {
            visual: VisualConfig {
                channels: vec![2, 3, 4],
                ..VisualConfig::default()
            },
            text: TextConfig {
                d_text: 4,
                layers: 1,
                heads: 2,
                d_ff: 4,
            },
            roi: RoiConfig {
                out_height: 2,
                out_width: 2,
                samples_per_bin: 2,
            },
            fusion: FusionConfig {
                d_model: 4,
                layers: 1,
                heads: 2,
                d_ff: 4,
                d_vis: 3,
            },
            correlation: CorrelationConfig {
                d_corr: 3,
                max_neighbors: 2,
            },
            projection: ProjectionConfig { hidden: 4, dim: 3 },
        },
    }
}

/// A random three-box frame for [`tiny_model_config`].
pub fn tiny_frame(rng: &mut ChaCha8Rng) -> FrameSample {
    let frame = uniform(rng, &[3, 16, 16], 0.5).map(|v| v + 0.5);
    let boxes = (0..3)
        .map(|i| TextBox {
            coords: random_box(rng),
            tokens: random_tokens(rng, 12, 4),
            raw_text: String::new(),
            label: Label::ALL[i],
        })
        .collect();
    FrameSample {
        frame,
        boxes,
        split: Split::Train,
        program_id: 0,
    }
}

fn mod_end_to_end(rng: &mut ChaCha8Rng, o: GradCheckOptions) -> GradCheckReport {
    let model = match Cgmm::new(&tiny_model_config(), rng.gen()) {
        Ok(m) => m,
        Err(e) => return failed(e),
    };
    let sample = tiny_frame(rng);
    let labels = sample.labels();
    let x = model.store.tensors().to_vec();
    // The classification loss is already scalar; `project` scales it by a random weight.
    check(rng, x, o, move |g, x| {
        let p = Bound::from_vars(x.to_vec());
        let out = model.forward(g, &p, &sample, &InputMask::default())?;
        g.cross_entropy(out.logits, &labels)
    })
}

fn failed(e: Error) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: f64::INFINITY,
        worst: None,
        checked: 0,
        skipped_nonsmooth: 0,
        passed: false,
        failure: Some(format!("setup failed: {e}")),
    }
}

fn cases() -> Vec<Case> {
    let c = |module, name, run: CaseFn| Case { module, name, run };
    vec![
        c("autodiff", "matmul", op_matmul),
        c("autodiff", "matmul_bt", op_matmul_bt),
        c("autodiff", "add", op_add),
        c("autodiff", "sub", op_sub),
        c("autodiff", "mul", op_mul),
        c("autodiff", "add_row", op_add_row),
        c("autodiff", "scale", op_scale),
        c("autodiff", "relu", op_relu),
        c("autodiff", "softmax", op_softmax),
        c("autodiff", "layer_norm", op_layer_norm),
        c("autodiff", "conv2d", op_conv2d),
        c("autodiff", "sparse", op_sparse),
        c("autodiff", "concat_rows", op_concat_rows),
        c("autodiff", "concat_cols", op_concat_cols),
        c("autodiff", "slice_rows", op_slice_rows),
        c("autodiff", "reshape", op_reshape),
        c("autodiff", "transpose", op_transpose),
        c("autodiff", "gather_rows", op_gather_rows),
        c("autodiff", "scatter_dense", op_scatter_dense),
        c("autodiff", "cross_entropy", op_cross_entropy),
        c("autodiff", "remove_diagonal", op_remove_diagonal),
        c("autodiff", "normalize_rows", op_normalize_rows),
        c("autodiff", "attention", op_attention),
        c("autodiff", "sum", op_sum),
        c("autodiff", "mean", op_mean),
        c("encoders", "visual_encoder", mod_visual),
        c("encoders", "text_encoder", mod_text),
        c("fusion", "roi_align", mod_roi_align),
        c("fusion", "cross_attention", mod_cross_attention),
        c("correlationnet", "correlation_forward", mod_correlation),
        c("contrastive", "contrastive_loss", mod_contrastive_loss),
        c("contrastive", "joint_loss", mod_joint_loss),
        c("model", "end_to_end", mod_end_to_end),
    ]
}

/// Runs every case of `module` (or of all modules for `"all"`) for `trials` trials.
pub fn run(module: &str, trials: usize, opts: GradCheckOptions, seed: u64, exec: Execution) -> Result<Vec<CaseResult>> {
    if module != "all" && !MODULES.contains(&module) {
        return Err(Error::Config(format!(
            "unknown module '{module}'; expected one of {} or all",
            MODULES.join(", ")
        )));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if !(opts.tol > 0.0) || !(opts.h > 0.0) {
        return Err(Error::Config(format!("tolerance {} and step {} must be positive", opts.tol, opts.h)));
    }
    let selected: Vec<(usize, Case)> = cases()
        .into_iter()
        .enumerate()
        .filter(|(_, c)| module == "all" || c.module == module)
        .collect();
    Ok(selected
        .iter()
        .map(|(ci, case)| {
            let trial_ids: Vec<u64> = (0..trials as u64).collect();
            let reports = map_indexed(exec, &trial_ids, |_, &t| {
                let mut rng = stream(seed, GRADCHECK, ((*ci as u64) << 24) | t);
                (case.run)(&mut rng, opts)
            });
            let failures: Vec<&GradCheckReport> = reports.iter().filter(|r| !r.passed).collect();
            CaseResult {
                module: case.module,
                case: case.name,
                trials,
                max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
                checked: reports.iter().map(|r| r.checked).sum(),
                skipped_nonsmooth: reports.iter().map(|r| r.skipped_nonsmooth).sum(),
                failures: failures.len(),
                first_failure: failures.first().map(|r| {
                    r.failure
                        .clone()
                        .unwrap_or_else(|| format!("max rel error {:e} at {:?}", r.max_rel_error, r.worst))
                }),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_trials() {
        let results = run("all", 5, GradCheckOptions::default(), 11, Execution::Parallel).unwrap();
        assert_eq!(results.len(), cases().len());
        for r in &results {
            assert!(r.passed() && r.checked > 0, "{r:?}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(run("nope", 1, GradCheckOptions::default(), 0, Execution::Sequential), Err(Error::Config(_))));
        assert!(matches!(run("fusion", 0, GradCheckOptions::default(), 0, Execution::Sequential), Err(Error::Config(_))));
    }
}
