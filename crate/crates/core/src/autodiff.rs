//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every consumer before its producers. Gradients are
//! accumulated into a separate buffer and returned as [`Gradients`].
//!
//! Every op validates shapes up front and rejects non-finite outputs, so a
//! NaN surfaces as an error at the op that produced it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map: `out[o] = Σ weight · input[index]` over `entries[o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    pub input_len: usize,
    pub out_shape: Vec<usize>,
    pub entries: Vec<Vec<(usize, f64)>>,
}

/// Backward rule for [`Graph::custom`]: receives the input values, the output
/// value and the output gradient; returns one gradient buffer per input.
pub type CustomBackward =
    Arc<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Sparse {
        x: Var,
        map: Arc<SparseMap>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterDense {
        w: Var,
        cols: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    RemoveDiagonal(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_signature: u64,
}

/// Gradients produced by a reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(dim_err(op, other, &[0, 0])),
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], len: usize, v: Var) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn extract_head(src: &[f64], rows: usize, width: usize, offset: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&src[r * width + offset..r * width + offset + dh]);
    }
    out
}

fn add_head(dst: &mut [f64], src: &[f64], rows: usize, width: usize, offset: usize, dh: usize) {
    for r in 0..rows {
        for (d, s) in dst[r * width + offset..r * width + offset + dh]
            .iter_mut()
            .zip(&src[r * dh..(r + 1) * dh])
        {
            *d += s;
        }
    }
}

fn softmax_rows_in_place(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of the sign pattern of every ReLU input seen so far. Two evaluations
    /// with equal signatures lie on the same smooth piece of the graph.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op, index });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_bt", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_bt", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul_bt", Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(dim_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, b) in chunk.iter_mut().zip(r) {
                *d += b;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        self.push("add_row", value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push("scale", value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut h = self.kink_signature ^ 0x9e37_79b9_7f4a_7c15;
        for &v in self.value(a).data() {
            h = (h ^ u64::from(v > 0.0)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.kink_signature = h;
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push("relu", value, Op::Relu(a), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(dim_err("softmax", &shape, &[axis]));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|j| src[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if cols == 0 {
            return Err(dim_err("layer_norm", self.shape(x), &[]));
        }
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / cols;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Cross-correlation of a `C × H × W` input with `F × C × kh × kw` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err("conv2d", s, &[0, 0, 0])),
        };
        let (f, kc, kh, kw) = match self.shape(kernel) {
            [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
            s => return Err(dim_err("conv2d", s, &[0, 0, 0, 0])),
        };
        if kc != c {
            return Err(dim_err("conv2d", self.shape(input), self.shape(kernel)));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != f {
                return Err(dim_err("conv2d", self.shape(kernel), self.shape(b)));
            }
        }
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
        };
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let cols = im2col(self.value(input).data(), &geo);
        let p = oh * ow;
        let mut out = vec![0.0; f * p];
        gemm(f, geo.patch_len(), p, self.value(kernel).data(), false, &cols, false, &mut out, false);
        if let Some(b) = bias {
            for (fi, bv) in self.value(b).data().iter().enumerate() {
                out[fi * p..(fi + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut vars = vec![input, kernel];
        vars.extend(bias);
        let rg = self.rg(&vars);
        self.push(
            "conv2d",
            Tensor::new(vec![f, oh, ow], out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geo,
            },
            rg,
        )
    }

    /// Applies a fixed sparse linear map (used for bilinear ROI sampling).
    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>) -> Result<Var> {
        if self.value(x).len() != map.input_len {
            return Err(dim_err("sparse", self.shape(x), &[map.input_len]));
        }
        let src = self.value(x).data();
        let out = map
            .entries
            .iter()
            .map(|e| e.iter().map(|&(i, w)| w * src[i]).sum())
            .collect();
        let value = Tensor::new(map.out_shape.clone(), out)?;
        let rg = self.rg(&[x]);
        self.push("sparse", value, Op::Sparse { x, map }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Internal("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != cols {
                return Err(dim_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Internal("concat_cols of nothing".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_dims("slice_rows", self.value(x))?;
        if start + len > r {
            return Err(dim_err("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "slice_rows",
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows { x, start },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push("transpose", Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims("gather_rows", self.value(x))?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(dim_err("gather_rows", self.shape(x), &[i]));
            }
            data.extend_from_slice(self.value(x).row_slice(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            Tensor::new(vec![index.len(), c], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Scatters `w` (`n × k`) into a dense `n × width` matrix: row `r`, entry
    /// `j` lands in column `cols[r·k + j]`. Repeated columns accumulate.
    pub fn scatter_dense(&mut self, w: Var, cols: &[usize], width: usize) -> Result<Var> {
        let (n, k) = matrix_dims("scatter_dense", self.value(w))?;
        if cols.len() != n * k || cols.iter().any(|&c| c >= width) {
            return Err(dim_err("scatter_dense", self.shape(w), &[cols.len(), width]));
        }
        let src = self.value(w).data();
        let mut data = vec![0.0; n * width];
        for r in 0..n {
            for j in 0..k {
                data[r * width + cols[r * k + j]] += src[r * k + j];
            }
        }
        let rg = self.rg(&[w]);
        self.push(
            "scatter_dense",
            Tensor::new(vec![n, width], data)?,
            Op::ScatterDense {
                w,
                cols: cols.to_vec(),
            },
            rg,
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = matrix_dims("cross_entropy", self.value(logits))?;
        if labels.len() != b || b == 0 {
            return Err(dim_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!(
                "label {l} of record {i} is outside [0, {k})"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows_in_place(&mut probs, k);
        let src = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Drops the diagonal of a square matrix: `n × n → n × (n-1)`.
    pub fn remove_diagonal(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("remove_diagonal", self.value(x))?;
        if r != c || r < 2 {
            return Err(dim_err("remove_diagonal", self.shape(x), &[r, r]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * (r - 1));
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    data.push(src[i * r + j]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "remove_diagonal",
            Tensor::new(vec![r, r - 1], data)?,
            Op::RemoveDiagonal(x),
            rg,
        )
    }

    /// L2-normalizes every row. A zero row is an error naming the row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("normalize_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Data(format!("cannot normalize zero-norm embedding at row {i}")));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let rg = self.rg(&[x]);
        self.push(
            "normalize_rows",
            Tensor::new(vec![r, c], data)?,
            Op::NormalizeRows { x, norms },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention without projections:
    /// `q: Tq×d`, `k, v: Tk×d`, `d` split evenly over `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, d) = matrix_dims("attention", self.value(q))?;
        let (tk, dk) = matrix_dims("attention", self.value(k))?;
        if dk != d || self.shape(v) != self.shape(k) || heads == 0 || d % heads != 0 || tk == 0 {
            return Err(dim_err("attention", self.shape(q), self.shape(k)));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq * d];
        let mut probs = vec![0.0; heads * tq * tk];
        for h in 0..heads {
            let qh = extract_head(self.value(q).data(), tq, d, h * dh, dh);
            let kh = extract_head(self.value(k).data(), tk, d, h * dh, dh);
            let vh = extract_head(self.value(v).data(), tk, d, h * dh, dh);
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(tq, dh, tk, &qh, false, &kh, true, p, false);
            p.iter_mut().for_each(|s| *s *= scale);
            softmax_rows_in_place(p, tk);
            let mut oh = vec![0.0; tq * dh];
            gemm(tq, tk, dh, p, false, &vh, false, &mut oh, false);
            add_head(&mut out, &oh, tq, d, h * dh, dh);
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            Tensor::new(vec![tq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention probabilities (`heads × Tq × Tk`, row-major) of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in creation order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. }))
            .map(Var)
            .collect()
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Records an op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward", self.shape(loss), &[1]));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep with explicit upstream gradients for any set of nodes
    /// (a vector-Jacobian product).
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(dim_err("backward_seeded", self.shape(*v), g.shape()));
            }
            let slot = acc(&mut grads, g.len(), *v);
            for (s, x) in slot.iter_mut().zip(g.data()) {
                *s += x;
            }
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let ga = acc(grads, m * k, *a);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, ga, true);
                }
                if self.wants(*b) {
                    let gb = acc(grads, k * n, *b);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.wants(*a) {
                    let ga = acc(grads, m * k, *a);
                    gemm(m, n, k, g, false, self.value(*b).data(), false, ga, true);
                }
                if self.wants(*b) {
                    let gb = acc(grads, n * k, *b);
                    gemm(n, m, k, g, true, self.value(*a).data(), false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(v) {
                        let gv = acc(grads, g.len(), v);
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(v) {
                        let gv = acc(grads, g.len(), v);
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = acc(grads, g.len(), *a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = acc(grads, g.len(), *b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    let ga = acc(grads, g.len(), *a);
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if self.wants(*row) {
                    let cols = self.len_of(*row);
                    let gr = acc(grads, cols, *row);
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, g.len(), *a);
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = acc(grads, g.len(), *a);
                for j in 0..g.len() {
                    if av[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = out.shape();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = out.data();
                let gx = acc(grads, g.len(), *x);
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.len_of(*gain);
                let rows = g.len() / cols;
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = acc(grads, cols, *gain);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = acc(grads, cols, *bias);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = acc(grads, g.len(), *x);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geo,
            } => {
                let f = self.value(*kernel).shape()[0];
                let p = geo.out_height() * geo.out_width();
                let pl = geo.patch_len();
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let gb = acc(grads, f, *b);
                        for fi in 0..f {
                            gb[fi] += g[fi * p..(fi + 1) * p].iter().sum::<f64>();
                        }
                    }
                }
                if self.wants(*kernel) {
                    let cols = im2col(self.value(*input).data(), geo);
                    let gk = acc(grads, f * pl, *kernel);
                    gemm(f, p, pl, g, false, &cols, true, gk, true);
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; pl * p];
                    gemm(pl, f, p, self.value(*kernel).data(), true, g, false, &mut dcols, false);
                    let gi = acc(grads, self.len_of(*input), *input);
                    col2im_add(&dcols, geo, gi);
                }
            }
            Op::Sparse { x, map } => {
                let gx = acc(grads, map.input_len, *x);
                for (o, e) in map.entries.iter().enumerate() {
                    for &(idx, w) in e {
                        gx[idx] += w * g[o];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.len_of(p);
                    if self.wants(p) {
                        let gp = acc(grads, len, p);
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let gp = acc(grads, rows * w, p);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let gx = acc(grads, self.len_of(*x), *x);
                gx[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, s)| *d += s);
            }
            Op::Reshape(x) => {
                let gx = acc(grads, g.len(), *x);
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Transpose(x) => {
                let (c, r) = (out.shape()[0], out.shape()[1]);
                let gx = acc(grads, g.len(), *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let c = out.cols();
                let gx = acc(grads, self.len_of(*x), *x);
                for (o, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[o * c + j];
                    }
                }
            }
            Op::ScatterDense { w, cols } => {
                let width = out.cols();
                let (n, k) = (self.value(*w).shape()[0], self.value(*w).shape()[1]);
                let gw = acc(grads, n * k, *w);
                for r in 0..n {
                    for j in 0..k {
                        gw[r * k + j] += g[r * width + cols[r * k + j]];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let gl = acc(grads, probs.len(), *logits);
                for (r, &l) in labels.iter().enumerate() {
                    for c in 0..k {
                        let target = if c == l { 1.0 } else { 0.0 };
                        gl[r * k + c] += scale * (probs[r * k + c] - target);
                    }
                }
            }
            Op::RemoveDiagonal(x) => {
                let r = out.rows();
                let gx = acc(grads, r * r, *x);
                let mut o = 0;
                for i in 0..r {
                    for j in 0..r {
                        if i != j {
                            gx[i * r + j] += g[o];
                            o += 1;
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = out.cols();
                let y = out.data();
                let gx = acc(grads, g.len(), *x);
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, d) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let tk = self.value(*k).shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                for h in 0..*heads {
                    let qh = extract_head(self.value(*q).data(), tq, d, h * dh, dh);
                    let kh = extract_head(self.value(*k).data(), tk, d, h * dh, dh);
                    let vh = extract_head(self.value(*v).data(), tk, d, h * dh, dh);
                    let goh = extract_head(g, tq, d, h * dh, dh);
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    let mut dvh = vec![0.0; tk * dh];
                    gemm(tk, tq, dh, p, true, &goh, false, &mut dvh, false);
                    let mut dp = vec![0.0; tq * tk];
                    gemm(tq, dh, tk, &goh, false, &vh, true, &mut dp, false);
                    for r in 0..tq {
                        let row = r * tk..(r + 1) * tk;
                        let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            dp[j] = p[j] * (dp[j] - dot) * scale;
                        }
                    }
                    let mut dqh = vec![0.0; tq * dh];
                    gemm(tq, tk, dh, &dp, false, &kh, false, &mut dqh, false);
                    let mut dkh = vec![0.0; tk * dh];
                    gemm(tk, tq, dh, &dp, true, &qh, false, &mut dkh, false);
                    add_head(&mut dq, &dqh, tq, d, h * dh, dh);
                    add_head(&mut dk, &dkh, tk, d, h * dh, dh);
                    add_head(&mut dv, &dvh, tk, d, h * dh, dh);
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        let gv = acc(grads, buf.len(), var);
                        gv.iter_mut().zip(&buf).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.len_of(*x);
                let gx = acc(grads, len, *x);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = backward(&vals, out, g);
                for (&v, part) in inputs.iter().zip(parts) {
                    if self.wants(v) {
                        let gv = acc(grads, part.len(), v);
                        gv.iter_mut().zip(&part).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let b = g.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -2.0, 3.0], vec![7.0, 1.5, -0.25]]).unwrap();
        let xv = g.leaf(x.clone()).unwrap();
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.leaf(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_reference_values() {
        // e^k / (e + e^2 + e^3) evaluated by hand.
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        let e3 = 3f64.exp();
        let z = e1 + e2 + e3;
        let oracle = [e1 / z, e2 / z, e3 / z];
        let frozen = [0.09003057, 0.24472847, 0.66524096];
        for (o, f) in oracle.iter().zip(frozen) {
            assert!((o - f).abs() < 1e-6);
        }
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for (v, f) in g.value(y).data().iter().zip(frozen) {
            assert!((v - f).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let x = g.leaf(Tensor::new(vec![2, 3, 4], data).unwrap()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_and_normalized_inputs() {
        let mut g = Graph::new();
        let gain = g.leaf(Tensor::full(&[4], 1.0)).unwrap();
        let bias = g.leaf(Tensor::zeros(&[4])).unwrap();
        let x = g.leaf(Tensor::full(&[1, 4], 3.5)).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let gain = g.leaf(Tensor::full(&[2], 1.0)).unwrap();
        let bias = g.leaf(Tensor::zeros(&[2])).unwrap();
        let x = g.leaf(Tensor::row(vec![1.0, -1.0])).unwrap();
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn conv2d_identity_and_constant_field() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..9).map(f64::from).collect();
        let x = g.leaf(Tensor::new(vec![1, 3, 3], data.clone()).unwrap()).unwrap();
        let k = g.leaf(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());

        let x = g.leaf(Tensor::full(&[1, 4, 4], 1.0)).unwrap();
        let k = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv2d_rejects_oversized_kernel_and_zero_stride() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 2])).unwrap();
        let k = g.leaf(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, k, None, 1, 0), Err(Error::Config(_))));
        assert!(matches!(g.conv2d(x, k, None, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[3, 4])).unwrap();
        let ce = g.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);

        // -log(e^3 / (e + e^2 + e^3))
        let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((oracle - 0.407606).abs() < 1e-6);
        let l = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let ce = g.cross_entropy(l, &[2]).unwrap();
        assert!((g.value(ce).data()[0] - 0.407606).abs() < 1e-6);

        let l = g.leaf(Tensor::from_rows(&[vec![0.0, 200.0, 0.0]]).unwrap()).unwrap();
        let ce = g.cross_entropy(l, &[1]).unwrap();
        assert!(g.value(ce).data()[0] < 1e-80);
    }

    #[test]
    fn cross_entropy_out_of_range_label_names_record() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[2, 4])).unwrap();
        let err = g.cross_entropy(l, &[1, 4]).err().unwrap();
        assert!(err.to_string().contains("record 1"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1e308])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
        assert!(g.leaf(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn normalize_rows_reports_zero_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap();
        let err = g.normalize_rows(x).err().unwrap();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap()).unwrap();
        let k = g.leaf(Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).cos()).collect()).unwrap()).unwrap();
        let a = g.attention(q, k, k, 2).unwrap();
        let p = g.attention_probs(a).unwrap();
        for row in p.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![2.0])).unwrap();
        let x = g.leaf(Tensor::vector(vec![3.0])).unwrap();
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        assert!(grads.get(c).is_none());
    }
}
