//! Dense linear-algebra kernels shared by the graph ops.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`, all row-major.
///
/// With `a_t` set, `a` is stored as `k × m`; with `b_t` set, `b` is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds `input` (`C × H × W`) into a `(C·kh·kw) × (H'·W')` column matrix.
pub fn im2col(input: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let positions = oh * ow;
    let mut cols = vec![0.0; geo.patch_len() * positions];
    for c in 0..geo.channels {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let src_row = (c * geo.height + iy as usize) * geo.width;
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            dst[oy * ow + ox] = input[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `grad_input`.
pub fn col2im_add(cols: &[f64], geo: &ConvGeometry, grad_input: &mut [f64]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let positions = oh * ow;
    for c in 0..geo.channels {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let dst_row = (c * geo.height + iy as usize) * geo.width;
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            grad_input[dst_row + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
