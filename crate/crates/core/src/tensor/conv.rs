use super::gemm::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use super::{Scalar, Tensor};
use crate::error::{CacError, Result};

/// How window taps that fall outside the image are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    /// Out-of-bounds taps read 0.
    #[default]
    Zero,
    /// Out-of-bounds taps read the nearest edge pixel.
    Replicate,
}

impl BorderMode {
    /// Source index for tap position `i` on an axis of length `n`, or `None` for a zero tap.
    #[inline]
    pub(crate) fn resolve(self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self {
            BorderMode::Zero => None,
            BorderMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Unfolded windows of one sample: column `j` is the vectorized window
/// centred on output pixel `j`, rows ordered `(channel, kernel row, kernel col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
    pub n: usize,
    pub pad: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ColMatrix<T> {
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    /// Center element of window `col` in channel `c`.
    pub fn center(&self, c: usize, col: usize) -> T {
        let half = self.k / 2;
        self.get(c * self.k * self.k + half * self.k + half, col)
    }
}

pub(crate) fn validate_kernel_size(k: usize, pad: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(CacError::invalid(format!("kernel size must be odd and >= 1, got {k}")));
    }
    if pad != (k - 1) / 2 {
        return Err(CacError::invalid(format!(
            "only same padding is supported: k={k} needs pad={}, got {pad}",
            (k - 1) / 2
        )));
    }
    Ok(())
}

/// Writes the `k²c × n²` window matrix of a `[c, n, n]` sample into `out`.
pub(crate) fn im2col_into<T: Scalar>(
    src: &[T],
    c: usize,
    n: usize,
    k: usize,
    border: BorderMode,
    out: &mut [T],
) {
    let pad = (k / 2) as isize;
    let cols = n * n;
    debug_assert_eq!(out.len(), c * k * k * cols);
    for ch in 0..c {
        let plane = &src[ch * cols..(ch + 1) * cols];
        for kr in 0..k {
            for kc in 0..k {
                let row = (ch * k + kr) * k + kc;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let dr = kr as isize - pad;
                let dc = kc as isize - pad;
                for i in 0..n {
                    let drow = &mut dst[i * n..(i + 1) * n];
                    let Some(si) = border.resolve(i as isize + dr, n) else {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let srow = &plane[si * n..(si + 1) * n];
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d = match border.resolve(j as isize + dc, n) {
                            Some(sj) => srow[sj],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// im2col restricted to the windows centred on `centers`, packed as `k²c × centers.len()`.
pub(crate) fn im2col_gather<T: Scalar>(
    src: &[T],
    c: usize,
    n: usize,
    k: usize,
    border: BorderMode,
    centers: &[usize],
    out: &mut [T],
) {
    let pad = (k / 2) as isize;
    let plane_len = n * n;
    let cols = centers.len();
    debug_assert_eq!(out.len(), c * k * k * cols);
    for ch in 0..c {
        let plane = &src[ch * plane_len..(ch + 1) * plane_len];
        for kr in 0..k {
            for kc in 0..k {
                let row = (ch * k + kr) * k + kc;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let dr = kr as isize - pad;
                let dc = kc as isize - pad;
                for (d, &p) in dst.iter_mut().zip(centers) {
                    let (i, j) = ((p / n) as isize, (p % n) as isize);
                    *d = match (border.resolve(i + dr, n), border.resolve(j + dc, n)) {
                        (Some(si), Some(sj)) => plane[si * n + sj],
                        _ => T::zero(),
                    };
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters column gradients back onto `[c, n, n]`.
pub(crate) fn col2im_add<T: Scalar>(
    cols_data: &[T],
    c: usize,
    n: usize,
    k: usize,
    border: BorderMode,
    out: &mut [T],
) {
    let pad = (k / 2) as isize;
    let cols = n * n;
    for ch in 0..c {
        let plane = &mut out[ch * cols..(ch + 1) * cols];
        for kr in 0..k {
            for kc in 0..k {
                let row = (ch * k + kr) * k + kc;
                let src = &cols_data[row * cols..(row + 1) * cols];
                let dr = kr as isize - pad;
                let dc = kc as isize - pad;
                for i in 0..n {
                    let Some(si) = border.resolve(i as isize + dr, n) else {
                        continue;
                    };
                    for j in 0..n {
                        if let Some(sj) = border.resolve(j as isize + dc, n) {
                            plane[si * n + sj] += src[i * n + j];
                        }
                    }
                }
            }
        }
    }
}

fn square_side(h: usize, w: usize) -> Result<usize> {
    if h != w {
        return Err(CacError::invalid(format!(
            "spatial dims must be square, got {h}x{w}"
        )));
    }
    Ok(h)
}

/// Unfolds a single `[C, H, W]` sample (a rank-4 tensor with N = 1 is accepted too)
/// with zero padding.
pub fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, pad: usize) -> Result<ColMatrix<T>> {
    im2col_bordered(x, k, pad, BorderMode::Zero)
}

pub fn im2col_bordered<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    pad: usize,
    border: BorderMode,
) -> Result<ColMatrix<T>> {
    validate_kernel_size(k, pad)?;
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(CacError::invalid(format!(
                "im2col expects a single [C,H,W] sample, got {:?}",
                x.shape()
            )))
        }
    };
    let n = square_side(h, w)?;
    let rows = c * k * k;
    let cols = n * n;
    let mut data = vec![T::zero(); rows * cols];
    im2col_into(x.data(), c, n, k, border, &mut data);
    Ok(ColMatrix {
        rows,
        cols,
        k,
        n,
        pad,
        channels: c,
        data,
    })
}

/// Row-major reshape of a length-n² vector into `[n, n]`.
pub fn vec2mat<T: Scalar>(v: &[T], n: usize) -> Result<Tensor<T>> {
    if v.len() != n * n {
        return Err(CacError::invalid(format!(
            "vec2mat: length {} is not {n}²",
            v.len()
        )));
    }
    Tensor::new(vec![n, n], v.to_vec())
}

/// Shape checks shared by every convolution entry point; returns `(N, C_in, n, C_out, k)`.
pub(crate) fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, c_in, h, wd) = x.dims4()?;
    let n = square_side(h, wd)?;
    let (c_out, wc_in, kh, kw) = w.dims4().map_err(|_| {
        CacError::invalid(format!(
            "kernel must be [C_out, C_in, k, k], got {:?}",
            w.shape()
        ))
    })?;
    if kh != kw {
        return Err(CacError::invalid(format!("kernel must be square, got {kh}x{kw}")));
    }
    validate_kernel_size(kh, pad)?;
    if wc_in != c_in {
        return Err(CacError::invalid(format!(
            "channel mismatch: input has {c_in} channels, kernel expects {wc_in}"
        )));
    }
    Ok((batch, c_in, n, c_out, kh))
}

/// Stride-1 same-padded convolution `[N,C_in,n,n] ⊗ [C_out,C_in,k,k] → [N,C_out,n,n]`
/// computed as one GEMM per sample over the im2col matrix.
///
/// Each output accumulates taps in `(c_in, kernel row, kernel col)` order.
/// Borders are zero padded; see [`conv2d_bordered`] for the other mode.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    conv2d_bordered(x, w, pad, BorderMode::Zero)
}

pub fn conv2d_bordered<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    border: BorderMode,
) -> Result<Tensor<T>> {
    let (batch, c_in, n, c_out, k) = conv_dims(x, w, pad)?;
    let rows = c_in * k * k;
    let cols = n * n;
    let mut out = Tensor::zeros(&[batch, c_out, n, n]);
    let mut scratch = vec![T::zero(); rows * cols];
    for s in 0..batch {
        im2col_into(x.sample(s), c_in, n, k, border, &mut scratch);
        matmul_acc(w.data(), &scratch, out.sample_mut(s), c_out, rows, cols);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    border: BorderMode,
    dy: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (batch, c_in, n, c_out, k) = conv_dims(x, w, pad)?;
    if dy.shape() != [batch, c_out, n, n] {
        return Err(CacError::invalid(format!(
            "output gradient shape {:?} does not match [{batch},{c_out},{n},{n}]",
            dy.shape()
        )));
    }
    let rows = c_in * k * k;
    let cols = n * n;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut scratch = vec![T::zero(); rows * cols];
    let mut dcols = vec![T::zero(); rows * cols];
    for s in 0..batch {
        im2col_into(x.sample(s), c_in, n, k, border, &mut scratch);
        let g = dy.sample(s);
        matmul_abt_acc(g, &scratch, dw.data_mut(), c_out, cols, rows);
        dcols.iter_mut().for_each(|v| *v = T::zero());
        matmul_atb_acc(w.data(), g, &mut dcols, rows, c_out, cols);
        col2im_add(&dcols, c_in, n, k, border, dx.sample_mut(s));
    }
    Ok(Conv2dGrads { dx, dw })
}

/// Per-pixel mean over the channel axis: `[N,C,H,W] → [N,1,H,W]`.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, c, h, w) = x.dims4()?;
    let plane = h * w;
    let m = T::from_usize_lossy(c);
    let mut out = Tensor::zeros(&[batch, 1, h, w]);
    for s in 0..batch {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for ch in 0..c {
            for (d, &v) in dst.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d /= m);
    }
    Ok(out)
}
