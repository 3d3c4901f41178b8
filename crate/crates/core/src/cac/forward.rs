use super::{aggregate_kernel_t, magnitude, sigmoid, sobel_xy, CacConvParams, GateMode, PbarMode, WindowPartition};
use crate::error::{CacError, Result};
use crate::tensor::gemm::matmul_acc;
use crate::tensor::{channel_mean, im2col_gather, im2col_into, BorderMode, Scalar, Tensor};

/// Per-sample gate quantities.
pub(crate) struct GateMaps<T> {
    pub gx: Vec<T>,
    pub gy: Vec<T>,
    pub g: Vec<T>,
    pub m: Vec<T>,
}

fn gate_maps<T: Scalar>(xbar: &[T], n: usize, params: &CacConvParams<T>) -> GateMaps<T> {
    let (gx, gy) = sobel_xy(xbar, n, n);
    let g = magnitude(&gx, &gy);
    let m = match params.gate {
        GateMode::Learned => g
            .iter()
            .map(|&v| sigmoid(params.gamma * v + params.beta))
            .collect(),
        GateMode::FrozenSharp => vec![T::one(); g.len()],
    };
    GateMaps { gx, gy, g, m }
}

/// Representative pixel of each window centred on `centers`, packed `[c × centers.len()]`.
pub(crate) fn pbar_gather<T: Scalar>(
    src: &[T],
    c: usize,
    n: usize,
    k: usize,
    mode: PbarMode,
    border: BorderMode,
    centers: &[usize],
    out: &mut [T],
) {
    let plane_len = n * n;
    let cols = centers.len();
    let half = (k / 2) as isize;
    let taps = T::from_usize_lossy(k * k);
    for ch in 0..c {
        let plane = &src[ch * plane_len..(ch + 1) * plane_len];
        let dst = &mut out[ch * cols..(ch + 1) * cols];
        for (d, &p) in dst.iter_mut().zip(centers) {
            *d = match mode {
                PbarMode::Center => plane[p],
                PbarMode::Mean => {
                    let (i, j) = ((p / n) as isize, (p % n) as isize);
                    let mut acc = T::zero();
                    for dr in -half..=half {
                        for dc in -half..=half {
                            if let (Some(si), Some(sj)) =
                                (border.resolve(i + dr, n), border.resolve(j + dc, n))
                            {
                                acc += plane[si * n + sj];
                            }
                        }
                    }
                    acc / taps
                }
            };
        }
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, params: &CacConvParams<T>) -> Result<(usize, usize, usize)> {
    let (batch, c_in, h, w) = x.dims4()?;
    if h != w {
        return Err(CacError::invalid(format!("spatial dims must be square, got {h}x{w}")));
    }
    if h < params.k() {
        return Err(CacError::invalid(format!(
            "spatial size {h} is smaller than the kernel size {}",
            params.k()
        )));
    }
    if c_in != params.c_in() {
        return Err(CacError::invalid(format!(
            "channel mismatch: input has {c_in} channels, kernel expects {}",
            params.c_in()
        )));
    }
    Ok((batch, c_in, h))
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * plane..(co + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
}

/// Inference-mode CAC: sharp windows go through the `k × k` kernel, smooth
/// windows through the aggregated `1 × 1` kernel, each as its own packed GEMM,
/// and the results are scattered to their output pixels.
///
/// The mask is computed per sample; different batch elements route differently.
pub fn cac_forward_hard<T: Scalar>(
    x: &Tensor<T>,
    params: &CacConvParams<T>,
) -> Result<(Tensor<T>, Vec<WindowPartition<T>>)> {
    let (batch, c_in, n) = check_input(x, params)?;
    let k = params.k();
    let c_out = params.c_out();
    let rows = c_in * k * k;
    let plane = n * n;
    let xbar = channel_mean(x)?;
    let wphi_t = aggregate_kernel_t(&params.weight);

    let mut out = Tensor::zeros(&[batch, c_out, n, n]);
    let mut partitions = Vec::with_capacity(batch);
    for s in 0..batch {
        let src = x.sample(s);
        let maps = gate_maps(xbar.sample(s), n, params);
        let part = WindowPartition::from_maps(maps.g, maps.m, n);
        let sharp = part.sharp_indices();
        let smooth = part.smooth_indices();
        let dst = out.sample_mut(s);

        if !sharp.is_empty() {
            let cols = sharp.len();
            let mut packed = vec![T::zero(); rows * cols];
            im2col_gather(src, c_in, n, k, params.border, &sharp, &mut packed);
            let mut ys = vec![T::zero(); c_out * cols];
            matmul_acc(params.weight.data(), &packed, &mut ys, c_out, rows, cols);
            for co in 0..c_out {
                for (t, &p) in sharp.iter().enumerate() {
                    dst[co * plane + p] = ys[co * cols + t];
                }
            }
        }
        if !smooth.is_empty() {
            let cols = smooth.len();
            let mut pbar = vec![T::zero(); c_in * cols];
            pbar_gather(src, c_in, n, k, params.pbar, params.border, &smooth, &mut pbar);
            let mut yf = vec![T::zero(); c_out * cols];
            matmul_acc(&wphi_t, &pbar, &mut yf, c_out, c_in, cols);
            for co in 0..c_out {
                for (t, &p) in smooth.iter().enumerate() {
                    dst[co * plane + p] = yf[co * cols + t];
                }
            }
        }
        add_bias(dst, params.bias.as_ref(), plane);
        partitions.push(part);
    }
    Ok((out, partitions))
}

pub(crate) struct SampleCache<T> {
    pub cols: Vec<T>,
    pub pbar: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub gx: Vec<T>,
    pub gy: Vec<T>,
    pub g: Vec<T>,
    pub m: Vec<T>,
}

/// Everything [`cac_backward`](super::cac_backward) needs from a soft forward pass.
pub struct CacCache<T> {
    pub(crate) x_shape: Vec<usize>,
    pub(crate) params: CacConvParams<T>,
    pub(crate) wphi_t: Vec<T>,
    pub(crate) samples: Vec<SampleCache<T>>,
}

impl<T: Scalar> CacCache<T> {
    pub fn batch(&self) -> usize {
        self.samples.len()
    }

    /// Batch-mean of the soft ratio `mean(M)`.
    pub fn rho_soft(&self) -> f64 {
        let per: f64 = self
            .samples
            .iter()
            .map(|s| s.m.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / s.m.len() as f64)
            .sum();
        per / self.samples.len() as f64
    }
}

/// Training-mode CAC: `y_i = M_i·(k×k branch)_i + (1 − M_i)·(1×1 branch)_i`.
pub fn cac_forward_soft<T: Scalar>(
    x: &Tensor<T>,
    params: &CacConvParams<T>,
) -> Result<(Tensor<T>, Vec<WindowPartition<T>>, CacCache<T>)> {
    let (batch, c_in, n) = check_input(x, params)?;
    let k = params.k();
    let c_out = params.c_out();
    let rows = c_in * k * k;
    let plane = n * n;
    let xbar = channel_mean(x)?;
    let wphi_t = aggregate_kernel_t(&params.weight);
    let all: Vec<usize> = (0..plane).collect();

    let mut out = Tensor::zeros(&[batch, c_out, n, n]);
    let mut partitions = Vec::with_capacity(batch);
    let mut samples = Vec::with_capacity(batch);
    for s in 0..batch {
        let src = x.sample(s);
        let maps = gate_maps(xbar.sample(s), n, params);

        let mut cols = vec![T::zero(); rows * plane];
        im2col_into(src, c_in, n, k, params.border, &mut cols);
        let mut a = vec![T::zero(); c_out * plane];
        matmul_acc(params.weight.data(), &cols, &mut a, c_out, rows, plane);

        let dst = out.sample_mut(s);
        let (pbar, b) = match params.gate {
            GateMode::FrozenSharp => {
                dst.copy_from_slice(&a);
                (Vec::new(), Vec::new())
            }
            GateMode::Learned => {
                let mut pbar = vec![T::zero(); c_in * plane];
                pbar_gather(src, c_in, n, k, params.pbar, params.border, &all, &mut pbar);
                let mut b = vec![T::zero(); c_out * plane];
                matmul_acc(&wphi_t, &pbar, &mut b, c_out, c_in, plane);
                for co in 0..c_out {
                    for p in 0..plane {
                        let i = co * plane + p;
                        let mv = maps.m[p];
                        dst[i] = mv * a[i] + (T::one() - mv) * b[i];
                    }
                }
                (pbar, b)
            }
        };
        add_bias(dst, params.bias.as_ref(), plane);

        partitions.push(WindowPartition::from_maps(maps.g.clone(), maps.m.clone(), n));
        samples.push(SampleCache {
            cols,
            pbar,
            a,
            b,
            gx: maps.gx,
            gy: maps.gy,
            g: maps.g,
            m: maps.m,
        });
    }
    let cache = CacCache {
        x_shape: x.shape().to_vec(),
        params: params.clone(),
        wphi_t,
        samples,
    };
    Ok((out, partitions, cache))
}
