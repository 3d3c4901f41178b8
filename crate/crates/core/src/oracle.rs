//! Loop-level reference implementations and finite differences.
//!
//! Nothing here calls into the im2col/GEMM paths it is used to check. The
//! direct loops accumulate in the same `(c_in, kernel row, kernel col)` order
//! as the fast paths, so agreement can be demanded bit for bit where the
//! arithmetic is the same.

use crate::cac::{CacConvParams, GateMode, PbarMode};
use crate::error::{CacError, Result};
use crate::tensor::{BorderMode, Scalar, Tensor};

/// Tally of scalar multiply-accumulates executed.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MaddsCounter {
    pub count: u64,
}

impl MaddsCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    fn bump(counter: &mut Option<&mut MaddsCounter>, by: u64) {
        if let Some(c) = counter.as_deref_mut() {
            c.count += by;
        }
    }
}

fn tap<T: Scalar>(plane: &[T], n: usize, i: isize, j: isize, border: BorderMode) -> T {
    let inside = |v: isize| v >= 0 && (v as usize) < n;
    if inside(i) && inside(j) {
        return plane[i as usize * n + j as usize];
    }
    match border {
        BorderMode::Zero => T::zero(),
        BorderMode::Replicate => {
            let ci = i.clamp(0, n as isize - 1) as usize;
            let cj = j.clamp(0, n as isize - 1) as usize;
            plane[ci * n + cj]
        }
    }
}

fn naive_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, c_in, h, wd) = x.dims4()?;
    let (c_out, wc, kh, kw) = w.dims4()?;
    if h != wd || kh != kw || wc != c_in || kh % 2 == 0 || pad != kh / 2 {
        return Err(CacError::invalid(format!(
            "conv2d_naive: incompatible input {:?}, kernel {:?}, pad {pad}",
            x.shape(),
            w.shape()
        )));
    }
    Ok((batch, c_in, h, c_out, kh))
}

/// Direct six-loop convolution with zero padding. Each output scalar costs
/// `k²·c_in` counted MAdds, padded taps included.
pub fn conv2d_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    counter: Option<&mut MaddsCounter>,
) -> Result<Tensor<T>> {
    conv2d_naive_bordered(x, w, pad, BorderMode::Zero, counter)
}

pub fn conv2d_naive_bordered<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    border: BorderMode,
    mut counter: Option<&mut MaddsCounter>,
) -> Result<Tensor<T>> {
    let (batch, c_in, n, c_out, k) = naive_dims(x, w, pad)?;
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(&[batch, c_out, n, n]);
    let plane = n * n;
    for s in 0..batch {
        let src = x.sample(s);
        for co in 0..c_out {
            for i in 0..n {
                for j in 0..n {
                    let mut acc = T::zero();
                    for ci in 0..c_in {
                        let xp = &src[ci * plane..(ci + 1) * plane];
                        for kr in 0..k {
                            for kc in 0..k {
                                let wv = w.data()[((co * c_in + ci) * k + kr) * k + kc];
                                let xv = tap(
                                    xp,
                                    n,
                                    i as isize + kr as isize - half,
                                    j as isize + kc as isize - half,
                                    border,
                                );
                                acc += wv * xv;
                                MaddsCounter::bump(&mut counter, 1);
                            }
                        }
                    }
                    out.data_mut()[((s * c_out + co) * n + i) * n + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn sigmoid_ref<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Per-window transcription of the CAC procedure.
///
/// Counts `k²·c_in` MAdds per output scalar of a sharp window and `c_in` per
/// output scalar of a smooth one; score-map work is not counted.
pub fn cac_forward_naive<T: Scalar>(
    x: &Tensor<T>,
    params: &CacConvParams<T>,
    mut counter: Option<&mut MaddsCounter>,
) -> Result<Tensor<T>> {
    let w = &params.weight;
    let k = params.k();
    let (batch, c_in, n, c_out, _) = naive_dims(x, w, params.pad())?;
    if n < k {
        return Err(CacError::invalid("cac_forward_naive: image smaller than kernel"));
    }
    let plane = n * n;
    let half = (k / 2) as isize;
    let two = T::lit(2.0);
    let border = params.border;

    // 1×1 kernel: sum of spatial taps
    let mut wphi = vec![T::zero(); c_in * c_out];
    for ci in 0..c_in {
        for co in 0..c_out {
            let mut acc = T::zero();
            for kr in 0..k {
                for kc in 0..k {
                    acc += w.data()[((co * c_in + ci) * k + kr) * k + kc];
                }
            }
            wphi[ci * c_out + co] = acc;
        }
    }

    let mut out = Tensor::zeros(&[batch, c_out, n, n]);
    for s in 0..batch {
        let src = x.sample(s);
        // channel average
        let mut xbar = vec![T::zero(); plane];
        for ci in 0..c_in {
            for p in 0..plane {
                xbar[p] += src[ci * plane + p];
            }
        }
        let m_count = T::from_usize_lossy(c_in);
        for v in xbar.iter_mut() {
            *v /= m_count;
        }
        // Sobel with replicate padding, separable
        let at = |img: &[T], i: isize, j: isize| {
            let ci = i.clamp(0, n as isize - 1) as usize;
            let cj = j.clamp(0, n as isize - 1) as usize;
            img[ci * n + cj]
        };
        let mut hx = vec![T::zero(); plane];
        let mut hy = vec![T::zero(); plane];
        for i in 0..n as isize {
            for j in 0..n as isize {
                let l = at(&xbar, i, j - 1);
                let c = at(&xbar, i, j);
                let r = at(&xbar, i, j + 1);
                hx[i as usize * n + j as usize] = r - l;
                hy[i as usize * n + j as usize] = l + two * c + r;
            }
        }
        let mut sharp = vec![false; plane];
        for i in 0..n as isize {
            for j in 0..n as isize {
                let gx = at(&hx, i - 1, j) + two * at(&hx, i, j) + at(&hx, i + 1, j);
                let gy = at(&hy, i + 1, j) - at(&hy, i - 1, j);
                let g = (gx * gx + gy * gy).sqrt();
                let m = match params.gate {
                    GateMode::Learned => sigmoid_ref(params.gamma * g + params.beta),
                    GateMode::FrozenSharp => T::one(),
                };
                sharp[i as usize * n + j as usize] = m > T::lit(0.5);
            }
        }

        for co in 0..c_out {
            for i in 0..n {
                for j in 0..n {
                    let p = i * n + j;
                    let mut acc = T::zero();
                    if sharp[p] {
                        for ci in 0..c_in {
                            let xp = &src[ci * plane..(ci + 1) * plane];
                            for kr in 0..k {
                                for kc in 0..k {
                                    let wv = w.data()[((co * c_in + ci) * k + kr) * k + kc];
                                    let xv = tap(
                                        xp,
                                        n,
                                        i as isize + kr as isize - half,
                                        j as isize + kc as isize - half,
                                        border,
                                    );
                                    acc += wv * xv;
                                    MaddsCounter::bump(&mut counter, 1);
                                }
                            }
                        }
                    } else {
                        for ci in 0..c_in {
                            let xp = &src[ci * plane..(ci + 1) * plane];
                            let pbar = match params.pbar {
                                PbarMode::Center => xp[p],
                                PbarMode::Mean => {
                                    let mut sum = T::zero();
                                    for dr in -half..=half {
                                        for dc in -half..=half {
                                            let (ti, tj) = (i as isize + dr, j as isize + dc);
                                            sum += tap(xp, n, ti, tj, border);
                                        }
                                    }
                                    sum / T::from_usize_lossy(k * k)
                                }
                            };
                            acc += pbar * wphi[ci * c_out + co];
                            MaddsCounter::bump(&mut counter, 1);
                        }
                    }
                    if let Some(b) = &params.bias {
                        acc += b.data()[co];
                    }
                    out.data_mut()[((s * c_out + co) * n + i) * n + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Central differences `(f(θ + εe_i) − f(θ − εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    theta: &[T],
    eps: T,
) -> Result<Vec<T>> {
    if !(eps > T::zero()) {
        return Err(CacError::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(CacError::numeric(
                format!("finite_diff_grad coordinate {i}"),
                format!("f(θ±ε) = ({up}, {down})"),
            ));
        }
        grad.push((up - down) / (eps + eps));
    }
    Ok(grad)
}

/// Step used for 64-bit gradient checks. Small enough that a perturbation
/// rarely pushes a ReLU input across zero, large enough that rounding in the
/// difference stays near 1e-11.
pub const FD_EPS_F64: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_quadratic_and_sum() {
        let g = finite_diff_grad(|t: &[f64]| t[0] * t[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
        let g = finite_diff_grad(|t: &[f64]| t.iter().sum(), &[0.3, -2.0, 5.0], 1e-3).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_reports_non_finite_coordinate() {
        let err = finite_diff_grad(|t: &[f64]| if t[1] > 1.0 { f64::NAN } else { t[1] }, &[0.0, 1.0], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
        assert!(finite_diff_grad(|t: &[f64]| t[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn naive_identity_kernel_counts() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let mut c = MaddsCounter::new();
        let y = conv2d_naive(&x, &w, 0, Some(&mut c)).unwrap();
        assert_eq!(y, x);
        assert_eq!(c.count, 16);
    }

    #[test]
    fn naive_counter_matches_dense_formula() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        let mut c = MaddsCounter::new();
        conv2d_naive(&x, &w, 1, Some(&mut c)).unwrap();
        assert_eq!(c.count, 864);
    }

    #[test]
    fn naive_shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d_naive(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, None).is_err());
        assert!(conv2d_naive(&x, &Tensor::zeros(&[1, 2, 3, 3]), 0, None).is_err());
    }
}
