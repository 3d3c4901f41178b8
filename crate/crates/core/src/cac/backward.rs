//! Reverse mode of the soft CAC forward.
//!
//! The kernel gradient has two sources: the `k × k` branch directly, and the
//! `1 × 1` branch through `w_Φ = Σ_j w_j`, which hands every spatial tap of
//! `W[co, ci]` the same contribution. The input gradient likewise has three:
//! the `k × k` windows, the representative pixels, and the gate path
//! `x → X̄ → Sobel → G → M`.

use super::forward::CacCache;
use super::sobel::sobel_xy_adjoint_add;
use super::{GateMode, PbarMode};
use crate::error::{CacError, Result};
use crate::tensor::gemm::{matmul_abt_acc, matmul_atb_acc};
use crate::tensor::{col2im_add, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct CacGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub dgamma: T,
    pub dbeta: T,
    pub dbias: Option<Tensor<T>>,
}

/// Exact gradients of the soft forward for output gradient `dy`.
pub fn cac_backward<T: Scalar>(cache: &CacCache<T>, dy: &Tensor<T>) -> Result<CacGrads<T>> {
    cac_backward_with_rho_grad(cache, dy, T::zero())
}

/// As [`cac_backward`], plus an extra upstream gradient `d_rho` on the
/// batch-mean soft ratio `ρ = mean_{s,i} M[s,i]`, as produced by a cost term.
pub fn cac_backward_with_rho_grad<T: Scalar>(
    cache: &CacCache<T>,
    dy: &Tensor<T>,
    d_rho: T,
) -> Result<CacGrads<T>> {
    let params = &cache.params;
    let (batch, c_in, n) = (cache.x_shape[0], cache.x_shape[1], cache.x_shape[2]);
    let k = params.k();
    let c_out = params.c_out();
    let rows = c_in * k * k;
    let plane = n * n;
    if dy.shape() != [batch, c_out, n, n] {
        return Err(CacError::invalid(format!(
            "output gradient shape {:?} does not match cached [{batch},{c_out},{n},{n}]",
            dy.shape()
        )));
    }
    let learned = params.gate == GateMode::Learned;
    let d_m_uniform = d_rho / T::from_usize_lossy(batch * plane);
    let inv_c = T::one() / T::from_usize_lossy(c_in);
    let inv_taps = T::one() / T::from_usize_lossy(k * k);

    let mut dx = Tensor::zeros(&cache.x_shape);
    let mut dw = Tensor::zeros(params.weight.shape());
    let mut dwphi_t = vec![T::zero(); c_out * c_in];
    let mut dgamma = T::zero();
    let mut dbeta = T::zero();
    let mut dbias = params.bias.as_ref().map(|b| Tensor::zeros(b.shape()));

    let mut da = vec![T::zero(); c_out * plane];
    let mut db = vec![T::zero(); c_out * plane];
    let mut dcols = vec![T::zero(); rows * plane];
    let mut dpbar = vec![T::zero(); c_in * plane];

    for (s, sc) in cache.samples.iter().enumerate() {
        let g_out = dy.sample(s);
        let dxs = dx.sample_mut(s);

        if let Some(dbias) = dbias.as_mut() {
            for (co, d) in dbias.data_mut().iter_mut().enumerate() {
                *d += g_out[co * plane..(co + 1) * plane]
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v);
            }
        }

        if learned {
            for co in 0..c_out {
                for p in 0..plane {
                    let i = co * plane + p;
                    da[i] = sc.m[p] * g_out[i];
                    db[i] = (T::one() - sc.m[p]) * g_out[i];
                }
            }
        } else {
            da.copy_from_slice(g_out);
        }

        // k×k branch
        matmul_abt_acc(&da, &sc.cols, dw.data_mut(), c_out, plane, rows);
        dcols.iter_mut().for_each(|v| *v = T::zero());
        matmul_atb_acc(params.weight.data(), &da, &mut dcols, rows, c_out, plane);
        col2im_add(&dcols, c_in, n, k, params.border, dxs);

        if !learned {
            continue;
        }

        // 1×1 branch
        matmul_abt_acc(&db, &sc.pbar, &mut dwphi_t, c_out, plane, c_in);
        dpbar.iter_mut().for_each(|v| *v = T::zero());
        matmul_atb_acc(&cache.wphi_t, &db, &mut dpbar, c_in, c_out, plane);
        match params.pbar {
            PbarMode::Center => {
                for (d, &v) in dxs.iter_mut().zip(&dpbar) {
                    *d += v;
                }
            }
            PbarMode::Mean => {
                let half = (k / 2) as isize;
                for ch in 0..c_in {
                    let dplane = &mut dxs[ch * plane..(ch + 1) * plane];
                    for p in 0..plane {
                        let share = dpbar[ch * plane + p] * inv_taps;
                        let (i, j) = ((p / n) as isize, (p % n) as isize);
                        for dr in -half..=half {
                            for dc in -half..=half {
                                if let (Some(si), Some(sj)) = (
                                    params.border.resolve(i + dr, n),
                                    params.border.resolve(j + dc, n),
                                ) {
                                    dplane[si * n + sj] += share;
                                }
                            }
                        }
                    }
                }
            }
        }

        // gate path: M = σ(γG + β), G = |∇ X̄|
        let mut dgx = vec![T::zero(); plane];
        let mut dgy = vec![T::zero(); plane];
        for p in 0..plane {
            let mut dm = d_m_uniform;
            for co in 0..c_out {
                let i = co * plane + p;
                dm += g_out[i] * (sc.a[i] - sc.b[i]);
            }
            let mv = sc.m[p];
            let dz = dm * mv * (T::one() - mv);
            dgamma += dz * sc.g[p];
            dbeta += dz;
            let gv = sc.g[p];
            if gv > T::zero() {
                let dg = dz * params.gamma / gv;
                dgx[p] = dg * sc.gx[p];
                dgy[p] = dg * sc.gy[p];
            }
        }
        let mut dxbar = vec![T::zero(); plane];
        sobel_xy_adjoint_add(&dgx, &dgy, n, n, &mut dxbar);
        for ch in 0..c_in {
            for (d, &v) in dxs[ch * plane..(ch + 1) * plane].iter_mut().zip(&dxbar) {
                *d += v * inv_c;
            }
        }
    }

    if learned {
        let taps = k * k;
        for (idx, &g) in dwphi_t.iter().enumerate() {
            dw.data_mut()[idx * taps..(idx + 1) * taps]
                .iter_mut()
                .for_each(|v| *v += g);
        }
    }

    Ok(CacGrads {
        dx,
        dw,
        dgamma,
        dbeta,
        dbias,
    })
}
