//! Content-aware convolution.
//!
//! Every output pixel owns one `k × k` window. A window is scored by the
//! Sobel gradient magnitude of the channel-averaged input at its center,
//! passed through a learnable gate `M = sigmoid(γ·G + β)`. Windows with
//! `M > 0.5` are *sharp* and get the full `k × k` kernel; the rest are
//! *smooth* and get a `1 × 1` kernel made by summing the `k × k` kernel's
//! spatial taps, applied to a single representative pixel of the window.
//!
//! Inference ([`cac_forward_hard`]) gathers the two window sets into
//! separate matrices and scatters the results back. Training
//! ([`cac_forward_soft`]) evaluates both branches everywhere and blends them
//! with `M`, which makes `γ` and `β` differentiable.

mod backward;
mod forward;
mod sobel;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};
use crate::tensor::{BorderMode, Scalar, Tensor};

pub use backward::{cac_backward, cac_backward_with_rho_grad, CacGrads};
pub use forward::{cac_forward_hard, cac_forward_soft, CacCache};
pub use sobel::sobel_gradient;
pub(crate) use sobel::{magnitude, sobel_xy};

/// Which pixel stands in for a smooth window in the `1 × 1` branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbarMode {
    #[default]
    Center,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    /// `M ≡ 1`: every window is sharp and the gate receives no gradient.
    FrozenSharp,
}

/// Trainable state of one CAC layer. The kernel is stored `[C_out, C_in, k, k]`.
///
/// The aggregated `1 × 1` kernel is derived from `weight` on every pass and
/// never cached.
#[derive(Debug, Clone)]
pub struct CacConvParams<T> {
    pub weight: Tensor<T>,
    pub gamma: T,
    pub beta: T,
    pub bias: Option<Tensor<T>>,
    pub pbar: PbarMode,
    pub gate: GateMode,
    /// Border fill for the `k × k` windows. Replicate keeps windows of a
    /// constant region constant all the way to the image edge.
    pub border: BorderMode,
}

impl<T: Scalar> CacConvParams<T> {
    /// Gate starts at `γ = 1, β = 0`, i.e. every window with non-zero gradient is sharp.
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        let (_, _, kh, kw) = weight.dims4().map_err(|_| {
            CacError::invalid(format!(
                "CAC kernel must be [C_out, C_in, k, k], got {:?}",
                weight.shape()
            ))
        })?;
        if kh != kw || kh < 3 || kh % 2 == 0 {
            return Err(CacError::invalid(format!(
                "CAC needs an odd square kernel with k >= 3, got {kh}x{kw}"
            )));
        }
        Ok(CacConvParams {
            weight,
            gamma: T::one(),
            beta: T::zero(),
            bias: None,
            pbar: PbarMode::Center,
            gate: GateMode::Learned,
            border: BorderMode::Replicate,
        })
    }

    pub fn with_gate(mut self, gamma: T, beta: T) -> Self {
        self.gamma = gamma;
        self.beta = beta;
        self
    }

    pub fn with_bias(mut self, bias: Tensor<T>) -> Result<Self> {
        if bias.shape() != [self.c_out()] {
            return Err(CacError::invalid(format!(
                "bias must be [{}], got {:?}",
                self.c_out(),
                bias.shape()
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn with_pbar(mut self, pbar: PbarMode) -> Self {
        self.pbar = pbar;
        self
    }

    pub fn with_gate_mode(mut self, gate: GateMode) -> Self {
        self.gate = gate;
        self
    }

    pub fn with_border(mut self, border: BorderMode) -> Self {
        self.border = border;
        self
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn pad(&self) -> usize {
        (self.k() - 1) / 2
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    /// The aggregated `[C_in, C_out]` kernel for smooth windows.
    pub fn w_phi(&self) -> Tensor<T> {
        aggregate_kernel(&self.weight).expect("weight validated at construction")
    }
}

/// Sums a `[C_out, C_in, k, k]` kernel over its `k²` spatial taps, giving `[C_in, C_out]`.
pub fn aggregate_kernel<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_out, c_in, kh, kw) = w.dims4()?;
    let taps = kh * kw;
    let mut out = Tensor::zeros(&[c_in, c_out]);
    for co in 0..c_out {
        for ci in 0..c_in {
            let base = (co * c_in + ci) * taps;
            let s = w.data()[base..base + taps]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            out.data_mut()[ci * c_out + co] = s;
        }
    }
    Ok(out)
}

/// `[C_out, C_in]` transpose of the aggregated kernel, laid out for GEMM.
pub(crate) fn aggregate_kernel_t<T: Scalar>(w: &Tensor<T>) -> Vec<T> {
    let (c_out, c_in, kh, kw) = w.dims4().expect("validated kernel");
    let taps = kh * kw;
    (0..c_out * c_in)
        .map(|idx| {
            w.data()[idx * taps..(idx + 1) * taps]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v)
        })
        .collect()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `M = sigmoid(γ·G + β)`, elementwise.
pub fn score_map<T: Scalar>(g: &Tensor<T>, gamma: T, beta: T) -> Tensor<T> {
    g.map(|v| sigmoid(gamma * v + beta))
}

/// Sharp windows are exactly those with `M > 0.5`; ties are smooth.
pub fn partition<T: Scalar>(m: &[T]) -> (Vec<bool>, f64) {
    let half = T::lit(0.5);
    let mask: Vec<bool> = m.iter().map(|&v| v > half).collect();
    let sharp = mask.iter().filter(|&&b| b).count();
    let rho = if mask.is_empty() {
        0.0
    } else {
        sharp as f64 / mask.len() as f64
    };
    (mask, rho)
}

/// Window routing of one sample in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPartition<T> {
    /// Gradient magnitude `[n, n]`.
    pub g: Tensor<T>,
    /// Gate scores `[n, n]`.
    pub m: Tensor<T>,
    /// `true` = sharp.
    pub hard_mask: Vec<bool>,
    pub rho_hard: f64,
    pub rho_soft: f64,
}

impl<T: Scalar> WindowPartition<T> {
    pub(crate) fn from_maps(g: Vec<T>, m: Vec<T>, n: usize) -> Self {
        let (hard_mask, rho_hard) = partition(&m);
        let rho_soft = m.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / m.len() as f64;
        WindowPartition {
            g: Tensor::new(vec![n, n], g).expect("n×n map"),
            m: Tensor::new(vec![n, n], m).expect("n×n map"),
            hard_mask,
            rho_hard,
            rho_soft,
        }
    }

    pub fn sharp_indices(&self) -> Vec<usize> {
        (0..self.hard_mask.len()).filter(|&i| self.hard_mask[i]).collect()
    }

    pub fn smooth_indices(&self) -> Vec<usize> {
        (0..self.hard_mask.len()).filter(|&i| !self.hard_mask[i]).collect()
    }

    /// CSV with header `index,G,M,sharp`, one row per window in raster order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,G,M,sharp")?;
        for (i, ((g, m), sharp)) in self
            .g
            .data()
            .iter()
            .zip(self.m.data())
            .zip(&self.hard_mask)
            .enumerate()
        {
            writeln!(out, "{i},{g},{m},{}", u8::from(*sharp))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aggregate_kernel_cases() {
        let ones = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        assert_eq!(aggregate_kernel(&ones).unwrap().data(), &[9.0]);

        let mut center = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        center.data_mut()[4] = 1.0;
        assert_eq!(aggregate_kernel(&center).unwrap().data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = Tensor::<f64>::from_fn(&[8, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let agg = aggregate_kernel(&w).unwrap();
        assert_eq!(agg.shape(), &[4, 8]);
        for ci in 0..4 {
            for co in 0..8 {
                let mut s = 0.0;
                for kr in 0..3 {
                    for kc in 0..3 {
                        s += w.data()[((co * 4 + ci) * 3 + kr) * 3 + kc];
                    }
                }
                assert!((agg.data()[ci * 8 + co] - s).abs() < 1e-14);
            }
        }
        let t = aggregate_kernel_t(&w);
        for ci in 0..4 {
            for co in 0..8 {
                assert_eq!(t[co * 4 + ci], agg.data()[ci * 8 + co]);
            }
        }
    }

    #[test]
    fn aggregate_kernel_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = Tensor::<f64>::from_fn(&[2, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[2, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
        let (s, t) = (0.7, -1.3);
        let mixed = a.scale(s).add(&b.scale(t)).unwrap();
        let lhs = aggregate_kernel(&mixed).unwrap();
        let rhs = aggregate_kernel(&a)
            .unwrap()
            .scale(s)
            .add(&aggregate_kernel(&b).unwrap().scale(t))
            .unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn score_map_values() {
        let g = Tensor::<f64>::new(vec![2], vec![0.0, 4.0]).unwrap();
        let m = score_map(&g, 1.0, 0.0);
        assert_eq!(m.data()[0], 0.5);
        assert!((m.data()[1] - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!((m.data()[1] - 0.982_013_790_037_908_5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let g = Tensor::<f64>::from_fn(&[16], |_| rng.random_range(0.0..5.0));
        let m = score_map(&g, 2.0, -1.0);
        for (gv, mv) in g.data().iter().zip(m.data()) {
            let want = 1.0 / (1.0 + (-(2.0 * gv - 1.0)).exp());
            assert!((mv - want).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid(-1e4f32), 0.0);
        assert_eq!(sigmoid(1e4f32), 1.0);
        assert!(sigmoid(-50.0f64) > 0.0);
    }

    #[test]
    fn partition_cases() {
        let (mask, rho) = partition(&[0.5f32; 9]);
        assert!(mask.iter().all(|&b| !b));
        assert_eq!(rho, 0.0);

        let (mask, rho) = partition(&[0.6f32; 9]);
        assert!(mask.iter().all(|&b| b));
        assert_eq!(rho, 1.0);

        let alt: Vec<f32> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 0.4 } else { 0.6 }).collect();
        assert_eq!(partition(&alt).1, 0.5);
    }

    #[test]
    fn params_validation() {
        assert!(CacConvParams::new(Tensor::<f32>::zeros(&[2, 2, 1, 1])).is_err());
        assert!(CacConvParams::new(Tensor::<f32>::zeros(&[2, 2, 4, 4])).is_err());
        let p = CacConvParams::new(Tensor::<f32>::zeros(&[4, 2, 3, 3])).unwrap();
        assert_eq!((p.k(), p.pad(), p.c_in(), p.c_out()), (3, 1, 2, 4));
        assert!(p.clone().with_bias(Tensor::zeros(&[3])).is_err());
        assert!(p.with_bias(Tensor::zeros(&[4])).is_ok());
    }

    #[test]
    fn w_phi_tracks_weight_updates() {
        let mut p = CacConvParams::new(Tensor::<f64>::full(&[1, 1, 3, 3], 1.0)).unwrap();
        assert_eq!(p.w_phi().data(), &[9.0]);
        p.weight.data_mut()[0] = 2.0;
        assert_eq!(p.w_phi().data(), &[10.0]);
    }

    #[test]
    fn csv_export_header_and_rows() {
        let part = WindowPartition::<f32>::from_maps(vec![0.0, 1.0, 2.0, 3.0], vec![0.5, 0.7, 0.9, 0.95], 2);
        let mut buf = Vec::new();
        part.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,G,M,sharp");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "0,0,0.5,0");
        assert_eq!(lines[2], "1,1,0.7,1");
        assert_eq!(part.rho_hard, 0.75);
    }
}
