//! Separable Sobel gradient magnitude with replicate padding.

use crate::error::{CacError, Result};
use crate::tensor::{Scalar, Tensor};

#[inline]
fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses of one `h × w` plane.
///
/// `gx`: `[-1, 0, +1]` along the row, then `[1, 2, 1]` down the column.
/// `gy`: `[1, 2, 1]` along the row, then `[-1, 0, +1]` down the column.
pub(crate) fn sobel_xy<T: Scalar>(plane: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let two = T::lit(2.0);
    let mut hx = vec![T::zero(); h * w];
    let mut hy = vec![T::zero(); h * w];
    for i in 0..h {
        let row = &plane[i * w..(i + 1) * w];
        for j in 0..w {
            let left = row[clamp(j as isize - 1, w)];
            let right = row[clamp(j as isize + 1, w)];
            hx[i * w + j] = right - left;
            hy[i * w + j] = left + two * row[j] + right;
        }
    }
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for i in 0..h {
        let up = clamp(i as isize - 1, h) * w;
        let down = clamp(i as isize + 1, h) * w;
        for j in 0..w {
            gx[i * w + j] = hx[up + j] + two * hx[i * w + j] + hx[down + j];
            gy[i * w + j] = hy[down + j] - hy[up + j];
        }
    }
    (gx, gy)
}

pub(crate) fn magnitude<T: Scalar>(gx: &[T], gy: &[T]) -> Vec<T> {
    gx.iter()
        .zip(gy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect()
}

/// Adjoint of [`sobel_xy`]: accumulates `∂/∂plane` of `⟨gx, dgx⟩ + ⟨gy, dgy⟩` into `out`.
pub(crate) fn sobel_xy_adjoint_add<T: Scalar>(
    dgx: &[T],
    dgy: &[T],
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let two = T::lit(2.0);
    let mut dhx = vec![T::zero(); h * w];
    let mut dhy = vec![T::zero(); h * w];
    for i in 0..h {
        let up = clamp(i as isize - 1, h) * w;
        let down = clamp(i as isize + 1, h) * w;
        for j in 0..w {
            let gx = dgx[i * w + j];
            dhx[up + j] += gx;
            dhx[i * w + j] += two * gx;
            dhx[down + j] += gx;
            let gy = dgy[i * w + j];
            dhy[down + j] += gy;
            dhy[up + j] -= gy;
        }
    }
    for i in 0..h {
        let row = &mut out[i * w..(i + 1) * w];
        for j in 0..w {
            let l = clamp(j as isize - 1, w);
            let r = clamp(j as isize + 1, w);
            let ax = dhx[i * w + j];
            let ay = dhy[i * w + j];
            row[r] += ax;
            row[l] -= ax;
            row[l] += ay;
            row[j] += two * ay;
            row[r] += ay;
        }
    }
}

/// Gradient magnitude `G = sqrt(Gx² + Gy²)` of a single-channel `[N,1,H,W]` map.
pub fn sobel_gradient<T: Scalar>(xbar: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, c, h, w) = xbar.dims4()?;
    if c != 1 {
        return Err(CacError::invalid(format!(
            "sobel_gradient expects a single channel, got {c} (apply channel_mean first)"
        )));
    }
    let mut out = Tensor::zeros(xbar.shape());
    for s in 0..batch {
        let (gx, gy) = sobel_xy(xbar.sample(s), h, w);
        out.sample_mut(s).copy_from_slice(&magnitude(&gx, &gy));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full 3×3 Sobel kernels applied with replicate padding.
    fn sobel_full(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let mut g = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut sx, mut sy) = (0.0, 0.0);
                for a in 0..3 {
                    for b in 0..3 {
                        let r = clamp(i as isize + a as isize - 1, h);
                        let c = clamp(j as isize + b as isize - 1, w);
                        let v = x[r * w + c];
                        sx += kx[a][b] * v;
                        sy += kx[b][a] * v;
                    }
                }
                g[i * w + j] = (sx * sx + sy * sy).sqrt();
            }
        }
        g
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let x = Tensor::<f32>::full(&[1, 1, 6, 6], 5.0);
        let g = sobel_gradient(&x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_gives_four_next_to_the_edge() {
        let (n, step) = (8, 4);
        let x = Tensor::<f64>::from_fn(&[1, 1, n, n], |i| if i % n >= step { 1.0 } else { 0.0 });
        let g = sobel_gradient(&x).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if j == step - 1 || j == step { 4.0 } else { 0.0 };
                assert_eq!(g.data()[i * n + j], want, "pixel ({i},{j})");
            }
        }
        assert_eq!(g.data(), sobel_full(x.data(), n, n).as_slice());
    }

    #[test]
    fn separable_matches_full_kernel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(h, w) in &[(5, 5), (7, 4), (1, 3), (9, 9)] {
            let x = Tensor::<f64>::from_fn(&[1, 1, h, w], |_| rng.random_range(-2.0..2.0));
            let g = sobel_gradient(&x).unwrap();
            let want = sobel_full(x.data(), h, w);
            for (a, b) in g.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn multi_channel_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(sobel_gradient(&x).is_err());
    }

    #[test]
    fn translation_equivariant_away_from_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10;
        let x = Tensor::<f64>::from_fn(&[1, 1, n, n], |_| rng.random_range(0.0..1.0));
        // shift right by one column
        let shifted = Tensor::<f64>::from_fn(&[1, 1, n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            x.data()[i * n + j.saturating_sub(1)]
        });
        let g = sobel_gradient(&x).unwrap();
        let gs = sobel_gradient(&shifted).unwrap();
        for i in 2..n - 2 {
            for j in 3..n - 2 {
                assert_eq!(gs.data()[i * n + j], g.data()[i * n + j - 1]);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (6, 5);
        let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dgx: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dgy: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gx, gy) = sobel_xy(&x, h, w);
        let lhs: f64 = gx.iter().zip(&dgx).chain(gy.iter().zip(&dgy)).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; h * w];
        sobel_xy_adjoint_add(&dgx, &dgy, h, w, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
