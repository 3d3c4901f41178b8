//! Stateless forward/backward kernels for the non-convolutional layers.

use crate::error::{CacError, Result};
use crate::tensor::gemm::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Batch statistics and normalised activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn bn_dims<T: Scalar>(x: &Tensor<T>, c: usize) -> Result<(usize, usize)> {
    match *x.shape() {
        [b, ch, h, w] if ch == c => Ok((b, h * w)),
        [b, ch] if ch == c => Ok((b, 1)),
        _ => Err(CacError::invalid(format!(
            "batchnorm over {c} channels got input {:?}",
            x.shape()
        ))),
    }
}

/// Training-mode batch normalisation over `(N, H, W)` per channel.
pub fn batchnorm_train<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = weight.len();
    let (batch, plane) = bn_dims(x, c)?;
    let count = T::from_usize_lossy(batch * plane);
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let src = x.data();
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..batch {
            let off = (s * c + ch) * plane;
            for &v in &src[off..off + plane] {
                acc += v;
            }
        }
        mean[ch] = acc / count;
        let mut acc = T::zero();
        for s in 0..batch {
            let off = (s * c + ch) * plane;
            for &v in &src[off..off + plane] {
                let d = v - mean[ch];
                acc += d * d;
            }
        }
        var[ch] = acc / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for s in 0..batch {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for p in off..off + plane {
                let h = (src[p] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[p] = h;
                y.data_mut()[p] = weight[ch] * h + bias[ch];
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std, mean, var }))
}

/// Eval-mode batch normalisation with fixed statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor<T>> {
    let c = weight.len();
    let (batch, plane) = bn_dims(x, c)?;
    let eps = T::lit(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    for s in 0..batch {
        for ch in 0..c {
            let inv = T::one() / (running_var[ch] + eps).sqrt();
            let off = (s * c + ch) * plane;
            for p in off..off + plane {
                y.data_mut()[p] = weight[ch] * (x.data()[p] - running_mean[ch]) * inv + bias[ch];
            }
        }
    }
    Ok(y)
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn batchnorm_backward<T: Scalar>(cache: &BnCache<T>, weight: &[T], dy: &Tensor<T>) -> Result<BnGrads<T>> {
    cache.xhat.expect_same_shape(dy)?;
    let c = weight.len();
    let (batch, plane) = bn_dims(dy, c)?;
    let count = T::from_usize_lossy(batch * plane);
    let mut dweight = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    for s in 0..batch {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for p in off..off + plane {
                dbias[ch] += dy.data()[p];
                dweight[ch] += dy.data()[p] * cache.xhat.data()[p];
            }
        }
    }
    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
    let mut dx = Tensor::zeros(dy.shape());
    for s in 0..batch {
        for ch in 0..c {
            let scale = weight[ch] * cache.inv_std[ch];
            let mean_dy = dbias[ch] / count;
            let mean_dyx = dweight[ch] / count;
            let off = (s * c + ch) * plane;
            for p in off..off + plane {
                dx.data_mut()[p] = scale * (dy.data()[p] - mean_dy - cache.xhat.data()[p] * mean_dyx);
            }
        }
    }
    Ok(BnGrads { dx, dweight, dbias })
}

/// Non-overlapping `size × size` average pooling.
pub fn avgpool<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(CacError::invalid(format!("avgpool {size} does not tile {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let inv = T::one() / T::from_usize_lossy(size * size);
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for di in 0..size {
                    for dj in 0..size {
                        acc += src[(i * size + di) * w + j * size + dj];
                    }
                }
                y.data_mut()[(bc * oh + i) * ow + j] = acc * inv;
            }
        }
    }
    Ok(y)
}

pub fn avgpool_backward<T: Scalar>(in_shape: &[usize], size: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(in_shape);
    let (b, c, h, w) = dx.dims4()?;
    let (oh, ow) = (h / size, w / size);
    if dy.shape() != [b, c, oh, ow] {
        return Err(CacError::invalid(format!("avgpool gradient shape {:?}", dy.shape())));
    }
    let inv = T::one() / T::from_usize_lossy(size * size);
    for bc in 0..b * c {
        for i in 0..h {
            for j in 0..w {
                dx.data_mut()[(bc * h + i) * w + j] = dy.data()[(bc * oh + i / size) * ow + j / size] * inv;
            }
        }
    }
    Ok(dx)
}

/// `[N, C, H, W] → [N, C]`.
pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::from_usize_lossy(plane);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(vec![b, c], data)
}

pub fn global_avgpool_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(in_shape);
    let (b, c, h, w) = dx.dims4()?;
    if dy.shape() != [b, c] {
        return Err(CacError::invalid(format!("global pool gradient shape {:?}", dy.shape())));
    }
    let plane = h * w;
    let inv = T::one() / T::from_usize_lossy(plane);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.iter_mut().for_each(|v| *v = g * inv);
    }
    Ok(dx)
}

fn flat_dims<T: Scalar>(x: &Tensor<T>, fan_in: usize) -> Result<usize> {
    let b = *x.shape().first().unwrap_or(&0);
    if b == 0 || x.len() != b * fan_in {
        return Err(CacError::invalid(format!(
            "linear layer with {fan_in} inputs got {:?}",
            x.shape()
        )));
    }
    Ok(b)
}

/// `y = x·Wᵀ + b` with `W` stored `[out, in]`; any trailing input axes are flattened.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, fan_in) = (w.shape()[0], w.shape()[1]);
    let batch = flat_dims(x, fan_in)?;
    let mut y = Tensor::zeros(&[batch, out]);
    for row in y.data_mut().chunks_mut(out) {
        row.copy_from_slice(b.data());
    }
    matmul_abt_acc(x.data(), w.data(), y.data_mut(), batch, fan_in, out);
    Ok(y)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (out, fan_in) = (w.shape()[0], w.shape()[1]);
    let batch = flat_dims(x, fan_in)?;
    if dy.shape() != [batch, out] {
        return Err(CacError::invalid(format!("linear gradient shape {:?}", dy.shape())));
    }
    let mut dw = Tensor::zeros(w.shape());
    matmul_atb_acc(dy.data(), x.data(), dw.data_mut(), out, batch, fan_in);
    let mut dx = Tensor::zeros(x.shape());
    matmul_acc(dy.data(), w.data(), dx.data_mut(), batch, out, fan_in);
    let mut db = Tensor::zeros(&[out]);
    for row in dy.data().chunks(out) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[batch, classes] = logits.shape() else {
        return Err(CacError::invalid(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != batch || batch == 0 {
        return Err(CacError::invalid(format!("{} labels for {batch} logit rows", labels.len())));
    }
    let inv_b = T::one() / T::from_usize_lossy(batch);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(CacError::invalid(format!("label {label} out of range for {classes} classes")));
        }
        let row = &logits.data()[s * classes..(s + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, v| a + v);
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[s * classes..(s + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
