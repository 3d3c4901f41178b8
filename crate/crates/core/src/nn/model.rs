use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{self, BnCache, BN_MOMENTUM};
use super::spec::{LayerSpec, ModelSpec, Shape};
use crate::cac::{cac_backward_with_rho_grad, cac_forward_hard, cac_forward_soft, CacCache, CacConvParams, WindowPartition};
use crate::error::{CacError, Result};
use crate::tensor::{conv2d_backward, conv2d_bordered, Scalar, Tensor};

/// A trainable tensor and its gradient from the last backward pass.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name, value, grad, decay }
    }
}

#[derive(Debug, Clone)]
enum Layer<T> {
    Conv {
        w: Param<T>,
        b: Option<Param<T>>,
    },
    Cac {
        w: Param<T>,
        b: Option<Param<T>>,
        gamma: Param<T>,
        beta: Param<T>,
    },
    BatchNorm {
        weight: Param<T>,
        bias: Param<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Relu,
    AvgPool(usize),
    GlobalAvgPool,
    Linear {
        w: Param<T>,
        b: Param<T>,
    },
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Soft CAC blending, batch statistics.
    Train,
    /// Hard CAC routing, running statistics.
    Eval,
}

enum LayerCache<T> {
    None,
    Input(Tensor<T>),
    Cac(Box<CacCache<T>>),
    Bn(BnCache<T>),
    Shape(Vec<usize>),
}

/// Routing observed in one CAC layer during a forward pass.
#[derive(Debug, Clone)]
pub struct CacRecord<T> {
    pub layer: usize,
    /// Batch mean of `M`.
    pub rho_soft: f64,
    /// Per-sample fraction of windows with `M > 0.5`.
    pub rho_hard: Vec<f64>,
    pub partitions: Vec<WindowPartition<T>>,
}

impl<T> CacRecord<T> {
    pub fn rho_hard_mean(&self) -> f64 {
        self.rho_hard.iter().sum::<f64>() / self.rho_hard.len() as f64
    }
}

pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub cac: Vec<CacRecord<T>>,
    caches: Vec<LayerCache<T>>,
}

/// A sequential network built from a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
}

fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| CacError::invalid(format!("init: {e}")))?;
    Ok(Tensor::from_fn(shape, |_| T::lit(normal.sample(rng))))
}

impl<T: Scalar> Model<T> {
    /// Kaiming-normal init for conv and linear weights, drawn layer by layer
    /// from one seeded stream. Gate parameters consume no draws, so a spec and
    /// its [`ModelSpec::baseline`] get identical weights from the same seed.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let ins = spec.input_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, (l, shape)) in spec.layers.iter().zip(&ins).enumerate() {
            let id = ModelSpec::layer_id(i);
            let p = |suffix: &str, v: Tensor<T>, decay: bool| Param::new(format!("{id}.{suffix}"), v, decay);
            let layer = match (*l, *shape) {
                (LayerSpec::Conv { c_out, k, cac, bias }, Shape::Map { c, .. }) => {
                    let w = p("weight", kaiming(&[c_out, c, k, k], c * k * k, 2.0, &mut rng)?, true);
                    let b = bias.then(|| p("bias", Tensor::zeros(&[c_out]), true));
                    if cac {
                        let gi = spec.gate_init;
                        Layer::Cac {
                            w,
                            b,
                            gamma: p("gamma", Tensor::full(&[1], T::lit(gi.gamma)), false),
                            beta: p("beta", Tensor::full(&[1], T::lit(gi.beta)), false),
                        }
                    } else {
                        Layer::Conv { w, b }
                    }
                }
                (LayerSpec::Batchnorm, s) => {
                    let c = match s {
                        Shape::Map { c, .. } => c,
                        Shape::Flat(d) => d,
                    };
                    Layer::BatchNorm {
                        weight: p("weight", Tensor::full(&[c], T::one()), true),
                        bias: p("bias", Tensor::zeros(&[c]), true),
                        running_mean: Tensor::zeros(&[c]),
                        running_var: Tensor::full(&[c], T::one()),
                    }
                }
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::Avgpool { size }, _) => Layer::AvgPool(size),
                (LayerSpec::GlobalAvgpool, _) => Layer::GlobalAvgPool,
                (LayerSpec::Linear { out }, s) => {
                    let fan_in = s.numel();
                    Layer::Linear {
                        w: p("weight", kaiming(&[out, fan_in], fan_in, 1.0, &mut rng)?, true),
                        b: p("bias", Tensor::zeros(&[out]), true),
                    }
                }
                (LayerSpec::SoftmaxCe, _) => Layer::Head,
                (l, s) => return Err(CacError::Config(format!("layer {i}: {} cannot take {s:?}", l.kind()))),
            };
            layers.push(layer);
        }
        Ok(Model { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv { w, b } => out.extend([Some(w), b.as_ref()].into_iter().flatten()),
                Layer::Cac { w, b, gamma, beta } => {
                    out.extend([Some(w), b.as_ref(), Some(gamma), Some(beta)].into_iter().flatten())
                }
                Layer::BatchNorm { weight, bias, .. } => out.extend([weight, bias]),
                Layer::Linear { w, b } => out.extend([w, b]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv { w, b } => {
                    out.push(w);
                    out.extend(b.as_mut());
                }
                Layer::Cac { w, b, gamma, beta } => {
                    out.push(w);
                    out.extend(b.as_mut());
                    out.push(gamma);
                    out.push(beta);
                }
                Layer::BatchNorm { weight, bias, .. } => out.extend([weight, bias]),
                Layer::Linear { w, b } => out.extend([w, b]),
                _ => {}
            }
        }
        out
    }

    /// Every tensor needed to restore the model: parameters plus batchnorm
    /// running statistics, keyed by name.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm { running_mean, running_var, .. } = l {
                let id = ModelSpec::layer_id(i);
                out.push((format!("{id}.running_mean"), running_mean.clone()));
                out.push((format!("{id}.running_var"), running_var.clone()));
            }
        }
        out
    }

    /// Rebuilds a model from [`Model::state`] output. Every expected tensor
    /// must be present with the right shape; extra names are rejected.
    pub fn from_state(spec: &ModelSpec, state: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Model::new(spec, 0)?;
        let mut by_name: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, t) in state {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(CacError::invalid(format!("duplicate tensor {name}")));
            }
        }
        let mut take = |name: &str, target: &mut Tensor<T>| -> Result<()> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| CacError::invalid(format!("missing tensor {name}")))?;
            if t.shape() != target.shape() {
                return Err(CacError::invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t;
            Ok(())
        };
        for p in model.params_mut() {
            let name = p.name.clone();
            take(&name, &mut p.value)?;
        }
        for (i, l) in model.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm { running_mean, running_var, .. } = l {
                let id = ModelSpec::layer_id(i);
                take(&format!("{id}.running_mean"), running_mean)?;
                take(&format!("{id}.running_var"), running_var)?;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(CacError::invalid(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let state = self.state().into_iter().map(|(n, t)| (n, t.cast())).collect();
        Model::from_state(&self.spec, state).expect("same spec, same tensors")
    }

    fn cac_params(&self, w: &Param<T>, b: &Option<Param<T>>, gamma: &Param<T>, beta: &Param<T>) -> Result<CacConvParams<T>> {
        let mut p = CacConvParams::new(w.value.clone())?
            .with_gate(gamma.value.data()[0], beta.value.data()[0])
            .with_pbar(self.spec.pbar)
            .with_gate_mode(self.spec.gate)
            .with_border(self.spec.border);
        if let Some(b) = b {
            p = p.with_bias(b.value.clone())?;
        }
        Ok(p)
    }

    /// Runs the network. Every layer output is checked for non-finite values
    /// and failures name the offending layer.
    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Forward<T>> {
        let [c, n, _] = self.spec.input;
        match *x.shape() {
            [b, xc, h, w] if b > 0 && xc == c && h == n && w == n => {}
            _ => {
                return Err(CacError::invalid(format!(
                    "batch shape {:?} does not match model input [N, {c}, {n}, {n}]",
                    x.shape()
                )))
            }
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cac = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match layer {
                Layer::Conv { w, b } => {
                    let k = w.value.shape()[2];
                    let mut y = conv2d_bordered(&cur, &w.value, k / 2, self.spec.border)?;
                    if let Some(b) = b {
                        add_channel_bias(&mut y, b.value.data());
                    }
                    (y, LayerCache::Input(cur))
                }
                Layer::Cac { w, b, gamma, beta } => {
                    let params = self.cac_params(w, b, gamma, beta)?;
                    match phase {
                        Phase::Train => {
                            let (y, parts, cc) = cac_forward_soft(&cur, &params)?;
                            cac.push(record(i, cc.rho_soft(), parts));
                            (y, LayerCache::Cac(Box::new(cc)))
                        }
                        Phase::Eval => {
                            let (y, parts) = cac_forward_hard(&cur, &params)?;
                            let soft = parts.iter().map(|p| p.rho_soft).sum::<f64>() / parts.len() as f64;
                            cac.push(record(i, soft, parts));
                            (y, LayerCache::None)
                        }
                    }
                }
                Layer::BatchNorm { weight, bias, running_mean, running_var } => match phase {
                    Phase::Train => {
                        let (y, bc) = layers::batchnorm_train(&cur, weight.value.data(), bias.value.data())?;
                        (y, LayerCache::Bn(bc))
                    }
                    Phase::Eval => (
                        layers::batchnorm_eval(
                            &cur,
                            weight.value.data(),
                            bias.value.data(),
                            running_mean.data(),
                            running_var.data(),
                        )?,
                        LayerCache::None,
                    ),
                },
                Layer::Relu => (layers::relu(&cur), LayerCache::Input(cur)),
                Layer::AvgPool(size) => (layers::avgpool(&cur, *size)?, LayerCache::Shape(cur.shape().to_vec())),
                Layer::GlobalAvgPool => (layers::global_avgpool(&cur)?, LayerCache::Shape(cur.shape().to_vec())),
                Layer::Linear { w, b } => (layers::linear(&cur, &w.value, &b.value)?, LayerCache::Input(cur)),
                Layer::Head => (cur, LayerCache::None),
            };
            next.ensure_finite(&format!("layer {i} ({})", self.spec.layers[i].kind()))?;
            cur = next;
            caches.push(cache);
        }
        let batch = x.shape()[0];
        let logits = cur.reshape(vec![batch, self.spec.num_classes])?;
        Ok(Forward { logits, cac, caches })
    }

    /// Reverse pass of a [`Phase::Train`] forward. Overwrites every parameter
    /// gradient. `d_rho[j]` is the extra gradient on the soft ratio of the
    /// `j`-th CAC layer. Returns the gradient with respect to the input.
    pub fn backward(&mut self, fwd: &Forward<T>, dlogits: &Tensor<T>, d_rho: &[T]) -> Result<Tensor<T>> {
        if fwd.caches.len() != self.layers.len() {
            return Err(CacError::invalid("forward record does not belong to this model"));
        }
        if d_rho.len() != fwd.cac.len() {
            return Err(CacError::invalid(format!(
                "{} ratio gradients for {} CAC layers",
                d_rho.len(),
                fwd.cac.len()
            )));
        }
        let mut grad = dlogits.clone();
        let mut cac_idx = fwd.cac.len();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(&fwd.caches).enumerate().rev() {
            let missing = || CacError::invalid(format!("layer {i}: backward needs a training-phase forward"));
            grad = match (layer, cache) {
                (Layer::Conv { w, b }, LayerCache::Input(x)) => {
                    let k = w.value.shape()[2];
                    let g = conv2d_backward(x, &w.value, k / 2, self.spec.border, &grad)?;
                    w.grad = g.dw;
                    if let Some(b) = b {
                        b.grad = channel_sums(&grad, b.value.len());
                    }
                    g.dx
                }
                (Layer::Cac { w, b, gamma, beta }, LayerCache::Cac(cc)) => {
                    cac_idx -= 1;
                    let g = cac_backward_with_rho_grad(cc, &grad, d_rho[cac_idx])?;
                    w.grad = g.dw;
                    if let (Some(b), Some(db)) = (b, g.dbias) {
                        b.grad = db;
                    }
                    gamma.grad = Tensor::full(&[1], g.dgamma);
                    beta.grad = Tensor::full(&[1], g.dbeta);
                    g.dx
                }
                (Layer::BatchNorm { weight, bias, .. }, LayerCache::Bn(bc)) => {
                    let g = layers::batchnorm_backward(bc, weight.value.data(), &grad)?;
                    weight.grad = Tensor::new(vec![g.dweight.len()], g.dweight)?;
                    bias.grad = Tensor::new(vec![g.dbias.len()], g.dbias)?;
                    g.dx
                }
                (Layer::Relu, LayerCache::Input(x)) => layers::relu_backward(x, &grad)?,
                (Layer::AvgPool(size), LayerCache::Shape(s)) => layers::avgpool_backward(s, *size, &grad)?,
                (Layer::GlobalAvgPool, LayerCache::Shape(s)) => layers::global_avgpool_backward(s, &grad)?,
                (Layer::Linear { w, b }, LayerCache::Input(x)) => {
                    let g = layers::linear_backward(x, &w.value, &grad)?;
                    w.grad = g.dw;
                    b.grad = g.db;
                    g.dx.reshape(x.shape().to_vec())?
                }
                (Layer::Head, _) => grad,
                _ => return Err(missing()),
            };
        }
        Ok(grad)
    }

    /// Folds the batch statistics of a training forward into the running
    /// estimates (`momentum 0.1`, unbiased variance).
    pub fn commit_running_stats(&mut self, fwd: &Forward<T>) {
        let momentum = T::lit(BN_MOMENTUM);
        for (layer, cache) in self.layers.iter_mut().zip(&fwd.caches) {
            if let (Layer::BatchNorm { running_mean, running_var, .. }, LayerCache::Bn(bc)) = (layer, cache) {
                let count = bc.xhat.len() / bc.mean.len();
                let unbias = if count > 1 {
                    T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
                } else {
                    T::one()
                };
                for (r, &m) in running_mean.data_mut().iter_mut().zip(&bc.mean) {
                    *r = (T::one() - momentum) * *r + momentum * m;
                }
                for (r, &v) in running_var.data_mut().iter_mut().zip(&bc.var) {
                    *r = (T::one() - momentum) * *r + momentum * v * unbias;
                }
            }
        }
    }
}

fn record<T: Scalar>(layer: usize, rho_soft: f64, partitions: Vec<WindowPartition<T>>) -> CacRecord<T> {
    CacRecord {
        layer,
        rho_soft,
        rho_hard: partitions.iter().map(|p| p.rho_hard).collect(),
        partitions,
    }
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let plane = y.len() / (y.shape()[0] * bias.len());
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Scalar>(dy: &Tensor<T>, c: usize) -> Tensor<T> {
    let plane = dy.len() / (dy.shape()[0] * c);
    let mut out = Tensor::zeros(&[c]);
    for (i, chunk) in dy.data().chunks(plane).enumerate() {
        out.data_mut()[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
    out
}
