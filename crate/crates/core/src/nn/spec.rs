use serde::{Deserialize, Serialize};

use crate::cac::{GateMode, PbarMode};
use crate::cost::LayerCostSpec;
use crate::error::{CacError, Result};
use crate::tensor::BorderMode;

/// One entry of a [`ModelSpec`]. Convolutions are stride 1 with same padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        c_out: usize,
        k: usize,
        #[serde(default)]
        cac: bool,
        #[serde(default)]
        bias: bool,
    },
    Batchnorm,
    Relu,
    Avgpool {
        size: usize,
    },
    GlobalAvgpool,
    /// Flattens spatial input implicitly.
    Linear {
        out: usize,
    },
    /// Terminal marker for the softmax cross-entropy head. Optional: the head is
    /// always applied to the last layer's output.
    SoftmaxCe,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { cac: true, .. } => "cac_conv",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Avgpool { .. } => "avgpool",
            LayerSpec::GlobalAvgpool => "global_avgpool",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::SoftmaxCe => "softmax_ce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateInit {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for GateInit {
    fn default() -> Self {
        GateInit { gamma: 1.0, beta: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[C, H, W]` with `H == W`.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Border fill shared by every convolution, standard or CAC, so that a CAC
    /// layer with all windows sharp is the same function as its dense twin.
    #[serde(default = "default_border")]
    pub border: BorderMode,
    #[serde(default)]
    pub pbar: PbarMode,
    #[serde(default)]
    pub gate: GateMode,
    #[serde(default)]
    pub gate_init: GateInit,
}

fn default_border() -> BorderMode {
    BorderMode::Replicate
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, n: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(self) -> usize {
        match self {
            Shape::Map { c, n } => c * n * n,
            Shape::Flat(d) => d,
        }
    }
}

impl ModelSpec {
    /// Parameter-free layer id used in cost tables and checkpoints.
    pub fn layer_id(index: usize) -> String {
        format!("l{index}")
    }

    /// Shape after every layer, validating compatibility and CAC eligibility.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || h != w {
            return Err(CacError::Config(format!("model input must be [C, N, N] with C, N > 0, got {:?}", self.input)));
        }
        if self.num_classes < 2 {
            return Err(CacError::Config("num_classes must be at least 2".into()));
        }
        let mut cur = Shape::Map { c, n: h };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| CacError::Config(format!("layer {i} ({}): {msg}", layer.kind()));
            cur = match (*layer, cur) {
                (LayerSpec::Conv { c_out, k, cac, .. }, Shape::Map { n, .. }) => {
                    if c_out == 0 || k == 0 || k % 2 == 0 {
                        return Err(bad(format!("need c_out > 0 and odd k, got c_out={c_out}, k={k}")));
                    }
                    if cac && k < 3 {
                        return Err(bad(format!("CAC layers need k >= 3, got {k}")));
                    }
                    if k > n {
                        return Err(bad(format!("kernel {k} larger than {n}x{n} input")));
                    }
                    Shape::Map { c: c_out, n }
                }
                (LayerSpec::Batchnorm | LayerSpec::Relu, s) => s,
                (LayerSpec::Avgpool { size }, Shape::Map { c, n }) => {
                    if size == 0 || n % size != 0 {
                        return Err(bad(format!("pool size {size} must divide spatial size {n}")));
                    }
                    Shape::Map { c, n: n / size }
                }
                (LayerSpec::GlobalAvgpool, Shape::Map { c, .. }) => Shape::Flat(c),
                (LayerSpec::Linear { out: 0 }, _) => return Err(bad("zero outputs".into())),
                (LayerSpec::Linear { out }, _) => Shape::Flat(out),
                (LayerSpec::SoftmaxCe, s) => {
                    if i + 1 != self.layers.len() {
                        return Err(bad("must be the last layer".into()));
                    }
                    s
                }
                (_, Shape::Flat(_)) => return Err(bad("needs a spatial input".into())),
            };
            out.push(cur);
        }
        if cur != Shape::Flat(self.num_classes) {
            return Err(CacError::Config(format!(
                "final output {cur:?} does not produce {} logits",
                self.num_classes
            )));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.infer_shapes().map(|_| ())
    }

    /// Input shape of every layer.
    pub fn input_shapes(&self) -> Result<Vec<Shape>> {
        let shapes = self.infer_shapes()?;
        let [c, n, _] = self.input;
        let mut ins = vec![Shape::Map { c, n }];
        ins.extend_from_slice(&shapes[..shapes.len().saturating_sub(1)]);
        ins.truncate(self.layers.len());
        Ok(ins)
    }

    /// Cost descriptors for every convolution, in layer order.
    pub fn cost_specs(&self) -> Result<Vec<LayerCostSpec>> {
        let ins = self.input_shapes()?;
        let mut specs = Vec::new();
        for (i, (layer, shape)) in self.layers.iter().zip(ins).enumerate() {
            if let (LayerSpec::Conv { c_out, k, cac, .. }, Shape::Map { c, n }) = (layer, shape) {
                specs.push(LayerCostSpec::new(
                    Self::layer_id(i),
                    n as u64,
                    *k as u64,
                    c as u64,
                    *c_out as u64,
                    *cac,
                )?);
            }
        }
        Ok(specs)
    }

    /// Indices of the CAC layers.
    pub fn cac_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { cac: true, .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// The same network with every CAC layer replaced by a dense convolution.
    pub fn baseline(&self) -> ModelSpec {
        let mut b = self.clone();
        for l in &mut b.layers {
            if let LayerSpec::Conv { cac, .. } = l {
                *cac = false;
            }
        }
        b
    }

    /// Three CAC blocks (conv, batchnorm, relu) with two 2×2 pools, global
    /// pooling and a linear classifier.
    pub fn three_layer_cnn(input: [usize; 3], num_classes: usize, widths: [usize; 3]) -> ModelSpec {
        let [w1, w2, w3] = widths;
        let conv = |c_out| LayerSpec::Conv { c_out, k: 3, cac: true, bias: false };
        ModelSpec {
            input,
            num_classes,
            layers: vec![
                conv(w1),
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Avgpool { size: 2 },
                conv(w2),
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Avgpool { size: 2 },
                conv(w3),
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::GlobalAvgpool,
                LayerSpec::Linear { out: num_classes },
            ],
            border: BorderMode::Replicate,
            pbar: PbarMode::Center,
            gate: GateMode::Learned,
            gate_init: GateInit::default(),
        }
    }

    /// One CAC layer, global pooling and a linear head.
    pub fn one_cac_layer(input: [usize; 3], num_classes: usize, width: usize) -> ModelSpec {
        ModelSpec {
            input,
            num_classes,
            layers: vec![
                LayerSpec::Conv { c_out: width, k: 3, cac: true, bias: true },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgpool,
                LayerSpec::Linear { out: num_classes },
            ],
            border: BorderMode::Replicate,
            pbar: PbarMode::Center,
            gate: GateMode::Learned,
            gate_init: GateInit::default(),
        }
    }
}
