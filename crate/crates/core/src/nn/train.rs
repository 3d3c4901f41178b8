use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{argmax_rows, softmax_cross_entropy};
use super::model::{Model, Phase};
use super::optim::{sgd_step, weighted_product_loss, OptimizerConfig, OptimizerState};
use super::spec::ModelSpec;
use crate::checkpoint::{save_checkpoint, write_atomic};
use crate::cost::{cost_ratio_with_grad, model_cost, CostReport, LayerCostSpec, RhoStats};
use crate::data::{augment, Dataset};
use crate::error::{CacError, Result};
use crate::tensor::{Scalar, Tensor};

/// Maps per-CAC-layer ratios onto the model's convolution cost table.
#[derive(Debug, Clone)]
pub struct CostContext {
    pub specs: Vec<LayerCostSpec>,
    cac_slots: Vec<usize>,
}

impl CostContext {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let specs = spec.cost_specs()?;
        let cac_slots = specs.iter().enumerate().filter(|(_, s)| s.cac).map(|(i, _)| i).collect();
        Ok(CostContext { specs, cac_slots })
    }

    fn aligned<R: Copy>(&self, cac: &[R], dense: R) -> Result<Vec<R>> {
        if cac.len() != self.cac_slots.len() {
            return Err(CacError::invalid(format!(
                "{} ratios for {} CAC layers",
                cac.len(),
                self.cac_slots.len()
            )));
        }
        let mut out = vec![dense; self.specs.len()];
        for (&slot, &r) in self.cac_slots.iter().zip(cac) {
            out[slot] = r;
        }
        Ok(out)
    }

    /// `c(M)/c(M^b)` and its gradient with respect to each CAC layer's ρ.
    pub fn ratio_with_grad(&self, cac_rhos: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ratio, grad) = cost_ratio_with_grad(&self.specs, &self.aligned(cac_rhos, 1.0)?)?;
        Ok((ratio, self.cac_slots.iter().map(|&s| grad[s]).collect()))
    }

    pub fn report<R: Into<RhoStats> + Copy>(&self, cac: &[R], dense: R) -> Result<CostReport> {
        model_cost(&self.specs, &self.aligned(cac, dense)?)
    }

    pub fn madds(&self, cac_rhos: &[f64]) -> Result<f64> {
        Ok(self.report(cac_rhos, 1.0)?.totals.c_model)
    }
}

/// Outcome of one training step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub task_loss: f64,
    pub objective: f64,
    pub lambda: f64,
    pub cost_ratio_soft: f64,
    pub cost_ratio_hard: f64,
    pub rho_soft: Vec<f64>,
    pub rho_hard: Vec<f64>,
    pub correct: usize,
    pub batch: usize,
}

/// Full objective `L = ℓ·(c/c_b)^λ` of a training-phase forward, with the
/// cost ratio taken from this batch's soft ratios.
pub fn objective_value<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], lambda: f64) -> Result<f64> {
    let ctx = CostContext::new(model.spec())?;
    let fwd = model.forward(x, Phase::Train)?;
    let (ell, _) = softmax_cross_entropy(&fwd.logits, labels)?;
    let rho: Vec<f64> = fwd.cac.iter().map(|r| r.rho_soft).collect();
    let (ratio, _) = ctx.ratio_with_grad(&rho)?;
    Ok(weighted_product_loss(to_f64(ell), ratio, lambda)?.value)
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// One forward and reverse traversal. Leaves the gradient of the full
/// objective in every parameter and folds batch statistics into the
/// batchnorm running estimates.
///
/// By the product rule the task gradient is scaled by `(c/c_b)^λ` and each CAC
/// layer additionally receives `ℓ·λ(c/c_b)^(λ−1)·∂(c/c_b)/∂ρ_l` on its soft ratio.
pub fn forward_backward<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<StepStats> {
    let ctx = CostContext::new(model.spec())?;
    let fwd = model.forward(x, Phase::Train)?;
    let (ell, dlogits) = softmax_cross_entropy(&fwd.logits, labels)?;
    let ell = to_f64(ell);
    if !ell.is_finite() {
        return Err(CacError::numeric("softmax_ce head", format!("task loss {ell}")));
    }
    let rho_soft: Vec<f64> = fwd.cac.iter().map(|r| r.rho_soft).collect();
    let rho_hard: Vec<f64> = fwd.cac.iter().map(|r| r.rho_hard_mean()).collect();
    let (ratio, dratio) = ctx.ratio_with_grad(&rho_soft)?;
    let (ratio_hard, _) = ctx.ratio_with_grad(&rho_hard)?;
    let obj = weighted_product_loss(ell, ratio, lambda)?;
    if !obj.value.is_finite() {
        return Err(CacError::numeric("objective", format!("L = {} (ℓ = {ell}, ratio = {ratio})", obj.value)));
    }
    let dlogits = if obj.d_ell == 1.0 { dlogits } else { dlogits.scale(T::lit(obj.d_ell)) };
    let d_rho: Vec<T> = dratio.iter().map(|g| T::lit(obj.d_ratio * g)).collect();
    model.backward(&fwd, &dlogits, &d_rho)?;
    model.commit_running_stats(&fwd);
    let correct = argmax_rows(&fwd.logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(StepStats {
        task_loss: ell,
        objective: obj.value,
        lambda,
        cost_ratio_soft: ratio,
        cost_ratio_hard: ratio_hard,
        rho_soft,
        rho_hard,
        correct,
        batch: labels.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRhoStats {
    pub layer_id: String,
    pub rho_mean: f64,
    pub rho_std: f64,
}

/// Hard-routing evaluation with per-sample dynamic cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1_error: f64,
    pub task_loss: f64,
    pub madds_mean: f64,
    pub madds_std: f64,
    pub madds_baseline: f64,
    pub cost_ratio_hard: f64,
    pub layers: Vec<LayerRhoStats>,
    #[serde(skip)]
    pub per_sample_madds: Vec<f64>,
    /// `[cac layer][sample]`.
    #[serde(skip)]
    pub per_sample_rho: Vec<Vec<f64>>,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

impl EvalReport {
    /// Cost table at the measured per-layer ratio statistics.
    pub fn cost_report(&self, spec: &ModelSpec) -> Result<CostReport> {
        let stats: Vec<RhoStats> = self.layers.iter().map(|l| RhoStats { mean: l.rho_mean, std: l.rho_std }).collect();
        CostContext::new(spec)?.report(&stats, RhoStats::from(1.0))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(CacError::invalid("cannot evaluate on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(CacError::invalid("evaluation batch size must be > 0"));
    }
    let ctx = CostContext::new(model.spec())?;
    let n_cac = model.spec().cac_layers().len();
    let mut per_sample_rho = vec![Vec::with_capacity(data.len()); n_cac];
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let x: Tensor<T> = data.images.select(chunk)?.cast();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let fwd = model.forward(&x, Phase::Eval)?;
        let (ell, _) = softmax_cross_entropy(&fwd.logits, &labels)?;
        loss_sum += to_f64(ell) * chunk.len() as f64;
        predictions.extend(argmax_rows(&fwd.logits));
        for (dst, rec) in per_sample_rho.iter_mut().zip(&fwd.cac) {
            dst.extend_from_slice(&rec.rho_hard);
        }
    }
    let per_sample_madds = (0..data.len())
        .map(|s| {
            let rhos: Vec<f64> = per_sample_rho.iter().map(|l| l[s]).collect();
            ctx.madds(&rhos)
        })
        .collect::<Result<Vec<_>>>()?;
    let errors = predictions.iter().zip(&data.labels).filter(|(p, l)| p != l).count();
    let (madds_mean, madds_std) = mean_std(&per_sample_madds);
    let madds_baseline = ctx.report(&vec![1.0; n_cac], 1.0)?.totals.c_baseline;
    let layers = model
        .spec()
        .cac_layers()
        .into_iter()
        .zip(&per_sample_rho)
        .map(|(i, r)| {
            let (rho_mean, rho_std) = mean_std(r);
            LayerRhoStats { layer_id: ModelSpec::layer_id(i), rho_mean, rho_std }
        })
        .collect();
    Ok(EvalReport {
        samples: data.len(),
        top1_error: errors as f64 / data.len() as f64,
        task_loss: loss_sum / data.len() as f64,
        madds_mean,
        madds_std,
        madds_baseline,
        cost_ratio_hard: madds_mean / madds_baseline,
        layers,
        per_sample_madds,
        per_sample_rho,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    /// Epochs trained with `λ = 0` before the cost penalty switches on.
    pub penalty_warmup_epochs: usize,
    pub augment_flip: bool,
    pub augment_crop_pad: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 64,
            lambda: 0.3,
            optimizer: OptimizerConfig::default(),
            penalty_warmup_epochs: 0,
            augment_flip: false,
            augment_crop_pad: 0,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(CacError::Config("epochs and batch sizes must be > 0".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CacError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRho {
    pub layer_id: String,
    pub rho_soft: f64,
    pub rho_hard: f64,
}

/// One line of `metrics.jsonl`. Training-side fields are batch-size-weighted
/// means over the epoch; `test_*` fields come from a hard-routing evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub task_loss: f64,
    pub objective: f64,
    pub top1_error: f64,
    pub cost_ratio_soft: f64,
    pub cost_ratio_hard: f64,
    pub rho: Vec<LayerRho>,
    pub test_top1_error: Option<f64>,
    pub test_cost_ratio_hard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub task_loss: f64,
    pub cost_ratio_soft: f64,
    pub lambda: f64,
    pub objective: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn metrics_jsonl(epochs: &[EpochMetrics]) -> Result<String> {
    let mut s = String::new();
    for m in epochs {
        s.push_str(&serde_json::to_string(m).map_err(|e| CacError::invalid(format!("metrics: {e}")))?);
        s.push('\n');
    }
    Ok(s)
}

/// Seeded mini-batch SGD on the full objective. With `out_dir`, rewrites
/// `metrics.jsonl` and `checkpoint.bin` atomically after every epoch, so a
/// divergence leaves the last good epoch on disk.
pub fn train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    for d in std::iter::once(train_set).chain(test_set) {
        if d.image_shape() != spec.input || d.num_classes != spec.num_classes {
            return Err(CacError::Config(format!(
                "dataset {} has images {:?} and {} classes; model expects {:?} and {}",
                d.split,
                d.image_shape(),
                d.num_classes,
                spec.input,
                spec.num_classes
            )));
        }
    }
    if train_set.is_empty() {
        return Err(CacError::invalid("empty training set"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CacError::io(dir, e))?;
    }

    let mut model = Model::<f32>::new(spec, cfg.seed)?;
    let mut opt = OptimizerState::new(&cfg.optimizer, cfg.epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let layer_ids: Vec<String> = spec.cac_layers().into_iter().map(ModelSpec::layer_id).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        let lambda = if epoch < cfg.penalty_warmup_epochs { 0.0 } else { cfg.lambda };
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new(layer_ids.len());
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = train_set.images.select(chunk)?;
            if cfg.augment_flip || cfg.augment_crop_pad > 0 {
                augment(&mut x, &mut rng, cfg.augment_flip, cfg.augment_crop_pad)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let stats = forward_backward(&mut model, &x, &labels, lambda)
                .map_err(|e| annotate(e, epoch, step))?;
            sgd_step(&mut model.params_mut(), &mut opt).map_err(|e| annotate(e, epoch, step))?;
            steps.push(StepRecord {
                epoch,
                step,
                task_loss: stats.task_loss,
                cost_ratio_soft: stats.cost_ratio_soft,
                lambda,
                objective: stats.objective,
            });
            acc.add(&stats);
        }
        let test = match test_set {
            Some(t) => Some(evaluate(&model, t, cfg.eval_batch_size)?),
            None => None,
        };
        epochs.push(acc.finish(epoch, opt.lr, lambda, &layer_ids, test.as_ref()));
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &model)?;
            write_atomic(&dir.join(METRICS_FILE), metrics_jsonl(&epochs)?.as_bytes())?;
        }
    }
    Ok(TrainOutcome { model, epochs, steps })
}

fn annotate(e: CacError, epoch: usize, step: usize) -> CacError {
    match e {
        CacError::NumericFailure { location, detail } => CacError::NumericFailure {
            location: format!("epoch {epoch} step {step}: {location}"),
            detail: format!("{detail}; training aborted, last completed epoch kept on disk"),
        },
        other => other,
    }
}

struct EpochAccumulator {
    seen: usize,
    correct: usize,
    loss: f64,
    objective: f64,
    ratio_soft: f64,
    ratio_hard: f64,
    rho_soft: Vec<f64>,
    rho_hard: Vec<f64>,
}

impl EpochAccumulator {
    fn new(layers: usize) -> Self {
        EpochAccumulator {
            seen: 0,
            correct: 0,
            loss: 0.0,
            objective: 0.0,
            ratio_soft: 0.0,
            ratio_hard: 0.0,
            rho_soft: vec![0.0; layers],
            rho_hard: vec![0.0; layers],
        }
    }

    fn add(&mut self, s: &StepStats) {
        let w = s.batch as f64;
        self.seen += s.batch;
        self.correct += s.correct;
        self.loss += w * s.task_loss;
        self.objective += w * s.objective;
        self.ratio_soft += w * s.cost_ratio_soft;
        self.ratio_hard += w * s.cost_ratio_hard;
        for (a, r) in self.rho_soft.iter_mut().zip(&s.rho_soft) {
            *a += w * r;
        }
        for (a, r) in self.rho_hard.iter_mut().zip(&s.rho_hard) {
            *a += w * r;
        }
    }

    fn finish(self, epoch: usize, lr: f64, lambda: f64, ids: &[String], test: Option<&EvalReport>) -> EpochMetrics {
        let n = self.seen as f64;
        EpochMetrics {
            epoch,
            lr,
            lambda,
            task_loss: self.loss / n,
            objective: self.objective / n,
            top1_error: 1.0 - self.correct as f64 / n,
            cost_ratio_soft: self.ratio_soft / n,
            cost_ratio_hard: self.ratio_hard / n,
            rho: ids
                .iter()
                .zip(self.rho_soft.iter().zip(&self.rho_hard))
                .map(|(id, (s, h))| LayerRho { layer_id: id.clone(), rho_soft: s / n, rho_hard: h / n })
                .collect(),
            test_top1_error: test.map(|t| t.top1_error),
            test_cost_ratio_hard: test.map(|t| t.cost_ratio_hard),
        }
    }
}
