//! Training loop for the reformulated objective and its variants.
//!
//! Every sample in a batch draws its own `t`, noise and dropout decision.
//! All draws are taken sequentially from one stream before any network work,
//! so the per-sample gradient computations may run in parallel while the
//! result stays bitwise identical to the sequential loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward_tape, forward_tape, write_checkpoint, AdamState, BackboneConfig, Checkpoint,
    CheckpointMeta, Model, Parameterization,
};
use crate::error::{ensure_same_shape, Error, Result};
use crate::flowcore::{
    make_bridge_state, make_state, sample_t, FlowPath, TSamplerConfig, TStrategy, DEFAULT_T_MIN,
};
use crate::metrics::MetricsReport;
use crate::pngio::write_png;
use crate::sampler::{evaluate_pairs, Evaluation, SamplerOptions};
use crate::synthdata::{
    derive_seed, make_batch, validation_set, Augment, DegradeSpec, Pair, TaskKind,
};
use crate::tensor::{ImageTensor, Shape};

pub const TRAIN_CSV_HEADER: &str = "iter,loss,lr,seconds";
pub const VAL_CSV_HEADER: &str = "iter,psnr,ssim,val_loss";

/// Half-cosine decay from `lr_init` at `iter = 0` to `lr_min` at `iter = total`.
pub fn cosine_lr(iter: usize, total: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("cosine schedule needs total > 0"));
    }
    if iter > total {
        return Err(Error::config(format!(
            "iteration {iter} beyond schedule length {total}"
        )));
    }
    let phase = std::f64::consts::PI * iter as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + phase.cos()))
}

/// The method variant being trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    pub path: FlowPath,
    pub parameterization: Parameterization,
    pub t_strategy: TStrategy,
    pub time_embedding: bool,
    /// Probability of replacing the condition by zeros during training.
    pub cfg_dropout_prob: f64,
    /// Adds a gradient-difference term to the reweighted pixel loss.
    pub composite_loss: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            path: FlowPath::Standard,
            parameterization: Parameterization::X0Pred,
            t_strategy: TStrategy::Beta,
            time_embedding: false,
            cfg_dropout_prob: 0.0,
            composite_loss: false,
        }
    }
}

/// Backbone size; channel counts follow from the task and variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSize {
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for BackboneSize {
    fn default() -> Self {
        Self {
            base_width: 16,
            depth: 2,
            time_embed_dim: 16,
        }
    }
}

/// Non-negative weights of the auxiliary loss terms. None is `t`-reweighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeWeights {
    pub lambda_grad: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self { lambda_grad: 0.1 }
    }
}

impl CompositeWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_grad >= 0.0 && self.lambda_grad.is_finite()) {
            return Err(Error::config(format!(
                "lambda_grad must be >= 0, got {}",
                self.lambda_grad
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainManifest {
    pub task: TaskKind,
    pub variant: Variant,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub p: u32,
    pub t_min: f64,
    pub logit_mu: f64,
    pub logit_sigma: f64,
    pub seed: u64,
    pub validation_every: usize,
    pub checkpoint_every: usize,
    /// Training-loss records are averaged over this many iterations.
    pub log_every: usize,
    pub crop: usize,
    pub validation_size: usize,
    /// Fixed across runs so different seeds are scored on the same images.
    pub validation_seed: u64,
    pub validation_steps: usize,
    /// Validation outputs written as PNG at the end of training.
    pub sample_images: usize,
    pub backbone: BackboneSize,
    pub degrade: DegradeSpec,
    pub augment: Augment,
    pub composite: CompositeWeights,
}

impl Default for TrainManifest {
    fn default() -> Self {
        Self {
            task: TaskKind::Lowlight,
            variant: Variant::default(),
            batch_size: 8,
            iterations: 5000,
            lr_init: 1e-4,
            lr_min: 1e-6,
            p: 1,
            t_min: DEFAULT_T_MIN,
            logit_mu: 0.0,
            logit_sigma: 1.0,
            seed: 0,
            validation_every: 500,
            checkpoint_every: 1000,
            log_every: 10,
            crop: 64,
            validation_size: 32,
            validation_seed: 2024,
            validation_steps: 3,
            sample_images: 4,
            backbone: BackboneSize::default(),
            degrade: DegradeSpec::default(),
            augment: Augment::default(),
            composite: CompositeWeights::default(),
        }
    }
}

impl TrainManifest {
    pub fn validate(&self) -> Result<()> {
        let v = &self.variant;
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::config("batch_size and iterations must be positive"));
        }
        if self.validation_every == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::config(
                "validation_every, checkpoint_every and log_every must be positive",
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_min > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.lr_min > self.lr_init {
            return Err(Error::config(format!(
                "lr_min ({}) must not exceed lr_init ({})",
                self.lr_min, self.lr_init
            )));
        }
        if !(1..=2).contains(&self.p) {
            return Err(Error::config(format!("p must be 1 or 2, got {}", self.p)));
        }
        if !(0.0..1.0).contains(&v.cfg_dropout_prob) {
            return Err(Error::config(format!(
                "cfg_dropout_prob must lie in [0, 1), got {}",
                v.cfg_dropout_prob
            )));
        }
        if v.path == FlowPath::Bridge {
            if !self.task.same_shape() {
                return Err(Error::config(format!(
                    "the bridge path needs condition and target of one shape; {} has none",
                    self.task.name()
                )));
            }
            if v.cfg_dropout_prob > 0.0 {
                return Err(Error::config(
                    "the bridge path has no condition input to drop",
                ));
            }
        }
        if v.parameterization == Parameterization::VPred {
            if self.task.scale() > 1 {
                return Err(Error::config(
                    "velocity prediction is not supported for super-resolution",
                ));
            }
            if v.composite_loss {
                return Err(Error::config("the composite loss applies to x0 prediction"));
            }
        }
        if self.validation_size == 0 || self.validation_steps == 0 {
            return Err(Error::config(
                "validation_size and validation_steps must be positive",
            ));
        }
        let cfg = self.backbone_config();
        cfg.validate()?;
        let lr = self.crop / self.task.scale();
        if !self.crop.is_multiple_of(self.task.scale())
            || !lr.is_multiple_of(cfg.spatial_multiple())
        {
            return Err(Error::config(format!(
                "crop {} must give a network input divisible by {}",
                self.crop,
                cfg.spatial_multiple()
            )));
        }
        if lr.max(self.crop) < 11 {
            return Err(Error::config("crop too small for SSIM validation"));
        }
        self.t_sampler().validate()?;
        self.composite.validate()?;
        self.degrade.validate()
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let target = self.task.target_channels();
        let cond = match self.variant.path {
            FlowPath::Standard => self.task.condition_channels(),
            FlowPath::Bridge => 0,
        };
        BackboneConfig {
            in_channels: cond + target,
            out_channels: target,
            base_width: self.backbone.base_width,
            depth: self.backbone.depth,
            parameterization: self.variant.parameterization,
            time_embedding: self.variant.time_embedding,
            time_embed_dim: self.backbone.time_embed_dim,
            upsample_factor: self.task.scale(),
        }
    }

    pub fn t_sampler(&self) -> TSamplerConfig {
        TSamplerConfig {
            strategy: self.variant.t_strategy,
            p: self.p,
            t_min: self.t_min,
            logit_mu: self.logit_mu,
            logit_sigma: self.logit_sigma,
        }
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions {
            steps: self.validation_steps,
            seed: self.validation_seed,
            parameterization: self.variant.parameterization,
            path: self.variant.path,
            ..Default::default()
        }
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            task: Some(self.task.name().to_string()),
            path: Some(self.variant.path.name().to_string()),
            cfg_dropout_prob: self.variant.cfg_dropout_prob,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validation_pairs(&self) -> Result<Vec<Pair>> {
        validation_set(
            self.task,
            &self.degrade,
            self.validation_size,
            self.crop,
            self.validation_seed,
        )
    }
}

/// Mean absolute horizontal and vertical forward-difference mismatch,
/// averaged over the union of both difference sets.
pub fn gradient_difference(y: &ImageTensor<f32>, f_out: &ImageTensor<f32>) -> Result<f64> {
    Ok(gradient_difference_grad(y, f_out, false)?.0)
}

fn gradient_difference_grad(
    y: &ImageTensor<f32>,
    f_out: &ImageTensor<f32>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    ensure_same_shape(y.shape(), f_out.shape())?;
    let (c, h, w) = (y.channels(), y.height(), y.width());
    let count = c * (h * (w - 1) + (h - 1) * w);
    if count == 0 {
        return Ok((0.0, want_grad.then(|| vec![0.0; y.len()])));
    }
    let (yd, fd) = (y.data(), f_out.data());
    let mut grad = want_grad.then(|| vec![0.0f64; y.len()]);
    let mut sum = 0.0;
    let inv = 1.0 / count as f64;
    let mut visit = |a: usize, b: usize| {
        let d = (fd[b] as f64 - fd[a] as f64) - (yd[b] as f64 - yd[a] as f64);
        sum += d.abs();
        if let Some(g) = grad.as_mut() {
            let s = d.signum() * inv;
            g[b] += s;
            g[a] -= s;
        }
    };
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for x in 0..w {
                let i = base + r * w + x;
                if x + 1 < w {
                    visit(i, i + 1);
                }
                if r + 1 < h {
                    visit(i, i + w);
                }
            }
        }
    }
    Ok((sum * inv, grad))
}

/// Pixel term (already `t`-reweighted) plus the weighted auxiliary terms.
pub fn composite_loss_hook(
    pixel_term: f64,
    y: &ImageTensor<f32>,
    f_out: &ImageTensor<f32>,
    weights: &CompositeWeights,
) -> Result<f64> {
    weights.validate()?;
    Ok(pixel_term + weights.lambda_grad * gradient_difference(y, f_out)?)
}

/// How a prediction is scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub p: u32,
    /// Pixel residuals are divided by this (`t` for x0 prediction, 1 for velocity).
    pub scale: f64,
    pub composite: Option<CompositeWeights>,
}

/// Loss and its gradient with respect to `pred`. When `region` is given only
/// those elements enter the pixel term.
pub fn loss_and_grad(
    pred: &ImageTensor<f32>,
    target: &ImageTensor<f32>,
    spec: &LossSpec,
    region: Option<&[bool]>,
) -> Result<(f64, ImageTensor<f32>)> {
    ensure_same_shape(target.shape(), pred.shape())?;
    if let Some(r) = region {
        if r.len() != pred.len() {
            return Err(Error::InvalidShape(
                "loss region does not match the prediction".into(),
            ));
        }
    }
    let counted = region.map_or(pred.len(), |r| r.iter().filter(|&&b| b).count());
    if counted == 0 {
        return Err(Error::config("loss region is empty"));
    }
    let inv_n = 1.0 / counted as f64;
    let inv_s = 1.0 / spec.scale;
    let mut grad = vec![0.0f64; pred.len()];
    let mut sum = 0.0;
    for (i, (&f, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        if region.is_some_and(|r| !r[i]) {
            continue;
        }
        let r = (f as f64 - y as f64) * inv_s;
        if spec.p == 1 {
            sum += r.abs();
            grad[i] = r.signum() * inv_s * inv_n;
        } else {
            sum += r * r;
            grad[i] = 2.0 * r * inv_s * inv_n;
        }
    }
    let mut loss = sum * inv_n;
    if let Some(w) = spec.composite {
        w.validate()?;
        if w.lambda_grad > 0.0 {
            let (term, g) = gradient_difference_grad(target, pred, true)?;
            loss = composite_loss_hook(loss, target, pred, &w)?;
            debug_assert!(
                (loss - (sum * inv_n + w.lambda_grad * term)).abs() <= 1e-9 * loss.abs().max(1.0)
            );
            for (a, b) in grad.iter_mut().zip(g.expect("requested")) {
                *a += w.lambda_grad * b;
            }
        }
    }
    let grad = ImageTensor::new(
        pred.channels(),
        pred.height(),
        pred.width(),
        grad.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok((loss, grad))
}

/// Random quantities consumed by one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub t: f64,
    pub eps: ImageTensor<f32>,
    pub drop_condition: bool,
}

/// Draw `(t, eps, dropout)` for one sample. The number of values consumed
/// does not depend on the dropout probability, so variants that differ only
/// in dropout see identical `t` and noise.
pub fn draw_sample<R: Rng + ?Sized>(
    manifest: &TrainManifest,
    state_shape: Shape,
    rng: &mut R,
) -> Result<SampleDraw> {
    let ts = manifest.t_sampler();
    let raw: f64 = if ts.strategy.needs_gaussian() {
        rng.sample(StandardNormal)
    } else {
        rng.random()
    };
    let t = sample_t(&ts, raw)?;
    let eps = ImageTensor::<f32>::randn(state_shape, rng);
    let u: f64 = rng.random();
    Ok(SampleDraw {
        t,
        eps,
        drop_condition: u < manifest.variant.cfg_dropout_prob,
    })
}

/// Everything computed for one sample, kept for inspection in tests.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub input: ImageTensor<f32>,
    pub state: ImageTensor<f32>,
    pub output: ImageTensor<f32>,
    /// Regression target: `y` for x0 prediction, `endpoint - y` for velocity.
    pub target: ImageTensor<f32>,
    pub loss: f64,
    pub grads: Vec<f32>,
}

/// The state at time `t` for a pair, in the network's input resolution.
pub fn training_state(
    manifest: &TrainManifest,
    pair: &Pair,
    draw: &SampleDraw,
) -> Result<ImageTensor<f32>> {
    let t = draw.t as f32;
    match manifest.variant.path {
        FlowPath::Standard => {
            let y = match manifest.task.scale() {
                1 => pair.target.clone(),
                r => pair.target.box_downsample(r)?,
            };
            make_state(&y, &draw.eps, t)
        }
        FlowPath::Bridge => make_bridge_state(&pair.target, &pair.condition, t),
    }
}

/// Forward, loss and parameter gradients for one sample.
pub fn sample_gradient(
    model: &Model<f32>,
    manifest: &TrainManifest,
    pair: &Pair,
    draw: &SampleDraw,
) -> Result<SampleTrace> {
    let state = training_state(manifest, pair, draw)?;
    let input = match manifest.variant.path {
        FlowPath::Standard => {
            let cond = if draw.drop_condition {
                ImageTensor::zeros(pair.condition.shape())
            } else {
                pair.condition.clone()
            };
            ImageTensor::concat_channels(&[&cond, &state])?
        }
        FlowPath::Bridge => state.clone(),
    };
    let (output, tape) = forward_tape(&model.params, &model.cfg, &input, model.time_arg(draw.t))?;
    let (target, spec) = match manifest.variant.parameterization {
        Parameterization::X0Pred => (
            pair.target.clone(),
            LossSpec {
                p: manifest.p,
                scale: draw.t,
                composite: manifest
                    .variant
                    .composite_loss
                    .then_some(manifest.composite),
            },
        ),
        Parameterization::VPred => {
            let endpoint = match manifest.variant.path {
                FlowPath::Standard => &draw.eps,
                FlowPath::Bridge => &pair.condition,
            };
            (
                endpoint.zip_map(&pair.target, |e, y| e - y)?,
                LossSpec {
                    p: manifest.p,
                    scale: 1.0,
                    composite: None,
                },
            )
        }
    };
    let region: Option<Vec<bool>> = pair
        .mask()
        .map(|m| m.data().iter().map(|&k| k == 0.0).collect());
    let (loss, grad_out) = loss_and_grad(&output, &target, &spec, region.as_deref())?;
    let grads = backward_tape(&model.params, &model.cfg, &tape, &grad_out, false)?.params;
    Ok(SampleTrace {
        input,
        state,
        output,
        target,
        loss,
        grads,
    })
}

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub t_values: Vec<f64>,
    pub dropped: usize,
}

/// One Adam step on the mean per-sample loss of `batch`.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    manifest: &TrainManifest,
    batch: &[Pair],
    rng: &mut ChaCha8Rng,
    lr: f64,
    parallel: bool,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut draws = Vec::with_capacity(batch.len());
    for pair in batch {
        let state_shape = Shape::new(
            pair.target.channels(),
            pair.condition.height(),
            pair.condition.width(),
        );
        draws.push(draw_sample(manifest, state_shape, rng)?);
    }
    let model_ref: &Model<f32> = model;
    let run = |(pair, draw): (&Pair, &SampleDraw)| sample_gradient(model_ref, manifest, pair, draw);
    let traces: Vec<SampleTrace> = if parallel {
        batch
            .par_iter()
            .zip(draws.par_iter())
            .map(run)
            .collect::<Result<_>>()?
    } else {
        batch
            .iter()
            .zip(draws.iter())
            .map(run)
            .collect::<Result<_>>()?
    };

    let inv_b = 1.0 / batch.len() as f32;
    let mut grads = vec![0.0f32; model.params.count()];
    let mut loss = 0.0;
    for tr in &traces {
        loss += tr.loss;
        for (g, &s) in grads.iter_mut().zip(&tr.grads) {
            *g += s;
        }
    }
    grads.iter_mut().for_each(|g| *g *= inv_b);
    loss /= batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
    }
    adam.step(model.params.values_mut(), &grads, lr)?;
    Ok(StepReport {
        loss,
        lr,
        t_values: draws.iter().map(|d| d.t).collect(),
        dropped: draws.iter().filter(|d| d.drop_condition).count(),
    })
}

/// Mean validation metrics at `steps` Euler steps, with the manifest's fixed seed.
pub fn validate(
    model: &Model<f32>,
    manifest: &TrainManifest,
    pairs: &[Pair],
    steps: usize,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let opts = SamplerOptions {
        steps,
        ..manifest.sampler_options()
    };
    evaluate_pairs(model, pairs, &opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iter: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub val_loss: f64,
}

pub fn train_csv(records: &[TrainRecord]) -> String {
    let mut out = format!("{TRAIN_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.3}\n",
            r.iter, r.loss, r.lr, r.seconds
        ));
    }
    out
}

pub fn val_csv(records: &[ValRecord]) -> String {
    let mut out = format!("{VAL_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.9e}\n",
            r.iter, r.psnr, r.ssim, r.val_loss
        ));
    }
    out
}

/// Callbacks from the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _iter: usize, _report: &StepReport) {}
    fn on_validation(&mut self, _record: &ValRecord) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where logs, checkpoints, samples and the manifest copy go.
    pub out_dir: Option<PathBuf>,
    /// Compute per-sample gradients on the rayon pool.
    pub parallel: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: Model<f32>,
    pub train_log: Vec<TrainRecord>,
    pub val_log: Vec<ValRecord>,
    /// Validation of the final weights.
    pub final_metrics: MetricsReport,
    pub final_val_loss: f64,
    pub best_iter: usize,
    pub best_val_loss: f64,
    pub best_model: Model<f32>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SAMPLES_DIR: &str = "samples";

fn checkpoint_of(model: &Model<f32>, manifest: &TrainManifest, iteration: usize) -> Checkpoint {
    Checkpoint {
        config: model.cfg.clone(),
        iteration: iteration as u64,
        meta: manifest.checkpoint_meta(),
        params: model.params.clone(),
    }
}

/// Full training run.
pub fn train(
    manifest: &TrainManifest,
    opts: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary> {
    manifest.validate()?;
    let out = opts.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir.join(SAMPLES_DIR))?;
        fs::write(dir.join(MANIFEST_FILE), manifest.to_toml()?)?;
    }
    let cfg = manifest.backbone_config();
    let mut model = Model::<f32>::init(cfg, manifest.seed)?;
    let mut adam = AdamState::new(model.params.count());
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, 1));
    let mut flow_rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, 2));
    let val_pairs = manifest.validation_pairs()?;

    let start = Instant::now();
    let mut train_log = Vec::new();
    let mut val_log = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let mut last_good: Option<PathBuf> = None;
    let mut window = (0.0, 0usize);
    let mut final_eval = None;

    for i in 0..manifest.iterations {
        let iter = i + 1;
        let lr = cosine_lr(i, manifest.iterations, manifest.lr_init, manifest.lr_min)?;
        let batch = make_batch(
            manifest.task,
            &manifest.degrade,
            manifest.batch_size,
            manifest.crop,
            manifest.augment,
            &mut data_rng,
        )?;
        let report = train_step(
            &mut model,
            &mut adam,
            manifest,
            &batch,
            &mut flow_rng,
            lr,
            opts.parallel,
        )
        .map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!(
                "{msg} at iteration {iter}; last good checkpoint: {}",
                last_good
                    .as_ref()
                    .map_or("none".to_string(), |p| p.display().to_string())
            )),
            other => other,
        })?;
        observer.on_step(iter, &report);
        window.0 += report.loss;
        window.1 += 1;
        if iter % manifest.log_every == 0 || iter == manifest.iterations {
            train_log.push(TrainRecord {
                iter,
                loss: window.0 / window.1 as f64,
                lr,
                seconds: start.elapsed().as_secs_f64(),
            });
            window = (0.0, 0);
        }
        if iter % manifest.validation_every == 0 || iter == manifest.iterations {
            let eval = validate(&model, manifest, &val_pairs, manifest.validation_steps)?;
            let rec = ValRecord {
                iter,
                psnr: eval.mean.psnr_rgb,
                ssim: eval.mean.ssim,
                val_loss: eval.loss,
            };
            observer.on_validation(&rec);
            val_log.push(rec);
            if best.as_ref().is_none_or(|(_, l, _)| eval.loss < *l) {
                best = Some((iter, eval.loss, model.clone()));
                if let Some(dir) = out {
                    write_checkpoint(
                        &dir.join(BEST_CHECKPOINT),
                        &checkpoint_of(&model, manifest, iter),
                    )?;
                }
            }
            if iter == manifest.iterations {
                final_eval = Some(eval);
            }
        }
        if let Some(dir) = out {
            if iter % manifest.checkpoint_every == 0 {
                let path = dir.join(format!("iter_{iter:06}.ckpt"));
                write_checkpoint(&path, &checkpoint_of(&model, manifest, iter))?;
                last_good = Some(path);
            }
        }
    }

    let final_eval = final_eval.expect("final iteration always validates");
    if let Some(dir) = out {
        write_checkpoint(
            &dir.join(FINAL_CHECKPOINT),
            &checkpoint_of(&model, manifest, manifest.iterations),
        )?;
        fs::write(dir.join(TRAIN_LOG), train_csv(&train_log))?;
        fs::write(dir.join(VAL_LOG), val_csv(&val_log))?;
        write_samples(
            &dir.join(SAMPLES_DIR),
            &val_pairs,
            &final_eval,
            manifest.sample_images,
        )?;
    }
    let (best_iter, best_val_loss, best_model) = best.expect("at least one validation");
    Ok(TrainSummary {
        model,
        train_log,
        val_log,
        final_metrics: final_eval.mean,
        final_val_loss: final_eval.loss,
        best_iter,
        best_val_loss,
        best_model,
    })
}

/// Write condition, output and target PNGs for the first `count` pairs.
pub fn write_samples(dir: &Path, pairs: &[Pair], eval: &Evaluation, count: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (pair, out)) in pairs.iter().zip(&eval.outputs).take(count).enumerate() {
        let cond = if pair.condition.channels() == 4 {
            pair.condition.select_channels(0, 3)?
        } else {
            pair.condition.clone()
        };
        write_png(&dir.join(format!("{i:03}_input.png")), &cond)?;
        write_png(&dir.join(format!("{i:03}_output.png")), out)?;
        write_png(&dir.join(format!("{i:03}_target.png")), &pair.target)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::{rfr_loss, velocity_loss};
    use crate::stats::{ks_p_value, ks_statistic};

    fn tiny(task: TaskKind) -> TrainManifest {
        TrainManifest {
            task,
            batch_size: 2,
            iterations: 20,
            crop: 16,
            validation_size: 2,
            validation_every: 10,
            log_every: 5,
            backbone: BackboneSize {
                base_width: 4,
                depth: 2,
                time_embed_dim: 8,
            },
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule_examples() {
        assert!((cosine_lr(0, 100, 1e-4, 1e-6).unwrap() - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(100, 100, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-4, 1e-6).unwrap() - 5.05e-5).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1e-4, 1e-6).is_err());
        assert!(cosine_lr(101, 100, 1e-4, 1e-6).is_err());
        let mut last = f64::INFINITY;
        for i in 0..=100 {
            let lr = cosine_lr(i, 100, 1e-4, 1e-6).unwrap();
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn manifest_validation() {
        let ok = TrainManifest::default();
        ok.validate().unwrap();
        let bad_lr = TrainManifest {
            lr_min: 1e-3,
            ..Default::default()
        };
        assert!(bad_lr.validate().is_err());
        let mut bridge = TrainManifest::default();
        bridge.variant.path = FlowPath::Bridge;
        bridge.validate().unwrap();
        bridge.task = TaskKind::Sr2x;
        assert!(bridge.validate().is_err());
        let mut drop = TrainManifest::default();
        drop.variant.cfg_dropout_prob = 1.0;
        assert!(drop.validate().is_err());
        let odd = TrainManifest {
            crop: 30,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn manifest_toml_roundtrip_and_unknown_keys() {
        let mut m = TrainManifest::default();
        m.variant.t_strategy = TStrategy::LogitNormal;
        m.task = TaskKind::Deblur;
        let text = m.to_toml().unwrap();
        assert_eq!(TrainManifest::from_toml(&text).unwrap(), m);
        assert!(TrainManifest::from_toml("bogus = 1\n").is_err());
        assert!(TrainManifest::from_toml("[variant]\nfoo = true\n").is_err());
        assert!(TrainManifest::from_toml("lr_init = 1e-6\nlr_min = 1e-4\n").is_err());
    }

    #[test]
    fn channel_layouts() {
        let cases = [
            (TaskKind::Lowlight, FlowPath::Standard, 6, 1),
            (TaskKind::Lowlight, FlowPath::Bridge, 3, 1),
            (TaskKind::Inpaint, FlowPath::Standard, 7, 1),
            (TaskKind::Colorize, FlowPath::Standard, 4, 1),
            (TaskKind::Sr2x, FlowPath::Standard, 6, 2),
        ];
        for (task, path, inc, r) in cases {
            let mut m = TrainManifest {
                task,
                ..Default::default()
            };
            m.variant.path = path;
            let cfg = m.backbone_config();
            assert_eq!(
                (cfg.in_channels, cfg.out_channels, cfg.upsample_factor),
                (inc, 3, r)
            );
        }
    }

    #[test]
    fn composite_hook_examples() {
        let y = crate::synthdata::gen_image(1, 16).unwrap();
        let w = CompositeWeights::default();
        assert_eq!(composite_loss_hook(0.0, &y, &y, &w).unwrap(), 0.0);
        let f = y.map(|v| v + 0.3);
        assert_eq!(
            composite_loss_hook(0.7, &y, &f, &CompositeWeights { lambda_grad: 0.0 }).unwrap(),
            0.7
        );
        let a = ImageTensor::filled(Shape::new(3, 8, 8), 0.2f32);
        let b = ImageTensor::filled(Shape::new(3, 8, 8), 0.6f32);
        assert_eq!(gradient_difference(&a, &b).unwrap(), 0.0);
        let spec = LossSpec {
            p: 1,
            scale: 0.5,
            composite: Some(w),
        };
        let (loss, _) = loss_and_grad(&b, &a, &spec, None).unwrap();
        assert!((loss - 0.8).abs() < 1e-6);
        assert!(composite_loss_hook(0.0, &a, &b, &CompositeWeights { lambda_grad: -1.0 }).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let y = crate::synthdata::gen_image(2, 16)
            .unwrap()
            .crop(0, 0, 6, 5)
            .unwrap();
        let f = crate::synthdata::gen_image(3, 16)
            .unwrap()
            .crop(0, 0, 6, 5)
            .unwrap();
        for spec in [
            LossSpec {
                p: 1,
                scale: 0.3,
                composite: None,
            },
            LossSpec {
                p: 2,
                scale: 0.7,
                composite: None,
            },
            LossSpec {
                p: 1,
                scale: 0.5,
                composite: Some(CompositeWeights { lambda_grad: 0.4 }),
            },
        ] {
            let (_, g) = loss_and_grad(&f, &y, &spec, None).unwrap();
            let h = 1e-3f32;
            for i in (0..f.len()).step_by(7) {
                let mut fp = f.clone();
                fp.data_mut()[i] += h;
                let mut fm = f.clone();
                fm.data_mut()[i] -= h;
                let lp = loss_and_grad(&fp, &y, &spec, None).unwrap().0;
                let lm = loss_and_grad(&fm, &y, &spec, None).unwrap().0;
                let fd = (lp - lm) / (2.0 * h as f64);
                assert!(
                    (fd - g.data()[i] as f64).abs() < 1e-3,
                    "{spec:?} index {i}: {fd} vs {}",
                    g.data()[i]
                );
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let y = crate::synthdata::gen_image(4, 16).unwrap();
        for t in [1e-3, 0.2, 1.0] {
            let spec = LossSpec {
                p: 1,
                scale: t,
                composite: Some(CompositeWeights::default()),
            };
            assert_eq!(loss_and_grad(&y, &y, &spec, None).unwrap().0, 0.0);
        }
    }

    #[test]
    fn adam_step_on_a_linear_toy() {
        // f(w) = w * x with loss |w x - y| / t; one Adam step by hand
        let (x, y, t, w0, lr) = (2.0f64, 1.0f64, 0.5f64, 0.1f64, 0.01f64);
        let grad = ((w0 * x - y).signum() / t) * x;
        let m = 0.1 * grad;
        let v = 0.001 * grad * grad;
        let mhat = m / 0.1;
        let vhat = v / 0.001;
        let expected = w0 - lr * mhat / (vhat.sqrt() + 1e-8);

        let pred = ImageTensor::<f32>::filled(Shape::new(1, 1, 1), (w0 * x) as f32);
        let target = ImageTensor::<f32>::filled(Shape::new(1, 1, 1), y as f32);
        let (_, g) = loss_and_grad(
            &pred,
            &target,
            &LossSpec {
                p: 1,
                scale: t,
                composite: None,
            },
            None,
        )
        .unwrap();
        let mut params = vec![w0];
        let mut adam = AdamState::<f64>::new(1);
        adam.step(&mut params, &[g.data()[0] as f64 * x], lr)
            .unwrap();
        assert!((params[0] - expected).abs() < 1e-12);
        assert!((params[0] - (w0 + lr)).abs() < 1e-9);
    }

    #[test]
    fn masked_loss_ignores_known_region() {
        let m = tiny(TaskKind::Inpaint);
        let pairs = m.validation_pairs().unwrap();
        let model = Model::init(m.backbone_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = draw_sample(&m, pairs[0].target.shape(), &mut rng).unwrap();
        let trace = sample_gradient(&model, &m, &pairs[0], &draw).unwrap();
        let mask = pairs[0].mask().unwrap();
        let mut known_only = trace.output.clone();
        for (o, (&k, &y)) in known_only
            .data_mut()
            .iter_mut()
            .zip(mask.data().iter().zip(trace.target.data()))
        {
            if k == 0.0 {
                *o = y;
            }
        }
        let region: Vec<bool> = mask.data().iter().map(|&k| k == 0.0).collect();
        let spec = LossSpec {
            p: 1,
            scale: draw.t,
            composite: None,
        };
        assert_eq!(
            loss_and_grad(&known_only, &trace.target, &spec, Some(&region))
                .unwrap()
                .0,
            0.0
        );
    }

    #[test]
    fn bridge_never_concatenates() {
        let mut m = tiny(TaskKind::Deblur);
        m.variant.path = FlowPath::Bridge;
        let model = Model::init(m.backbone_config(), 0).unwrap();
        assert_eq!(model.cfg.in_channels, 3);
        let pairs = m.validation_pairs().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = draw_sample(&m, pairs[0].target.shape(), &mut rng).unwrap();
        let trace = sample_gradient(&model, &m, &pairs[0], &draw).unwrap();
        assert_eq!(trace.input.channels(), 3);
        let expected =
            make_bridge_state(&pairs[0].target, &pairs[0].condition, draw.t as f32).unwrap();
        assert_eq!(trace.input, expected);
    }

    #[test]
    fn velocity_and_x0_residuals_agree() {
        let mut m = tiny(TaskKind::Lowlight);
        m.variant.parameterization = Parameterization::VPred;
        let model = Model::<f32>::init(m.backbone_config(), 3).unwrap();
        let pairs = m.validation_pairs().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for pair in &pairs {
            let draw = draw_sample(&m, pair.target.shape(), &mut rng).unwrap();
            let trace = sample_gradient(&model, &m, pair, &draw).unwrap();
            let y = pair.target.cast::<f64>();
            let eps = draw.eps.cast::<f64>();
            let g = trace.output.cast::<f64>();
            let t = draw.t;
            let v_loss = velocity_loss(&y, &eps, &g).unwrap();
            assert!((v_loss - trace.loss).abs() < 1e-5 * v_loss.max(1.0));
            // x0 implied by the velocity prediction at the same state
            let y_t = make_state(&y, &eps, t).unwrap();
            let f = y_t.zip_map(&g, |s, v| s - t * v).unwrap();
            let x0_loss = rfr_loss(&y, &f, t, 1).unwrap();
            assert!(
                (x0_loss - v_loss).abs() < 1e-9 * v_loss.max(1.0),
                "{x0_loss} vs {v_loss}"
            );
        }
    }

    #[derive(Default)]
    struct Recorder {
        t: Vec<f64>,
        dropped: usize,
        samples: usize,
        losses: Vec<f64>,
    }

    impl TrainObserver for Recorder {
        fn on_step(&mut self, _iter: usize, r: &StepReport) {
            self.t.extend(&r.t_values);
            self.dropped += r.dropped;
            self.samples += r.t_values.len();
            self.losses.push(r.loss);
        }
    }

    fn micro(iterations: usize) -> TrainManifest {
        TrainManifest {
            task: TaskKind::Identity,
            batch_size: 1,
            iterations,
            crop: 16,
            validation_size: 1,
            validation_every: iterations,
            checkpoint_every: iterations,
            log_every: 100,
            backbone: BackboneSize {
                base_width: 2,
                depth: 1,
                time_embed_dim: 8,
            },
            ..Default::default()
        }
    }

    #[test]
    fn recorded_t_follows_beta_and_dropout_rate() {
        let mut m = micro(10_000);
        m.variant.cfg_dropout_prob = 0.1;
        let mut rec = Recorder::default();
        train(&m, &TrainOptions::default(), &mut rec).unwrap();
        let d = ks_statistic(&rec.t, |t| t * t);
        assert!(ks_p_value(d, rec.t.len()) > 0.01, "KS statistic {d}");
        let frac = rec.dropped as f64 / rec.samples as f64;
        assert!((0.09..=0.11).contains(&frac), "dropout fraction {frac}");
    }

    #[test]
    fn identity_task_is_learned() {
        let m = TrainManifest {
            task: TaskKind::Identity,
            batch_size: 4,
            iterations: 500,
            crop: 32,
            lr_init: 1e-3,
            lr_min: 1e-5,
            validation_size: 4,
            validation_every: 500,
            log_every: 50,
            backbone: BackboneSize {
                base_width: 8,
                depth: 2,
                time_embed_dim: 8,
            },
            ..Default::default()
        };
        let mut rec = Recorder::default();
        let s = train(&m, &TrainOptions::default(), &mut rec).unwrap();
        let tail: f64 = rec.losses[450..].iter().sum::<f64>() / 50.0;
        assert!(tail < rec.losses[..50].iter().sum::<f64>() / 50.0);
        assert!(s.final_metrics.psnr_rgb > 20.0, "{:?}", s.final_metrics);
    }

    #[test]
    fn training_is_deterministic_and_parallel_matches() {
        let m = tiny(TaskKind::Lowlight);
        let a = train(&m, &TrainOptions::default(), &mut ()).unwrap();
        let b = train(&m, &TrainOptions::default(), &mut ()).unwrap();
        let c = train(
            &m,
            &TrainOptions {
                parallel: true,
                ..Default::default()
            },
            &mut (),
        )
        .unwrap();
        let losses = |s: &TrainSummary| {
            s.train_log
                .iter()
                .map(|r| r.loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(losses(&a), losses(&c));
        assert_eq!(a.model.params, c.model.params);
        assert_eq!(a.val_log, b.val_log);
    }

    #[test]
    fn run_directory_contents() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(TaskKind::Sr2x);
        let s = train(
            &m,
            &TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                parallel: false,
            },
            &mut (),
        )
        .unwrap();
        for f in [
            MANIFEST_FILE,
            TRAIN_LOG,
            VAL_LOG,
            FINAL_CHECKPOINT,
            BEST_CHECKPOINT,
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert!(log.starts_with("iter,loss,lr,seconds\n"));
        assert_eq!(log.lines().count(), 1 + 4);
        let val = fs::read_to_string(dir.path().join(VAL_LOG)).unwrap();
        assert!(val.starts_with("iter,psnr,ssim,val_loss\n"));
        assert_eq!(
            s.val_log.iter().map(|r| r.iter).collect::<Vec<_>>(),
            vec![10, 20]
        );
        let manifest =
            TrainManifest::from_toml(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(manifest, m);
        let ck = crate::backbone::read_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ck.params, s.model.params);
        assert_eq!(ck.iteration, 20);
        assert!(dir.path().join(SAMPLES_DIR).join("000_output.png").exists());
    }

    #[test]
    fn validation_is_repeatable() {
        let m = tiny(TaskKind::Deblur);
        let model = Model::init(m.backbone_config(), 0).unwrap();
        let pairs = m.validation_pairs().unwrap();
        let a = validate(&model, &m, &pairs, 3).unwrap();
        let b = validate(&model, &m, &pairs, 3).unwrap();
        assert_eq!(a.mean, b.mean);
        assert!(validate(&model, &m, &[], 3).is_err());
    }
}
