//! Few-step Euler inference along the induced flow.
//!
//! The state starts at the prior endpoint (noise, or the degraded input on the
//! bridge path) at `t = 1` and moves toward the network's prediction on the
//! grid `t_n = 1 - n / N`. Intermediate states are never clipped.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{CheckpointMeta, Model, Parameterization};
use crate::error::{Error, Result};
use crate::flowcore::{euler_step, euler_step_velocity, time_grid, FlowPath};
use crate::metrics::{MetricsReport, PSNR_CAP};
use crate::synthdata::{derive_seed, Pair};
use crate::tensor::{ImageTensor, Real, Shape};

/// Anything that maps a network input at time `t` to a prediction.
pub trait Network<T: Real> {
    /// Channels of the prediction (and of the state).
    fn out_channels(&self) -> usize;

    /// Spatial ratio between prediction and input.
    fn upsample_factor(&self) -> usize {
        1
    }

    fn evaluate(&self, input: &ImageTensor<T>, t: f64) -> Result<ImageTensor<T>>;
}

impl<T: Real> Network<T> for Model<T> {
    fn out_channels(&self) -> usize {
        self.cfg.out_channels
    }

    fn upsample_factor(&self) -> usize {
        self.cfg.upsample_factor
    }

    fn evaluate(&self, input: &ImageTensor<T>, t: f64) -> Result<ImageTensor<T>> {
        self.predict(input, t)
    }
}

/// Wraps a closure as a [`Network`]; handy for oracle predictors.
pub struct FnNetwork<F> {
    pub out_channels: usize,
    pub upsample_factor: usize,
    pub f: F,
}

impl<T: Real, F: Fn(&ImageTensor<T>, f64) -> Result<ImageTensor<T>>> Network<T> for FnNetwork<F> {
    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn upsample_factor(&self) -> usize {
        self.upsample_factor
    }

    fn evaluate(&self, input: &ImageTensor<T>, t: f64) -> Result<ImageTensor<T>> {
        (self.f)(input, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerOptions {
    pub steps: usize,
    pub seed: u64,
    pub clip_output: bool,
    /// Binary, target-shaped, 1 = known pixel. Known values come from the
    /// first `out_channels` channels of the condition.
    #[serde(skip)]
    pub mask: Option<ImageTensor<f32>>,
    /// `None` turns guidance off. `Some(s)` extrapolates from the
    /// unconditional prediction: `f_null + s (f_cond - f_null)`.
    pub cfg_scale: Option<f64>,
    pub parameterization: Parameterization,
    pub path: FlowPath,
    /// Draw new noise for re-noising the known region at every step instead
    /// of reusing the initial draw.
    pub fresh_mask_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            steps: 3,
            seed: 0,
            clip_output: true,
            mask: None,
            cfg_scale: None,
            parameterization: Parameterization::X0Pred,
            path: FlowPath::Standard,
            fresh_mask_noise: false,
        }
    }
}

impl SamplerOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if let Some(s) = self.cfg_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(format!(
                    "cfg_scale must be finite and >= 0, got {s}"
                )));
            }
            if self.path == FlowPath::Bridge {
                return Err(Error::config(
                    "guidance needs a concatenated condition; the bridge path has none",
                ));
            }
        }
        if self.mask.is_some() && self.path == FlowPath::Bridge {
            return Err(Error::config(
                "masked inference is defined for the standard path only",
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Check options against the training-side facts stored with a checkpoint.
/// Returns warnings for combinations that run but are not meaningful.
pub fn check_compatibility(
    model: &Model<f32>,
    meta: &CheckpointMeta,
    opts: &SamplerOptions,
) -> Result<Vec<String>> {
    opts.validate()?;
    if model.cfg.parameterization != opts.parameterization {
        return Err(Error::Incompatible(format!(
            "checkpoint predicts {}, options request {}",
            model.cfg.parameterization.name(),
            opts.parameterization.name()
        )));
    }
    if let Some(path) = &meta.path {
        if path != opts.path.name() {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained on the {path} path, options request {}",
                opts.path.name()
            )));
        }
    }
    let mut warnings = Vec::new();
    if matches!(opts.cfg_scale, Some(s) if s != 1.0) && meta.cfg_dropout_prob == 0.0 {
        warnings.push(
            "guidance requested but the checkpoint was trained without condition dropout"
                .to_string(),
        );
    }
    Ok(warnings)
}

/// Signature of the state update `(y_t, prediction, t, dt) -> y_{t - dt}`.
pub type StepFn<T> = dyn Fn(&ImageTensor<T>, &ImageTensor<T>, T, T) -> Result<ImageTensor<T>>;

struct Known<T> {
    mask: Vec<bool>,
    values: ImageTensor<T>,
}

impl<T: Real> Known<T> {
    fn new(mask: &ImageTensor<f32>, x: &ImageTensor<T>, target: Shape) -> Result<Self> {
        if mask.shape() != target {
            return Err(Error::ShapeMismatch {
                expected: target,
                actual: mask.shape(),
            });
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::config("mask must be binary"));
        }
        if x.channels() < target.channels
            || x.height() != target.height
            || x.width() != target.width
        {
            return Err(Error::InvalidShape(format!(
                "condition {} cannot supply known pixels for {target}",
                x.shape()
            )));
        }
        Ok(Self {
            mask: mask.data().iter().map(|&m| m == 1.0).collect(),
            values: x.select_channels(0, target.channels)?,
        })
    }

    /// Known pixels taken from `known`, others from `other`, chosen per element.
    fn merge(&self, known: &ImageTensor<T>, other: &ImageTensor<T>) -> ImageTensor<T> {
        let mut out = other.clone();
        for ((o, &k), &m) in out.data_mut().iter_mut().zip(known.data()).zip(&self.mask) {
            if m {
                *o = k;
            }
        }
        out
    }
}

fn predict<T: Real, N: Network<T> + ?Sized>(
    net: &N,
    x: &ImageTensor<T>,
    state: &ImageTensor<T>,
    t: f64,
    opts: &SamplerOptions,
) -> Result<ImageTensor<T>> {
    if opts.path == FlowPath::Bridge {
        return net.evaluate(state, t);
    }
    let with = |cond: &ImageTensor<T>| -> Result<ImageTensor<T>> {
        net.evaluate(&ImageTensor::concat_channels(&[cond, state])?, t)
    };
    match opts.cfg_scale {
        None => with(x),
        Some(1.0) => with(x),
        Some(s) => {
            let null = with(&ImageTensor::zeros(x.shape()))?;
            if s == 0.0 {
                return Ok(null);
            }
            let cond = with(x)?;
            let s = T::from_f64_lossy(s);
            null.zip_map(&cond, |u, c| u + s * (c - u))
        }
    }
}

/// Euler inference with the default update.
pub fn infer<T: Real, N: Network<T> + ?Sized>(
    net: &N,
    x: &ImageTensor<T>,
    opts: &SamplerOptions,
) -> Result<ImageTensor<T>> {
    infer_with_step(net, x, opts, &euler_step::<T>)
}

/// Inference with a mask of known pixels; `mask` overrides `opts.mask`.
pub fn infer_masked<T: Real, N: Network<T> + ?Sized>(
    net: &N,
    x: &ImageTensor<T>,
    mask: &ImageTensor<f32>,
    opts: &SamplerOptions,
) -> Result<ImageTensor<T>> {
    let opts = SamplerOptions {
        mask: Some(mask.clone()),
        ..opts.clone()
    };
    infer(net, x, &opts)
}

/// Guided inference at scale `s`.
pub fn infer_cfg<T: Real, N: Network<T> + ?Sized>(
    net: &N,
    x: &ImageTensor<T>,
    scale: f64,
    opts: &SamplerOptions,
) -> Result<ImageTensor<T>> {
    let opts = SamplerOptions {
        cfg_scale: Some(scale),
        ..opts.clone()
    };
    infer(net, x, &opts)
}

/// Inference with an injectable x0 state update. For x0 prediction every step,
/// including the last, goes through `step`; on the LR-domain path the final
/// step returns the full-resolution prediction instead.
pub fn infer_with_step<T: Real, N: Network<T> + ?Sized>(
    net: &N,
    x: &ImageTensor<T>,
    opts: &SamplerOptions,
    step: &StepFn<T>,
) -> Result<ImageTensor<T>> {
    opts.validate()?;
    let r = net.upsample_factor();
    if r > 1 && opts.parameterization == Parameterization::VPred {
        return Err(Error::config(
            "velocity prediction is not supported with an upsampling head",
        ));
    }
    let state_shape = Shape::new(net.out_channels(), x.height(), x.width());
    let target_shape = Shape::new(net.out_channels(), x.height() * r, x.width() * r);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = match opts.path {
        FlowPath::Standard => ImageTensor::<T>::randn(state_shape, &mut rng),
        FlowPath::Bridge => {
            if x.shape() != state_shape || r != 1 {
                return Err(Error::config(format!(
                    "the bridge path needs condition and target of one shape, got {} and {target_shape}",
                    x.shape()
                )));
            }
            x.clone()
        }
    };
    let known = match &opts.mask {
        Some(m) if r == 1 => Some(Known::new(m, x, target_shape)?),
        Some(_) => {
            return Err(Error::config(
                "masked inference is not supported with an upsampling head",
            ))
        }
        None => None,
    };

    let steps = opts.steps;
    let dt = T::from_f64_lossy(1.0 / steps as f64);
    let mut state = eps.clone();
    for (n, &t) in time_grid(steps).iter().enumerate() {
        let tt = T::from_f64_lossy(t);
        if let Some(k) = &known {
            let noise = if opts.fresh_mask_noise && n > 0 {
                ImageTensor::<T>::randn(state_shape, &mut rng)
            } else {
                eps.clone()
            };
            let keep = T::one() - tt;
            let renoised = k.values.zip_map(&noise, |v, e| keep * v + tt * e)?;
            state = k.merge(&renoised, &state);
        }
        let pred = predict(net, x, &state, t, opts)?;
        let last = n + 1 == steps;
        state = match opts.parameterization {
            Parameterization::VPred => euler_step_velocity(&state, &pred, dt)?,
            Parameterization::X0Pred if r > 1 && last => pred,
            Parameterization::X0Pred if r > 1 => step(&state, &pred.box_downsample(r)?, tt, dt)?,
            Parameterization::X0Pred => step(&state, &pred, tt, dt)?,
        };
    }
    if opts.clip_output {
        state = state.clip(T::zero(), T::one());
    }
    if let Some(k) = &known {
        state = k.merge(&k.values, &state);
    }
    Ok(state)
}

/// Metrics and outputs of inference over a fixed set of pairs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub outputs: Vec<ImageTensor<f32>>,
    pub reports: Vec<MetricsReport>,
    pub mean: MetricsReport,
    /// Mean per-element absolute error of the outputs.
    pub loss: f64,
    /// Wall time spent inside inference, excluding metric computation.
    pub seconds: f64,
}

/// Seed used for pair `index` when evaluating with base seed `seed`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Run inference on every pair with per-image seeds `image_seed(opts.seed, i)`.
/// Pairs that carry a mask channel are sampled with known-pixel replacement.
pub fn evaluate_pairs<N: Network<f32> + ?Sized>(
    net: &N,
    pairs: &[Pair],
    opts: &SamplerOptions,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut reports = Vec::with_capacity(pairs.len());
    let mut loss = 0.0;
    let mut seconds = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let item = SamplerOptions {
            seed: image_seed(opts.seed, i),
            mask: pair.mask(),
            ..opts.clone()
        };
        let start = Instant::now();
        let out = infer(net, &pair.condition, &item)?;
        seconds += start.elapsed().as_secs_f64();
        let l1 = out
            .data()
            .iter()
            .zip(pair.target.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / out.len() as f64;
        loss += l1 / pairs.len() as f64;
        reports.push(MetricsReport::compute(&out, &pair.target)?);
        outputs.push(out);
    }
    Ok(Evaluation {
        mean: MetricsReport::mean(&reports)?,
        outputs,
        reports,
        loss,
        seconds,
    })
}

/// Mean metrics of the conditions themselves against the targets, for
/// same-shape tasks.
pub fn degraded_baseline(pairs: &[Pair]) -> Result<MetricsReport> {
    let reports = pairs
        .iter()
        .map(|p| MetricsReport::compute(&p.condition, &p.target))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&reports)
}

/// How guided predictions are combined; recorded with every guided run.
pub const GUIDANCE_RULE: &str =
    "prediction space: f_null + s * (f_cond - f_null), null condition = zeros";

/// Metadata written next to inference outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub checkpoint: String,
    pub variant: String,
    /// Present only when guidance is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_rule: Option<String>,
    pub options: SamplerOptions,
}

impl InferenceRecord {
    pub fn new(
        checkpoint: impl Into<String>,
        variant: impl Into<String>,
        options: &SamplerOptions,
    ) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            variant: variant.into(),
            guidance_rule: options.cfg_scale.map(|_| GUIDANCE_RULE.to_string()),
            options: options.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

pub const SWEEP_CSV_HEADER: &str = "N,psnr,ssim,seconds";

/// Evaluate one network at several step counts with identical per-image seeds.
pub fn step_sweep<N: Network<f32> + ?Sized>(
    net: &N,
    pairs: &[Pair],
    steps: &[usize],
    opts: &SamplerOptions,
) -> Result<Vec<SweepRow>> {
    if steps.is_empty() {
        return Err(Error::config("step list is empty"));
    }
    steps
        .iter()
        .map(|&n| {
            let eval = evaluate_pairs(
                net,
                pairs,
                &SamplerOptions {
                    steps: n,
                    ..opts.clone()
                },
            )?;
            Ok(SweepRow {
                steps: n,
                psnr: eval.mean.psnr_rgb.min(PSNR_CAP),
                ssim: eval.mean.ssim,
                seconds: eval.seconds,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.steps, r.psnr, r.ssim, r.seconds
        ));
    }
    out
}
