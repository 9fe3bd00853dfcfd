//! Command implementations behind the `rfr` binary.

pub mod selfcheck;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rfr_core::backbone::{read_checkpoint, Model, Parameterization};
use rfr_core::experiment::{export_valset, ExperimentSpec};
use rfr_core::flowcore::{FlowPath, TStrategy};
use rfr_core::metrics::{metrics_csv_row, MetricsReport, METRICS_CSV_HEADER};
use rfr_core::pngio::{read_png, write_png};
use rfr_core::sampler::{
    check_compatibility, degraded_baseline, evaluate_pairs, image_seed, infer, step_sweep,
    sweep_csv, InferenceRecord, SamplerOptions, SweepRow,
};
use rfr_core::synthdata::{validation_set, DegradeSpec, TaskKind};
use rfr_core::trainer::{
    train, TrainObserver, TrainOptions, TrainSummary, ValRecord, FINAL_CHECKPOINT,
};
use rfr_core::ImageTensor;

/// Process exit status for an error: 1 configuration or validation,
/// 2 numerical failure, 3 I/O or file format.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rfr_core::Error>() {
            return match e {
                rfr_core::Error::Numerical(_) => 2,
                rfr_core::Error::Io(_) | rfr_core::Error::Format(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

struct Progress<'a> {
    out: &'a mut dyn Write,
    name: String,
}

impl TrainObserver for Progress<'_> {
    fn on_validation(&mut self, r: &ValRecord) {
        let _ = writeln!(
            self.out,
            "[{}] iter {:>6}  psnr {:.3}  ssim {:.4}  val_loss {:.5}",
            self.name, r.iter, r.psnr, r.ssim, r.val_loss
        );
    }
}

/// Train one experiment into its output directory.
pub fn cmd_train(
    spec: &ExperimentSpec,
    single_thread: bool,
    out: &mut dyn Write,
) -> Result<TrainSummary> {
    spec.validate()?;
    let dir = spec.resolve_output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("experiment.toml"), spec.to_toml()?)?;
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        parallel: !single_thread,
    };
    let summary = {
        let mut progress = Progress {
            out: &mut *out,
            name: spec.name.clone(),
        };
        train(&spec.manifest, &opts, &mut progress)?
    };
    let m = &summary.final_metrics;
    if spec.manifest.task.same_shape() {
        let base = degraded_baseline(&spec.manifest.validation_pairs()?)?;
        writeln!(
            out,
            "[{}] degraded input: psnr {:.3} dB  ssim {:.4}",
            spec.name, base.psnr_rgb, base.ssim
        )?;
    }
    writeln!(
        out,
        "[{}] final: psnr {:.3} dB  psnr_y {}  ssim {:.4}  val_loss {:.5}  (best val_loss {:.5} at iter {})  -> {}",
        spec.name,
        m.psnr_rgb,
        m.psnr_y.map_or("-".into(), |v| format!("{v:.3} dB")),
        m.ssim,
        summary.final_val_loss,
        summary.best_val_loss,
        summary.best_iter,
        dir.display()
    )?;
    Ok(summary)
}

/// Where the inputs of an inference run come from.
#[derive(Clone, Debug)]
pub enum InferSource {
    /// Condition PNGs; no ground truth.
    Files(Vec<PathBuf>),
    /// Held-out synthetic pairs for the checkpoint's task.
    Synthetic {
        count: usize,
        crop: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct InferRequest {
    pub checkpoint: PathBuf,
    pub source: InferSource,
    pub options: SamplerOptions,
    /// Binary mask PNG (white = known) applied to every file input.
    pub mask: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub variant: String,
}

/// Run inference from a checkpoint; returns the mean metrics when targets exist.
pub fn cmd_infer(req: &InferRequest, out: &mut dyn Write) -> Result<Option<MetricsReport>> {
    let ck = read_checkpoint(&req.checkpoint)
        .with_context(|| format!("loading {}", req.checkpoint.display()))?;
    let model = Model::new(ck.config.clone(), ck.params)?;
    // Parameterization and path are properties of the weights, not choices.
    let mut base = req.options.clone();
    base.parameterization = model.cfg.parameterization;
    if let Some(path) = &ck.meta.path {
        base.path = match path.as_str() {
            "bridge" => FlowPath::Bridge,
            _ => FlowPath::Standard,
        };
    }
    for w in check_compatibility(&model, &ck.meta, &base)? {
        writeln!(out, "warning: {w}")?;
    }
    fs::create_dir_all(&req.out_dir)?;
    let record = InferenceRecord::new(req.checkpoint.display().to_string(), &req.variant, &base);
    fs::write(req.out_dir.join(INFERENCE_RECORD), record.to_toml()?)?;
    match &req.source {
        InferSource::Files(files) => {
            let mask = match &req.mask {
                Some(p) => Some(binary_mask(&read_png(p)?, model.cfg.out_channels)?),
                None => None,
            };
            for (i, path) in files.iter().enumerate() {
                let x = read_png(path).with_context(|| format!("reading {}", path.display()))?;
                let opts = SamplerOptions {
                    seed: image_seed(base.seed, i),
                    mask: mask.clone().or_else(|| base.mask.clone()),
                    ..base.clone()
                };
                let start = Instant::now();
                let y = infer(&model, &x, &opts)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let target = req.out_dir.join(format!("{stem}_out.png"));
                write_png(&target, &y)?;
                writeln!(
                    out,
                    "{} -> {} ({:.1} ms)",
                    path.display(),
                    target.display(),
                    start.elapsed().as_secs_f64() * 1e3
                )?;
            }
            Ok(None)
        }
        InferSource::Synthetic { count, crop, seed } => {
            let task = match &ck.meta.task {
                Some(name) => TaskKind::parse(name)?,
                None => bail!("checkpoint does not record its task; pass input files instead"),
            };
            let pairs = validation_set(task, &DegradeSpec::default(), *count, *crop, *seed)?;
            let eval = evaluate_pairs(&model, &pairs, &base)?;
            let mut csv = format!("{METRICS_CSV_HEADER}\n");
            for (i, ((pair, y), m)) in pairs
                .iter()
                .zip(&eval.outputs)
                .zip(&eval.reports)
                .enumerate()
            {
                write_png(&req.out_dir.join(format!("{i:04}_output.png")), y)?;
                write_png(
                    &req.out_dir.join(format!("{i:04}_target.png")),
                    &pair.target,
                )?;
                csv.push_str(&metrics_csv_row(
                    &i.to_string(),
                    task.name(),
                    &req.variant,
                    base.steps,
                    m,
                ));
                csv.push('\n');
            }
            fs::write(req.out_dir.join("metrics.csv"), csv)?;
            writeln!(
                out,
                "{} images, N={}: psnr {:.3} dB  ssim {:.4}  ({:.2} ms per image)",
                pairs.len(),
                base.steps,
                eval.mean.psnr_rgb,
                eval.mean.ssim,
                eval.seconds * 1e3 / pairs.len() as f64
            )?;
            Ok(Some(eval.mean))
        }
    }
}

fn binary_mask(img: &ImageTensor<f32>, channels: usize) -> Result<ImageTensor<f32>> {
    let gray = img.select_channels(0, 1)?;
    let bin = gray.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    Ok(bin.repeat_channels(channels)?)
}

pub fn cmd_export_valset(
    task: TaskKind,
    count: usize,
    crop: usize,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    let pairs = validation_set(task, &DegradeSpec::default(), count, crop, seed)?;
    export_valset(dir, task, &pairs)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Steps,
    Sampling,
    Parameterization,
    TimeEmbedding,
    Bridge,
    Cfg,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Steps => "steps",
            AblationKind::Sampling => "sampling",
            AblationKind::Parameterization => "parameterization",
            AblationKind::TimeEmbedding => "time_embedding",
            AblationKind::Bridge => "bridge",
            AblationKind::Cfg => "cfg",
        }
    }
}

/// Metadata file written next to inference outputs.
pub const INFERENCE_RECORD: &str = "inference.toml";

pub const STEP_SWEEP: [usize; 5] = [1, 3, 5, 7, 10];
pub const COMPARISON_HEADER: &str = "variant,seed,psnr,psnr_y,ssim,val_loss";

/// One scored run (or one scoring of a run) in an ablation.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub val_loss: f64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub dir: PathBuf,
    pub rows: Vec<AblationRow>,
    pub sweep: Vec<SweepRow>,
}

fn comparison_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{},{:.6},{:.9e}\n",
            r.variant,
            r.seed,
            r.metrics.psnr_rgb,
            r.metrics
                .psnr_y
                .map_or(String::new(), |v| format!("{v:.6}")),
            r.metrics.ssim,
            r.val_loss
        ));
    }
    s
}

/// Run an ablation around `base`. Each variant trains in its own directory
/// below `<output>/<base name>-<kind>`; every seed in `seeds` gets its own run.
pub fn cmd_ablate(
    kind: AblationKind,
    base: &ExperimentSpec,
    seeds: &[u64],
    guidance: f64,
    single_thread: bool,
    out: &mut dyn Write,
) -> Result<AblationReport> {
    base.validate()?;
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    if kind == AblationKind::Bridge && !base.manifest.task.same_shape() {
        bail!(rfr_core::Error::Config(format!(
            "the bridge ablation needs a same-shape task; {} is not",
            base.manifest.task.name()
        )));
    }
    let root = base
        .resolve_output_dir()
        .with_file_name(format!("{}-{}", base.name, kind.name()));
    fs::create_dir_all(&root)?;

    let variants: Vec<(&str, ExperimentSpec)> = {
        let with = |f: &dyn Fn(&mut ExperimentSpec)| {
            let mut s = base.clone();
            f(&mut s);
            s
        };
        match kind {
            AblationKind::Steps => vec![("base", base.clone())],
            AblationKind::Sampling => TStrategy::ALL
                .iter()
                .map(|&st| (st.name(), with(&|s| s.manifest.variant.t_strategy = st)))
                .collect(),
            AblationKind::Parameterization => vec![
                (
                    "x0_pred",
                    with(&|s| s.manifest.variant.parameterization = Parameterization::X0Pred),
                ),
                (
                    "v_pred",
                    with(&|s| s.manifest.variant.parameterization = Parameterization::VPred),
                ),
            ],
            AblationKind::TimeEmbedding => vec![
                (
                    "no_time_embedding",
                    with(&|s| s.manifest.variant.time_embedding = false),
                ),
                (
                    "time_embedding",
                    with(&|s| s.manifest.variant.time_embedding = true),
                ),
            ],
            AblationKind::Bridge => vec![
                (
                    "standard",
                    with(&|s| s.manifest.variant.path = FlowPath::Standard),
                ),
                (
                    "bridge",
                    with(&|s| s.manifest.variant.path = FlowPath::Bridge),
                ),
            ],
            AblationKind::Cfg => vec![
                (
                    "plain",
                    with(&|s| s.manifest.variant.cfg_dropout_prob = 0.0),
                ),
                ("cfg", with(&|s| s.manifest.variant.cfg_dropout_prob = 0.1)),
            ],
        }
    };

    let mut rows = Vec::new();
    let mut sweep = Vec::new();
    for &seed in seeds {
        for (label, spec) in &variants {
            let mut spec = spec.clone();
            spec.manifest.seed = seed;
            spec.name = if seeds.len() > 1 {
                format!("{label}-s{seed}")
            } else {
                label.to_string()
            };
            let dir = root.join(&spec.name);
            spec.output_dir = Some(dir.clone());
            let summary = cmd_train(&spec, single_thread, out)?;
            rows.push(AblationRow {
                variant: label.to_string(),
                seed,
                metrics: summary.final_metrics,
                val_loss: summary.final_val_loss,
                dir: dir.clone(),
            });

            if kind == AblationKind::Cfg && *label == "cfg" {
                let pairs = spec.manifest.validation_pairs()?;
                let opts = SamplerOptions {
                    cfg_scale: Some(guidance),
                    ..spec.manifest.sampler_options()
                };
                let eval = evaluate_pairs(&summary.model, &pairs, &opts)?;
                let variant = format!("cfg_s{guidance}");
                let record = InferenceRecord::new(
                    dir.join(FINAL_CHECKPOINT).display().to_string(),
                    &variant,
                    &opts,
                );
                fs::write(
                    dir.join(format!("{variant}.{INFERENCE_RECORD}")),
                    record.to_toml()?,
                )?;
                rows.push(AblationRow {
                    variant,
                    seed,
                    metrics: eval.mean,
                    val_loss: eval.loss,
                    dir: dir.clone(),
                });
            }

            if kind == AblationKind::Steps {
                let pairs = spec.manifest.validation_pairs()?;
                let opts = spec.manifest.sampler_options();
                let rows_n = step_sweep(&summary.best_model, &pairs, &STEP_SWEEP, &opts)?;
                fs::write(dir.join("sweep.csv"), sweep_csv(&rows_n))?;
                let selected = summary
                    .val_log
                    .iter()
                    .find(|r| r.iter == summary.best_iter)
                    .expect("best iteration was validated");
                if let Some(r3) = rows_n
                    .iter()
                    .find(|r| r.steps == spec.manifest.validation_steps)
                {
                    writeln!(
                        out,
                        "[{}] N={} sweep psnr {:.6} vs validation at iter {} {:.6}: {}",
                        spec.name,
                        r3.steps,
                        r3.psnr,
                        selected.iter,
                        selected.psnr,
                        if r3.psnr == selected.psnr {
                            "consistent"
                        } else {
                            "MISMATCH"
                        }
                    )?;
                }
                for r in &rows_n {
                    let forwards = r.steps * pairs.len();
                    writeln!(
                        out,
                        "[{}] N={:>2}  psnr {:.3}  ssim {:.4}  {:.3} s total, {:.3} ms per image, {:.3} ms per forward",
                        spec.name,
                        r.steps,
                        r.psnr,
                        r.ssim,
                        r.seconds,
                        r.seconds * 1e3 / pairs.len() as f64,
                        r.seconds * 1e3 / forwards as f64
                    )?;
                }
                sweep.extend(rows_n);
            }
        }
    }
    fs::write(root.join("comparison.csv"), comparison_csv(&rows))?;
    writeln!(out, "{}", comparison_csv(&rows).trim_end())?;
    Ok(AblationReport {
        dir: root,
        rows,
        sweep,
    })
}
