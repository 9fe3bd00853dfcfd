use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rfr_cli::{
    cmd_ablate, cmd_export_valset, cmd_infer, cmd_train, exit_code, selfcheck, AblationKind,
    InferRequest, InferSource,
};
use rfr_core::backbone::Parameterization;
use rfr_core::experiment::ExperimentSpec;
use rfr_core::flowcore::{FlowPath, TStrategy};
use rfr_core::sampler::SamplerOptions;
use rfr_core::synthdata::TaskKind;
use rfr_core::trainer::TrainManifest;

#[derive(Parser, Debug)]
#[command(
    name = "rfr",
    version,
    about = "Image-to-image rectified flow: train, sample, ablate"
)]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Beta,
    Uniform,
    LogitNormal,
}

impl From<Strategy> for TStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Beta => TStrategy::Beta,
            Strategy::Uniform => TStrategy::Uniform,
            Strategy::LogitNormal => TStrategy::LogitNormal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    Steps,
    Sampling,
    Parameterization,
    TimeEmbedding,
    Bridge,
    Cfg,
}

impl From<Ablation> for AblationKind {
    fn from(a: Ablation) -> Self {
        match a {
            Ablation::Steps => AblationKind::Steps,
            Ablation::Sampling => AblationKind::Sampling,
            Ablation::Parameterization => AblationKind::Parameterization,
            Ablation::TimeEmbedding => AblationKind::TimeEmbedding,
            Ablation::Bridge => AblationKind::Bridge,
            Ablation::Cfg => AblationKind::Cfg,
        }
    }
}

#[derive(clap::Args, Debug, Default)]
struct TrainArgs {
    /// Experiment TOML; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    t_strategy: Option<Strategy>,
    /// Backbone base width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    v_pred: bool,
    #[arg(long)]
    bridge: bool,
    #[arg(long)]
    no_time_embedding: bool,
    #[arg(long)]
    cfg_dropout: Option<f64>,
    #[arg(long)]
    composite_loss: bool,
    #[arg(long)]
    validation_every: Option<usize>,
    /// Run directory; defaults to $RFR_OUTPUT_ROOT/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::new("run", TrainManifest::default()),
        };
        let m = &mut spec.manifest;
        if let Some(task) = &self.task {
            m.task = TaskKind::parse(task)?;
        }
        if self.config.is_none() && self.name.is_none() {
            spec.name = m.task.name().to_string();
        }
        if let Some(name) = &self.name {
            spec.name = name.clone();
        }
        if let Some(v) = self.iterations {
            m.iterations = v;
        }
        if let Some(v) = self.batch_size {
            m.batch_size = v;
        }
        if let Some(v) = self.seed {
            m.seed = v;
        }
        if let Some(v) = self.lr {
            m.lr_init = v;
        }
        if let Some(v) = self.t_strategy {
            m.variant.t_strategy = v.into();
        }
        if let Some(v) = self.width {
            m.backbone.base_width = v;
        }
        if self.v_pred {
            m.variant.parameterization = Parameterization::VPred;
        }
        if self.bridge {
            m.variant.path = FlowPath::Bridge;
        }
        if self.no_time_embedding {
            m.variant.time_embedding = false;
        }
        if let Some(v) = self.cfg_dropout {
            m.variant.cfg_dropout_prob = v;
        }
        if self.composite_loss {
            m.variant.composite_loss = true;
        }
        if let Some(v) = self.validation_every {
            m.validation_every = v;
        }
        if let Some(out) = &self.out {
            spec.output_dir = Some(out.clone());
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model.
    Train(TrainArgs),
    /// Sample from a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Condition PNGs. Without them, generated held-out pairs are used.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Known-pixel mask PNG for file inputs (white = known).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        #[arg(long, default_value_t = 2024)]
        valset_seed: u64,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Guidance scale; `--guidance` alone means 4.
        #[arg(long, num_args = 0..=1, default_missing_value = "4")]
        guidance: Option<f64>,
        #[arg(long)]
        no_clip: bool,
        #[arg(long)]
        fresh_mask_noise: bool,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Train paired variants and compare them.
    Ablate {
        #[arg(value_enum)]
        kind: Ablation,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 4.0)]
        guidance: f64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fast numerical checks of the core invariants.
    Selfcheck,
    /// Write a fixed validation set as PNGs.
    ExportValset {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if cli.single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()?;
    }
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Train(args) => {
            cmd_train(&args.spec()?, cli.single_thread, &mut out)?;
        }
        Command::Infer {
            checkpoint,
            input,
            mask,
            count,
            crop,
            valset_seed,
            steps,
            seed,
            guidance,
            no_clip,
            fresh_mask_noise,
            out: out_dir,
        } => {
            let source = if input.is_empty() {
                InferSource::Synthetic {
                    count,
                    crop,
                    seed: valset_seed,
                }
            } else {
                InferSource::Files(input)
            };
            let req = InferRequest {
                checkpoint,
                source,
                options: SamplerOptions {
                    steps,
                    seed,
                    clip_output: !no_clip,
                    cfg_scale: guidance,
                    fresh_mask_noise,
                    ..Default::default()
                },
                mask,
                out_dir,
                variant: "cli".into(),
            };
            cmd_infer(&req, &mut out)?;
        }
        Command::Ablate {
            kind,
            seeds,
            guidance,
            train,
        } => {
            cmd_ablate(
                kind.into(),
                &train.spec()?,
                &seeds,
                guidance,
                cli.single_thread,
                &mut out,
            )?;
        }
        Command::Selfcheck => {
            if !selfcheck::run(&mut out)? {
                bail!(rfr_core::Error::Numerical("selfcheck failed".into()));
            }
        }
        Command::ExportValset {
            task,
            count,
            crop,
            seed,
            out: dir,
        } => {
            cmd_export_valset(TaskKind::parse(&task)?, count, crop, seed, &dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
