//! Executable invariants of the flow math, backbone, sampler and metrics.
//! Everything that can run in double precision does.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfr_core::backbone::{
    gradient_check, init_backbone, parameter_count, BackboneConfig, Checkpoint, CheckpointMeta,
    Model, Parameterization,
};
use rfr_core::flowcore::{
    induced_velocity, make_state, rfr_loss, sample_t, time_grid, TSamplerConfig, TStrategy,
    DEFAULT_T_MIN,
};
use rfr_core::metrics::{psnr, ssim, PSNR_CAP};
use rfr_core::sampler::{infer_with_step, FnNetwork, Network, SamplerOptions, StepFn};
use rfr_core::stats::ks_statistic;
use rfr_core::synthdata::{gen_image, validation_set, DegradeSpec, TaskKind};
use rfr_core::{ImageTensor, Result, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<34} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> ImageTensor<f64> {
    ImageTensor::from_fn(shape, |_, _, _| rng.random_range(0.0..1.0))
}

/// Relative gap between the reweighted x0 loss and the induced-velocity residual.
pub fn loss_equivalence(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(3, 4, 4);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let y = uniform(shape, &mut rng);
        let f = uniform(shape, &mut rng);
        let eps = ImageTensor::<f64>::randn(shape, &mut rng);
        let t = rng.random_range(DEFAULT_T_MIN..=1.0);
        let x0 = rfr_loss(&y, &f, t, 1)?;
        let y_t = make_state(&y, &eps, t)?;
        let v = induced_velocity(&y_t, &f, t, DEFAULT_T_MIN)?;
        let target = eps.zip_map(&y, |e, a| e - a)?;
        let vel = target
            .zip_map(&v, |a, b| (a - b).abs())?
            .data()
            .iter()
            .sum::<f64>()
            / shape.len() as f64;
        worst = worst.max((x0 - vel).abs() / x0.abs().max(vel.abs()).max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// Worst error of Euler inference with a perfect predictor `f = y`.
pub fn oracle_transport(step: &StepFn<f64>, steps: &[usize], seeds: u64) -> Result<f64> {
    let shape = Shape::new(3, 8, 8);
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919));
        let y = uniform(shape, &mut rng);
        let x = uniform(shape, &mut rng);
        let yc = y.clone();
        let net = FnNetwork {
            out_channels: 3,
            upsample_factor: 1,
            f: move |_: &ImageTensor<f64>, _| Ok(yc.clone()),
        };
        for &n in steps {
            let opts = SamplerOptions {
                steps: n,
                seed,
                clip_output: false,
                ..Default::default()
            };
            let out = infer_with_step(&net, &x, &opts, step)?;
            worst = worst.max(out.max_abs_diff(&y)?);
        }
    }
    Ok(worst)
}

fn small_model(seed: u64) -> Result<Model<f64>> {
    with_random_head(
        Model::init(
            BackboneConfig {
                base_width: 4,
                ..Default::default()
            },
            seed,
        )?,
        seed,
    )
}

/// Freshly initialized heads are zero, which would make every output
/// constant; the sampler checks need a network that actually responds.
fn with_random_head(mut model: Model<f64>, seed: u64) -> Result<Model<f64>> {
    let head = model
        .params
        .get_mut("head.weight")
        .expect("every backbone has a head");
    let fan_in = head.len() / model.cfg.out_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
    let noise = ImageTensor::<f64>::randn(Shape::new(1, 1, head.len()), &mut rng);
    for (w, n) in head.iter_mut().zip(noise.data()) {
        *w = n / (fan_in as f64).sqrt();
    }
    Ok(model)
}

/// `infer(N = 1)` against `clip(f([x; eps]))`, bitwise.
pub fn single_step_collapse(step: &StepFn<f64>, trials: u64) -> Result<bool> {
    let model = small_model(3)?;
    let shape = Shape::new(3, 8, 8);
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = uniform(shape, &mut rng);
        let opts = SamplerOptions {
            steps: 1,
            seed,
            ..Default::default()
        };
        let out = infer_with_step(&model, &x, &opts, step)?;
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        let eps = ImageTensor::<f64>::randn(shape, &mut noise);
        let direct = model
            .evaluate(&ImageTensor::concat_channels(&[&x, &eps])?, 1.0)?
            .clip(0.0, 1.0);
        let same = out
            .data()
            .iter()
            .zip(direct.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest relative deviation from `y_next - y = (dt / t)(f - y)` over a trajectory.
pub fn update_direction(step: &StepFn<f64>) -> Result<f64> {
    let model = small_model(5)?;
    let shape = Shape::new(3, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = uniform(shape, &mut rng);
    let steps = 7;
    let dt = 1.0 / steps as f64;
    let mut state = ImageTensor::<f64>::randn(shape, &mut rng);
    let mut worst = 0.0f64;
    for t in time_grid(steps) {
        let f = model.evaluate(&ImageTensor::concat_channels(&[&x, &state])?, t)?;
        let next = step(&state, &f, t, dt)?;
        for ((&a, &b), &p) in state.data().iter().zip(next.data()).zip(f.data()) {
            let want = dt / t * (p - a);
            let got = b - a;
            worst = worst.max((got - want).abs() / want.abs().max(1e-12));
        }
        state = next;
    }
    Ok(worst)
}

pub struct BetaReport {
    pub ks: f64,
    pub mean_inv_t: f64,
    pub uniform_mean_inv_t: f64,
}

/// Inverse-CDF sampler statistics over `draws` uniform draws.
pub fn beta_sampler(draws: usize, seed: u64) -> Result<BetaReport> {
    let beta = TSamplerConfig::default();
    let uni = TSamplerConfig::with_strategy(TStrategy::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = Vec::with_capacity(draws);
    let mut uni_inv = 0.0;
    for _ in 0..draws {
        let u: f64 = rng.random();
        ts.push(sample_t(&beta, u)?);
        uni_inv += 1.0 / sample_t(&uni, u)?;
    }
    Ok(BetaReport {
        ks: ks_statistic(&ts, |t| t * t),
        mean_inv_t: ts.iter().map(|t| 1.0 / t).sum::<f64>() / draws as f64,
        uniform_mean_inv_t: uni_inv / draws as f64,
    })
}

fn masked_known_pixels() -> Result<bool> {
    let pairs = validation_set(TaskKind::Inpaint, &DegradeSpec::default(), 4, 16, 1)?;
    let model = with_random_head(
        Model::<f64>::init(
            BackboneConfig {
                in_channels: 7,
                base_width: 4,
                ..Default::default()
            },
            2,
        )?,
        2,
    )?;
    for (i, p) in pairs.iter().enumerate() {
        let mask = p.mask().expect("inpainting pairs carry a mask");
        let x = p.condition.cast::<f64>();
        let opts = SamplerOptions {
            seed: i as u64,
            mask: Some(mask.clone()),
            ..Default::default()
        };
        let out = rfr_core::sampler::infer(&model, &x, &opts)?;
        for (k, &m) in mask.data().iter().enumerate() {
            if m == 1.0 && out.data()[k].to_bits() != x.data()[k].to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Run every check with `step` as the x0 state update.
pub fn run_checks(step: &StepFn<f64>) -> Vec<CheckResult> {
    let mut out = Vec::new();

    out.push(check(
        "flowcore/loss_equivalence",
        loss_equivalence(1000, 1).map(|w| {
            (
                w < 1e-9,
                format!("max relative difference {w:.3e} over 1000 draws"),
            )
        }),
    ));
    out.push(check(
        "flowcore/time_reversal",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let shape = Shape::new(3, 4, 4);
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let a = uniform(shape, &mut rng);
                let b = uniform(shape, &mut rng);
                let t: f64 = rng.random();
                worst = worst.max(make_state(&a, &b, t)?.max_abs_diff(&make_state(
                    &b,
                    &a,
                    1.0 - t,
                )?)?);
            }
            Ok((worst < 1e-12, format!("max deviation {worst:.3e}")))
        })(),
    ));
    out.push(check(
        "sampler/oracle_transport",
        oracle_transport(step, &[1, 3, 10], 100).map(|w| {
            (
                w < 1e-12,
                format!("max error {w:.3e} for N in {{1,3,10}} x 100 seeds"),
            )
        }),
    ));
    out.push(check(
        "sampler/single_step_collapse",
        single_step_collapse(step, 10)
            .map(|ok| (ok, "infer(N=1) == clip(f([x; eps])) bitwise".to_string())),
    ));
    out.push(check(
        "sampler/update_direction",
        update_direction(step).map(|w| (w < 1e-6, format!("max relative deviation {w:.3e}"))),
    ));
    out.push(check("sampler/time_grid_positive", {
        let ok = (1..=1000).all(|n| {
            let g = time_grid(n);
            g.len() == n && g.iter().copied().fold(f64::INFINITY, f64::min) >= DEFAULT_T_MIN
        });
        Ok((ok, "min t = 1/N >= t_min for N <= 1000".to_string()))
    }));
    out.push(check(
        "flowcore/beta_sampler",
        beta_sampler(100_000, 3).map(|r| {
            let ok = r.ks < 0.01 && (1.98..=2.03).contains(&r.mean_inv_t);
            (
                ok,
                format!("KS statistic {:.5}, mean 1/t {:.4}", r.ks, r.mean_inv_t),
            )
        }),
    ));
    out.push(check(
        "flowcore/uniform_weighting",
        beta_sampler(100_000, 4).map(|r| {
            (
                r.uniform_mean_inv_t > 6.0,
                format!("uniform mean clamped 1/t {:.3}", r.uniform_mean_inv_t),
            )
        }),
    ));
    out.push(check(
        "backbone/finite_differences",
        (|| {
            let cfg = BackboneConfig {
                base_width: 8,
                time_embedding: true,
                time_embed_dim: 8,
                ..Default::default()
            };
            let r = gradient_check(&cfg, 7, 8, Some(0.42), 1e-5, 5)?;
            let ok = r.params_checked <= 5000 && r.max_rel_param < 1e-4 && r.max_rel_input < 1e-4;
            Ok((
                ok,
                format!(
                    "{} params, max relative error {:.2e} (params) {:.2e} (input)",
                    r.params_checked, r.max_rel_param, r.max_rel_input
                ),
            ))
        })(),
    ));
    out.push(check(
        "backbone/input_expansion",
        (|| {
            let plain = BackboneConfig {
                in_channels: 3,
                ..Default::default()
            };
            let wide = BackboneConfig::default();
            let delta = parameter_count(&wide)? - parameter_count(&plain)?;
            let want = 3 * 9 * (wide.base_width + wide.out_channels * wide.upsample_factor.pow(2));
            Ok((
                delta == want,
                format!("concatenation adds {delta} parameters (expected {want})"),
            ))
        })(),
    ));
    out.push(check(
        "backbone/parameterization_parity",
        (|| {
            let x0 = BackboneConfig::default();
            let v = BackboneConfig {
                parameterization: Parameterization::VPred,
                ..Default::default()
            };
            let same =
                init_backbone::<f64>(&x0, 9)?.values() == init_backbone::<f64>(&v, 9)?.values();
            Ok((
                same,
                "x0 and v prediction share architecture and initialization".to_string(),
            ))
        })(),
    ));
    out.push(check(
        "backbone/forward_determinism",
        (|| {
            let model = small_model(1)?;
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = uniform(Shape::new(6, 16, 16), &mut rng);
            let same = model.predict(&x, 0.5)? == model.predict(&x, 0.5)?;
            Ok((same, "repeated forward passes agree".to_string()))
        })(),
    ));
    out.push(check(
        "backbone/checkpoint_roundtrip",
        (|| {
            let cfg = BackboneConfig::default();
            let ck = Checkpoint {
                params: init_backbone::<f32>(&cfg, 4)?,
                config: cfg,
                iteration: 7,
                meta: CheckpointMeta::default(),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()?)?;
            let exact = back
                .params
                .values()
                .iter()
                .zip(ck.params.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            Ok((exact && back == ck, "bit-exact".to_string()))
        })(),
    ));
    out.push(check(
        "sampler/masked_known_pixels",
        masked_known_pixels().map(|ok| (ok, "known pixels equal the input bitwise".to_string())),
    ));
    out.push(check(
        "sampler/seed_isolation",
        (|| {
            let model = small_model(2)?;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = uniform(Shape::new(3, 8, 8), &mut rng);
            let run = |seed| {
                infer_with_step(
                    &model,
                    &x,
                    &SamplerOptions {
                        seed,
                        ..Default::default()
                    },
                    step,
                )
            };
            let ok = run(1)? == run(1)? && run(1)? != run(2)?;
            Ok((
                ok,
                "same seed reproduces, different seed differs".to_string(),
            ))
        })(),
    ));
    out.push(check(
        "metrics/psnr",
        (|| {
            let a = gen_image(1, 32)?;
            let mut last = f64::INFINITY;
            let mut monotone = true;
            for sigma in [0.01, 0.05, 0.1] {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let noise = ImageTensor::<f32>::randn(a.shape(), &mut rng);
                let b = a.zip_map(&noise, |v, n| v + sigma as f32 * n)?;
                let p = psnr(&a, &b, PSNR_CAP)?;
                let sse: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                    .sum();
                let closed = 10.0 * (a.len() as f64 / sse).log10();
                monotone &= p < last && (p - closed).abs() < 1e-9;
                last = p;
            }
            let capped = psnr(&a, &a, PSNR_CAP)? == PSNR_CAP;
            Ok((
                monotone && capped,
                "monotone in noise, matches closed form, capped at 99 dB".to_string(),
            ))
        })(),
    ));
    out.push(check(
        "metrics/ssim",
        (|| {
            let a = gen_image(2, 32)?;
            let b = gen_image(3, 32)?;
            let ident = (ssim(&a, &a)? - 1.0).abs() < 1e-12;
            let s = ssim(&a, &b)?;
            let inv = ssim(&a, &a.map(|v| 1.0 - v))?;
            Ok((
                ident && (-1.0..=1.0).contains(&s) && inv < 0.0,
                format!("ssim(a,a)=1, ssim(a,b)={s:.4}, ssim(a,1-a)={inv:.4}"),
            ))
        })(),
    ));
    out
}

/// Run all checks with the real Euler step, print one line per check and
/// return whether everything passed.
pub fn run(out: &mut dyn std::io::Write) -> std::io::Result<bool> {
    let start = Instant::now();
    let results = run_checks(&rfr_core::flowcore::euler_step::<f64>);
    for r in &results {
        writeln!(out, "{}", r.line())?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(
        out,
        "{} checks, {} failed, {:.2} s",
        results.len(),
        failed,
        start.elapsed().as_secs_f64()
    )?;
    Ok(failed == 0)
}
