use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, init_backbone, BackboneConfig, BackboneParams};
use crate::error::Result;
use crate::tensor::{ImageTensor, Shape};

/// Worst relative disagreement between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub params_checked: usize,
    pub max_rel_param: f64,
    pub max_rel_input: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare reverse-mode gradients of `<g, forward(x)>` against central
/// differences with step `h`, for every parameter and every `input_stride`-th
/// input element. Runs in double precision on a random `size x size` input,
/// with the initialization perturbed so that biases and the (zero-initialized)
/// head are nonzero and every path carries gradient.
pub fn gradient_check(
    cfg: &BackboneConfig,
    seed: u64,
    size: usize,
    t: Option<f64>,
    h: f64,
    input_stride: usize,
) -> Result<GradCheck> {
    let mut params = init_backbone::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in params.values_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    let x = ImageTensor::from_fn(Shape::new(cfg.in_channels, size, size), |_, _, _| {
        rng.random_range(-1.0..1.0)
    });
    let go = ImageTensor::from_fn(cfg.output_shape(x.shape()), |_, _, _| {
        rng.random_range(-1.0..1.0)
    });
    let objective = |p: &BackboneParams<f64>, x: &ImageTensor<f64>| -> Result<f64> {
        let out = forward(p, cfg, x, t)?;
        Ok(out.data().iter().zip(go.data()).map(|(a, b)| a * b).sum())
    };
    let analytic = backward(&params, cfg, &x, t, &go)?;

    let mut max_rel_param = 0.0f64;
    let mut probe = params.clone();
    for i in 0..params.count() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = objective(&probe, &x)?;
        probe.values_mut()[i] = orig - h;
        let down = objective(&probe, &x)?;
        probe.values_mut()[i] = orig;
        max_rel_param = max_rel_param.max(rel_err(analytic.params[i], (up - down) / (2.0 * h)));
    }

    let gi = analytic.input.expect("input gradient requested");
    let mut max_rel_input = 0.0f64;
    let mut xp = x.clone();
    for i in (0..x.len()).step_by(input_stride.max(1)) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = objective(&params, &xp)?;
        xp.data_mut()[i] = orig - h;
        let down = objective(&params, &xp)?;
        xp.data_mut()[i] = orig;
        max_rel_input = max_rel_input.max(rel_err(gi.data()[i], (up - down) / (2.0 * h)));
    }
    Ok(GradCheck {
        params_checked: params.count(),
        max_rel_param,
        max_rel_input,
    })
}
