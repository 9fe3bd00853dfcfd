//! Small convolutional encoder-decoder regressor with exact reverse-mode
//! gradients.
//!
//! Architecture for `depth = D`, width `w`:
//!
//! ```text
//! e0 = relu(conv(input -> w))                        full resolution
//! e_l = relu(conv(avgpool(e_{l-1}) -> w)), l = 1..D  (+ time embedding at l = D)
//! d_l = relu(conv([up(d_{l+1}); e_l] -> w)), l = D-1..1, with d_D = e_D
//! out = shuffle(conv([up(d_1); e0; input] -> out * r^2))    linear head
//! ```
//!
//! The raw input reaches the linear head directly, so maps close to a copy of
//! the input are easy to fit. Only `enc0` and the head depend on
//! `in_channels`: widening the input for the concatenated `[x; y_t]` layout
//! adds exactly `extra_channels * 9 * (w + out * r^2)` parameters.

mod adam;
mod checkpoint;
mod embed;
mod gradcheck;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use adam::{AdamState, BETA1, BETA2, EPSILON as ADAM_EPSILON};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
};
pub use embed::time_embedding;
pub use gradcheck::{gradient_check, GradCheck};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Real, Shape};
use layers::{Conv, Saved, TAPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Network predicts the clean target.
    X0Pred,
    /// Network predicts the transport velocity `eps - y`.
    VPred,
}

impl Parameterization {
    pub fn name(self) -> &'static str {
        match self {
            Parameterization::X0Pred => "x0_pred",
            Parameterization::VPred => "v_pred",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub parameterization: Parameterization,
    pub time_embedding: bool,
    pub time_embed_dim: usize,
    /// `> 1` turns on the pixel-shuffle head for LR-domain super-resolution.
    pub upsample_factor: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            out_channels: 3,
            base_width: 16,
            depth: 2,
            parameterization: Parameterization::X0Pred,
            time_embedding: false,
            time_embed_dim: 16,
            upsample_factor: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::config(
                "backbone channel counts and width must be positive",
            ));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(Error::config(format!(
                "backbone depth must be in 1..=6, got {}",
                self.depth
            )));
        }
        if self.upsample_factor == 0 {
            return Err(Error::config("upsample_factor must be >= 1"));
        }
        if self.time_embedding
            && (self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2))
        {
            return Err(Error::config("time_embed_dim must be even and positive"));
        }
        Ok(())
    }

    /// Spatial dimensions must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(
            self.out_channels,
            input.height * self.upsample_factor,
            input.width * self.upsample_factor,
        )
    }
}

/// One named parameter array inside the flat storage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable weights, stored flat in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    entries: Vec<ParamEntry>,
    values: Vec<T>,
}

impl<T: Real> BackboneParams<T> {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        let e = self.entries.iter().find(|e| e.name == name)?;
        Some(&self.values[e.offset..e.offset + e.len()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let e = self.entries.iter().find(|e| e.name == name)?;
        let range = e.offset..e.offset + e.len();
        Some(&mut self.values[range])
    }

    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        BackboneParams {
            entries: self.entries.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Rebuild from raw values, checking them against the layout implied by `cfg`.
    pub fn from_values(cfg: &BackboneConfig, values: Vec<T>) -> Result<Self> {
        let layout = Layout::new(cfg)?;
        if values.len() != layout.total {
            return Err(Error::Incompatible(format!(
                "expected {} parameters for this config, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            entries: layout.entries,
            values,
        })
    }
}

/// Parameter placement derived from a config.
pub(crate) struct Layout {
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    head: Conv,
    temb: Option<(usize, usize)>,
    entries: Vec<ParamEntry>,
    /// `(offset, len, fan_in, gain)` per entry, for initialization.
    init: Vec<(usize, usize, usize, f64)>,
    total: usize,
}

impl Layout {
    fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let mut entries = Vec::new();
        let mut init = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize, gain: f64| {
            let len: usize = shape.iter().product();
            entries.push(ParamEntry {
                name,
                shape,
                offset: total,
            });
            init.push((total, len, fan_in, gain));
            total += len;
            total - len
        };
        let relu_gain = 2.0;
        let mut conv = |name: &str, cin: usize, cout: usize, gain: f64| {
            let w_off = push(
                format!("{name}.weight"),
                vec![cout, cin, 3, 3],
                cin * TAPS,
                gain,
            );
            let b_off = push(format!("{name}.bias"), vec![cout], 0, 0.0);
            Conv {
                cin,
                cout,
                w_off,
                b_off,
            }
        };
        let mut enc = vec![conv("enc0", cfg.in_channels, w, relu_gain)];
        for l in 1..=cfg.depth {
            enc.push(conv(&format!("enc{l}"), w, w, relu_gain));
        }
        let mut dec = Vec::new();
        for l in 1..cfg.depth {
            dec.push(conv(&format!("dec{l}"), 2 * w, w, relu_gain));
        }
        let r = cfg.upsample_factor;
        let head = conv(
            "head",
            2 * w + cfg.in_channels,
            cfg.out_channels * r * r,
            0.0,
        );
        let temb = if cfg.time_embedding {
            let d = cfg.time_embed_dim;
            let w_off = push("temb.weight".into(), vec![w, d], d, 1.0);
            let b_off = push("temb.bias".into(), vec![w], 0, 0.0);
            Some((w_off, b_off))
        } else {
            None
        };
        Ok(Self {
            enc,
            dec,
            head,
            temb,
            entries,
            init,
            total,
        })
    }
}

/// Fan-in scaled normal initialization; biases start at zero.
pub fn init_backbone<T: Real>(cfg: &BackboneConfig, seed: u64) -> Result<BackboneParams<T>> {
    let layout = Layout::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![T::zero(); layout.total];
    for &(offset, len, fan_in, gain) in &layout.init {
        if gain == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
        for v in &mut values[offset..offset + len] {
            *v = T::from_f64_lossy(normal.sample(&mut rng));
        }
    }
    Ok(BackboneParams {
        entries: layout.entries,
        values,
    })
}

/// Parameter count implied by a config, without allocating parameters.
pub fn parameter_count(cfg: &BackboneConfig) -> Result<usize> {
    Ok(Layout::new(cfg)?.total)
}

/// Activations kept from the forward pass for the backward pass.
pub(crate) struct Tape<T> {
    input_shape: Shape,
    /// Unfolded inputs of `enc[0..=D]`.
    enc_cols: Vec<Saved<T>>,
    /// Post-ReLU encoder outputs.
    enc_out: Vec<Vec<T>>,
    /// Unfolded inputs of `dec[l-1]` indexed by `l - 1`.
    dec_cols: Vec<Saved<T>>,
    dec_out: Vec<Vec<T>>,
    head_col: Saved<T>,
    embedding: Option<Vec<T>>,
}

/// Gradients of a scalar objective through one forward evaluation.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Same flat layout as [`BackboneParams::values`].
    pub params: Vec<T>,
    pub input: Option<ImageTensor<T>>,
}

fn check_input<T: Real>(
    cfg: &BackboneConfig,
    input: &ImageTensor<T>,
    t: Option<f64>,
) -> Result<()> {
    if input.channels() != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            expected: Shape::new(cfg.in_channels, input.height(), input.width()),
            actual: input.shape(),
        });
    }
    let m = cfg.spatial_multiple();
    if !input.height().is_multiple_of(m) || !input.width().is_multiple_of(m) {
        return Err(Error::InvalidShape(format!(
            "input {} must have height and width divisible by {m}",
            input.shape()
        )));
    }
    match (cfg.time_embedding, t) {
        (true, None) => Err(Error::config("time embedding enabled but no t supplied")),
        (false, Some(_)) => Err(Error::config(
            "t supplied to a backbone without time embedding",
        )),
        _ => Ok(()),
    }
}

fn concat2<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub(crate) fn forward_tape<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    input: &ImageTensor<T>,
    t: Option<f64>,
) -> Result<(ImageTensor<T>, Tape<T>)> {
    check_input(cfg, input, t)?;
    let layout = Layout::new(cfg)?;
    if params.count() != layout.total {
        return Err(Error::Incompatible(format!(
            "parameter vector has {} entries, config needs {}",
            params.count(),
            layout.total
        )));
    }
    let p = params.values();
    let w = cfg.base_width;
    let depth = cfg.depth;
    let (h0, w0) = (input.height(), input.width());
    let dims = |l: usize| (h0 >> l, w0 >> l);

    let embedding = match (layout.temb, t) {
        (Some((w_off, b_off)), Some(t)) => {
            let e = time_embedding(t, cfg.time_embed_dim)?;
            let d = cfg.time_embed_dim;
            let proj: Vec<T> = (0..w)
                .map(|c| {
                    let mut acc = p[b_off + c];
                    for (k, &ek) in e.iter().enumerate() {
                        acc += p[w_off + c * d + k] * T::from_f64_lossy(ek);
                    }
                    acc
                })
                .collect();
            Some((
                e.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>(),
                proj,
            ))
        }
        _ => None,
    };

    let mut enc_cols = Vec::with_capacity(depth + 1);
    let mut enc_out: Vec<Vec<T>> = Vec::with_capacity(depth + 1);
    let (mut z, col) = layers::conv_forward(&layout.enc[0], p, input.data(), h0, w0);
    layers::relu_inplace(&mut z);
    enc_cols.push(col);
    enc_out.push(z);
    for l in 1..=depth {
        let (ph, pw) = dims(l - 1);
        let pooled = layers::avgpool2(&enc_out[l - 1], w, ph, pw);
        let (h, wd) = dims(l);
        let (mut z, col) = layers::conv_forward(&layout.enc[l], p, &pooled, h, wd);
        if l == depth {
            if let Some((_, proj)) = &embedding {
                let plane = h * wd;
                for (c, &b) in proj.iter().enumerate() {
                    z[c * plane..(c + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += b);
                }
            }
        }
        layers::relu_inplace(&mut z);
        enc_cols.push(col);
        enc_out.push(z);
    }

    let mut dec_cols: Vec<Saved<T>> = (1..depth).map(|_| Saved::Col(Vec::new())).collect();
    let mut dec_out: Vec<Vec<T>> = (1..depth).map(|_| Vec::new()).collect();
    for l in (1..depth).rev() {
        let below: &[T] = if l + 1 == depth {
            &enc_out[depth]
        } else {
            &dec_out[l]
        };
        let (bh, bw) = dims(l + 1);
        let up = layers::upsample2(below, w, bh, bw);
        let cat = concat2(&up, &enc_out[l]);
        let (h, wd) = dims(l);
        let (mut z, col) = layers::conv_forward(&layout.dec[l - 1], p, &cat, h, wd);
        layers::relu_inplace(&mut z);
        dec_cols[l - 1] = col;
        dec_out[l - 1] = z;
    }

    let top: &[T] = if depth == 1 { &enc_out[1] } else { &dec_out[0] };
    let (th, tw) = dims(1);
    let up = layers::upsample2(top, w, th, tw);
    let mut cat = concat2(&up, &enc_out[0]);
    cat.extend_from_slice(input.data());
    let (o, head_col) = layers::conv_forward(&layout.head, p, &cat, h0, w0);
    let r = cfg.upsample_factor;
    let out = if r > 1 {
        layers::pixel_shuffle(&o, cfg.out_channels, r, h0, w0)
    } else {
        o
    };
    let output = ImageTensor::new(cfg.out_channels, h0 * r, w0 * r, out)?;
    let tape = Tape {
        input_shape: input.shape(),
        enc_cols,
        enc_out,
        dec_cols,
        dec_out,
        head_col,
        embedding: embedding.map(|(e, _)| e),
    };
    Ok((output, tape))
}

pub(crate) fn backward_tape<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    tape: &Tape<T>,
    grad_output: &ImageTensor<T>,
    need_input_grad: bool,
) -> Result<Gradients<T>> {
    let expected = cfg.output_shape(tape.input_shape);
    crate::error::ensure_same_shape(expected, grad_output.shape())?;
    let layout = Layout::new(cfg)?;
    let p = params.values();
    let mut g = vec![T::zero(); layout.total];
    let w = cfg.base_width;
    let depth = cfg.depth;
    let (h0, w0) = (tape.input_shape.height, tape.input_shape.width);
    let dims = |l: usize| (h0 >> l, w0 >> l);
    let r = cfg.upsample_factor;

    let d_head = if r > 1 {
        layers::pixel_unshuffle(grad_output.data(), cfg.out_channels, r, h0, w0)
    } else {
        grad_output.data().to_vec()
    };
    let d_cat = layers::conv_backward(
        &layout.head,
        p,
        &tape.head_col,
        &d_head,
        h0,
        w0,
        &mut g,
        true,
    )
    .expect("requested dx");
    let plane0 = h0 * w0;
    let (d_up, rest) = d_cat.split_at(w * plane0);
    let (d_e0, d_skip_in) = rest.split_at(w * plane0);
    let mut d_enc: Vec<Vec<T>> = (0..=depth)
        .map(|l| {
            let (h, wd) = dims(l);
            vec![T::zero(); w * h * wd]
        })
        .collect();
    d_enc[0].copy_from_slice(d_e0);
    let (th, tw) = dims(1);
    let mut d_below = layers::upsample2_backward(d_up, w, th, tw);

    // decoder, in reverse of the forward order: l = 1, 2, ..., D-1
    for l in 1..depth {
        let (h, wd) = dims(l);
        let plane = h * wd;
        let mut dz = d_below;
        layers::relu_backward_inplace(&mut dz, &tape.dec_out[l - 1]);
        let d_cat = layers::conv_backward(
            &layout.dec[l - 1],
            p,
            &tape.dec_cols[l - 1],
            &dz,
            h,
            wd,
            &mut g,
            true,
        )
        .expect("requested dx");
        let (d_up, d_skip) = d_cat.split_at(w * plane);
        d_enc[l].iter_mut().zip(d_skip).for_each(|(a, &b)| *a += b);
        let (bh, bw) = dims(l + 1);
        d_below = layers::upsample2_backward(d_up, w, bh, bw);
    }
    d_enc[depth]
        .iter_mut()
        .zip(&d_below)
        .for_each(|(a, &b)| *a += b);

    for l in (1..=depth).rev() {
        let (h, wd) = dims(l);
        let plane = h * wd;
        let mut dz = std::mem::take(&mut d_enc[l]);
        layers::relu_backward_inplace(&mut dz, &tape.enc_out[l]);
        if l == depth {
            if let (Some((w_off, b_off)), Some(e)) = (layout.temb, &tape.embedding) {
                let d = cfg.time_embed_dim;
                for c in 0..w {
                    let s: T = dz[c * plane..(c + 1) * plane].iter().copied().sum();
                    g[b_off + c] += s;
                    for (k, &ek) in e.iter().enumerate() {
                        g[w_off + c * d + k] += s * ek;
                    }
                }
            }
        }
        let d_pool = layers::conv_backward(
            &layout.enc[l],
            p,
            &tape.enc_cols[l],
            &dz,
            h,
            wd,
            &mut g,
            true,
        )
        .expect("requested dx");
        let (ph, pw) = dims(l - 1);
        let d_prev = layers::avgpool2_backward(&d_pool, w, ph, pw);
        d_enc[l - 1]
            .iter_mut()
            .zip(&d_prev)
            .for_each(|(a, &b)| *a += b);
    }

    let mut dz = std::mem::take(&mut d_enc[0]);
    layers::relu_backward_inplace(&mut dz, &tape.enc_out[0]);
    let d_input = layers::conv_backward(
        &layout.enc[0],
        p,
        &tape.enc_cols[0],
        &dz,
        h0,
        w0,
        &mut g,
        need_input_grad,
    );
    let input = match d_input {
        Some(mut d) => {
            d.iter_mut().zip(d_skip_in).for_each(|(a, &b)| *a += b);
            Some(ImageTensor::new(tape.input_shape.channels, h0, w0, d)?)
        }
        None => None,
    };
    Ok(Gradients { params: g, input })
}

/// Evaluate the network. `t` must be given exactly when the config enables
/// time embedding.
pub fn forward<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    input: &ImageTensor<T>,
    t: Option<f64>,
) -> Result<ImageTensor<T>> {
    forward_tape(params, cfg, input, t).map(|(out, _)| out)
}

/// Reverse-mode gradients of `<grad_output, forward(input)>` with respect to
/// every parameter and the input.
pub fn backward<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    input: &ImageTensor<T>,
    t: Option<f64>,
    grad_output: &ImageTensor<T>,
) -> Result<Gradients<T>> {
    let (_, tape) = forward_tape(params, cfg, input, t)?;
    backward_tape(params, cfg, &tape, grad_output, true)
}

/// A config paired with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub cfg: BackboneConfig,
    pub params: BackboneParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: BackboneConfig, params: BackboneParams<T>) -> Result<Self> {
        let expected = parameter_count(&cfg)?;
        if params.count() != expected {
            return Err(Error::Incompatible(format!(
                "config needs {expected} parameters, got {}",
                params.count()
            )));
        }
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        let params = init_backbone(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Evaluate at interpolation time `t`; `t` reaches the network only when
    /// time embedding is enabled.
    pub fn predict(&self, input: &ImageTensor<T>, t: f64) -> Result<ImageTensor<T>> {
        forward(&self.params, &self.cfg, input, self.time_arg(t))
    }

    pub(crate) fn time_arg(&self, t: f64) -> Option<f64> {
        self.cfg.time_embedding.then_some(t)
    }
}
