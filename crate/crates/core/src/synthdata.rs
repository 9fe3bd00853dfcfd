//! Procedural paired data: random structured images and toy degradations
//! standing in for the restoration benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Identity,
    Deblur,
    Lowlight,
    Colorcast,
    Sr2x,
    Inpaint,
    Colorize,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Identity,
        TaskKind::Deblur,
        TaskKind::Lowlight,
        TaskKind::Colorcast,
        TaskKind::Sr2x,
        TaskKind::Inpaint,
        TaskKind::Colorize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Identity => "identity",
            TaskKind::Deblur => "deblur",
            TaskKind::Lowlight => "lowlight",
            TaskKind::Colorcast => "colorcast",
            TaskKind::Sr2x => "sr2x",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Colorize => "colorize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task '{s}'")))
    }

    pub const fn target_channels(self) -> usize {
        3
    }

    pub const fn condition_channels(self) -> usize {
        match self {
            TaskKind::Inpaint => 4,
            TaskKind::Colorize => 1,
            _ => 3,
        }
    }

    /// Spatial ratio between target and condition.
    pub const fn scale(self) -> usize {
        match self {
            TaskKind::Sr2x => 2,
            _ => 1,
        }
    }

    pub fn condition_shape(self, target: Shape) -> Shape {
        Shape::new(
            self.condition_channels(),
            target.height / self.scale(),
            target.width / self.scale(),
        )
    }

    /// Condition and target share a shape, so the bridge path is defined.
    pub const fn same_shape(self) -> bool {
        matches!(
            self,
            TaskKind::Identity | TaskKind::Deblur | TaskKind::Lowlight | TaskKind::Colorcast
        )
    }

    /// Loss and known-pixel replacement are restricted by a mask.
    pub const fn has_mask(self) -> bool {
        matches!(self, TaskKind::Inpaint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeSpec {
    pub blur_sigma: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    /// Row `i` gives output channel `i` as a combination of input RGB.
    pub cast_matrix: [[f64; 3]; 3],
    pub hole_fraction: f64,
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            blur_sigma: 1.5,
            gamma: 2.5,
            noise_sigma: 0.02,
            cast_matrix: [[0.5, 0.0, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 1.0]],
            hole_fraction: 0.25,
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0) {
            return Err(Error::config(format!(
                "blur_sigma must be > 0, got {}",
                self.blur_sigma
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.hole_fraction > 0.0 && self.hole_fraction < 1.0) {
            return Err(Error::config(format!(
                "hole_fraction must lie in (0, 1), got {}",
                self.hole_fraction
            )));
        }
        if self.cast_matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("cast_matrix must be finite"));
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

/// Clean/degraded pair. `condition` feeds the network, `target` is the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub condition: ImageTensor<f32>,
    pub target: ImageTensor<f32>,
    pub seed: u64,
}

impl Pair {
    /// Known-region mask (1 = known) expanded to the target's channels, for masked tasks.
    pub fn mask(&self) -> Option<ImageTensor<f32>> {
        if self.condition.channels() != 4 {
            return None;
        }
        let m = self.condition.select_channels(3, 4).ok()?;
        m.repeat_channels(self.target.channels()).ok()
    }
}

const IMAGE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const VALIDATION_SALT: u64 = 0xd1b5_4a32_d192_ed03;

/// SplitMix64 finalizer: decorrelates `(base, index)` into a fresh seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(IMAGE_SALT.wrapping_mul(index.wrapping_add(1)))
        .wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Random RGB test card: a smooth background gradient, 3-8 anti-aliased
/// ellipses and rectangles, and low-frequency sinusoidal texture.
pub fn gen_image(seed: u64, size: usize) -> Result<ImageTensor<f32>> {
    if size < 16 {
        return Err(Error::InvalidShape(format!(
            "generated images need size >= 16, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ IMAGE_SALT);
    let s = size as f64;
    let mut img = vec![[0.0f64; 3]; size * size];

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy)
                / std::f64::consts::SQRT_2
                + 0.5;
            let px = &mut img[y * size + x];
            for c in 0..3 {
                px[c] = c0[c] + (c1[c] - c0[c]) * u;
            }
        }
    }

    let shapes = rng.random_range(3..=8);
    for _ in 0..shapes {
        let ellipse = rng.random_bool(0.5);
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let ry = rng.random_range(0.08 * s..0.35 * s);
        let rx = rng.random_range(0.08 * s..0.35 * s);
        let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let opacity = rng.random_range(0.6..1.0);
        let (sr, cr) = rot.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (u, v) = (px * cr + py * sr, -px * sr + py * cr);
                // approximate signed distance in pixels, negative inside
                let dist = if ellipse {
                    ((u / rx).powi(2) + (v / ry).powi(2))
                        .sqrt()
                        .mul_add(1.0, -1.0)
                        * rx.min(ry)
                } else {
                    (u.abs() - rx).max(v.abs() - ry)
                };
                let alpha = opacity * (1.0 - smoothstep(-0.75, 0.75, dist));
                if alpha > 0.0 {
                    let p = &mut img[y * size + x];
                    for c in 0..3 {
                        p[c] += alpha * (color[c] - p[c]);
                    }
                }
            }
        }
    }

    let waves = rng.random_range(1..=3);
    for _ in 0..waves {
        let amp = rng.random_range(0.02..0.08);
        let cycles = rng.random_range(2.0..8.0);
        let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let (sy, sx) = dir.sin_cos();
        let k = std::f64::consts::TAU * cycles / s;
        for y in 0..size {
            for x in 0..size {
                let w = amp * (k * (x as f64 * sx + y as f64 * sy) + phase).sin();
                let p = &mut img[y * size + x];
                for c in 0..3 {
                    p[c] += w * tint[c];
                }
            }
        }
    }

    let shape = Shape::new(3, size, size);
    Ok(ImageTensor::from_fn(shape, |c, y, x| {
        img[y * size + x][c].clamp(0.0, 1.0) as f32
    }))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageTensor<f32>, sigma: f64) -> ImageTensor<f32> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let horizontal = ImageTensor::from_fn(img.shape(), |c, y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wk)| wk * img.get(c, y, reflect(x as isize + k as isize - r, w)) as f64)
            .sum::<f64>() as f32
    });
    ImageTensor::from_fn(img.shape(), |c, y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wk)| {
                wk * horizontal.get(c, reflect(y as isize + k as isize - r, h), x) as f64
            })
            .sum::<f64>() as f32
    })
}

/// BT.601 luma of an RGB tensor.
pub fn luminance(img: &ImageTensor<f32>) -> Result<ImageTensor<f32>> {
    if img.channels() != 3 {
        return Err(Error::InvalidShape(format!(
            "luminance needs RGB, got {}",
            img.shape()
        )));
    }
    let shape = Shape::new(1, img.height(), img.width());
    Ok(ImageTensor::from_fn(shape, |_, y, x| {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    }))
}

fn add_noise(img: &mut ImageTensor<f32>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in img.data_mut() {
        *v += normal.sample(rng) as f32;
    }
}

/// Produce the network condition for `target` under `task`.
///
/// Noise is added after the deterministic part of the degradation and the
/// result is clipped to `[0, 1]`. All randomness comes from `spec.seed`.
pub fn degrade(
    target: &ImageTensor<f32>,
    task: TaskKind,
    spec: &DegradeSpec,
) -> Result<ImageTensor<f32>> {
    spec.validate()?;
    if target.channels() != 3 {
        return Err(Error::InvalidShape(format!(
            "targets are RGB, got {}",
            target.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = match task {
        TaskKind::Identity => target.clone(),
        TaskKind::Deblur => {
            let mut b = gaussian_blur(target, spec.blur_sigma);
            add_noise(&mut b, spec.noise_sigma, &mut rng);
            b
        }
        TaskKind::Lowlight => {
            let g = spec.gamma as f32;
            let mut d = target.map(|v| v.max(0.0).powf(g));
            add_noise(&mut d, spec.noise_sigma, &mut rng);
            d
        }
        TaskKind::Colorcast => {
            let m = spec.cast_matrix;
            let mut d = ImageTensor::from_fn(target.shape(), |c, y, x| {
                (0..3)
                    .map(|k| m[c][k] * target.get(k, y, x) as f64)
                    .sum::<f64>() as f32
            });
            add_noise(&mut d, spec.noise_sigma, &mut rng);
            d
        }
        TaskKind::Sr2x => target.box_downsample(2)?,
        TaskKind::Inpaint => {
            let (h, w) = (target.height(), target.width());
            let area = spec.hole_fraction * (h * w) as f64;
            let aspect: f64 = rng.random_range(0.5..2.0);
            let hw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let hh = ((area / hw as f64).round() as usize).clamp(1, h);
            let top = rng.random_range(0..=h - hh);
            let left = rng.random_range(0..=w - hw);
            let inside =
                |y: usize, x: usize| y >= top && y < top + hh && x >= left && x < left + hw;
            let shape = Shape::new(4, h, w);
            ImageTensor::from_fn(shape, |c, y, x| match (c, inside(y, x)) {
                (3, true) => 0.0,
                (3, false) => 1.0,
                (_, true) => 0.0,
                (_, false) => target.get(c, y, x),
            })
        }
        TaskKind::Colorize => luminance(target)?,
    };
    Ok(out.clip(0.0, 1.0))
}

/// Geometric augmentation applied to targets before degradation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rot90: true,
        }
    }
}

impl Augment {
    pub const NONE: Augment = Augment {
        hflip: false,
        vflip: false,
        rot90: false,
    };
}

/// Crop a target, enforcing the even-offset grid that `sr2x` needs so the
/// low-resolution condition stays aligned.
pub fn crop_target(
    img: &ImageTensor<f32>,
    task: TaskKind,
    top: usize,
    left: usize,
    crop: usize,
) -> Result<ImageTensor<f32>> {
    let s = task.scale();
    if !top.is_multiple_of(s) || !left.is_multiple_of(s) || !crop.is_multiple_of(s) {
        return Err(Error::InvalidShape(format!(
            "{} crops must sit on a {s}-pixel grid (offset {top},{left}, size {crop})",
            task.name()
        )));
    }
    img.crop(top, left, crop, crop)
}

/// Margin added around each crop when generating source images.
pub const GEN_MARGIN: usize = 16;

/// One training pair drawn from `rng`: generate, crop, augment, degrade.
pub fn make_pair<R: Rng + ?Sized>(
    task: TaskKind,
    spec: &DegradeSpec,
    crop: usize,
    augment: Augment,
    rng: &mut R,
) -> Result<Pair> {
    let image_seed: u64 = rng.random();
    let gen_size = (crop + GEN_MARGIN).max(16);
    let source = gen_image(image_seed, gen_size)?;
    let s = task.scale();
    let slots = (gen_size - crop) / s;
    let top = s * rng.random_range(0..=slots);
    let left = s * rng.random_range(0..=slots);
    let mut target = crop_target(&source, task, top, left, crop)?;
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let turns = rng.random_range(0..4);
    if augment.hflip && hflip {
        target = target.flip_horizontal();
    }
    if augment.vflip && vflip {
        target = target.flip_vertical();
    }
    if augment.rot90 {
        for _ in 0..turns {
            target = target.rot90();
        }
    }
    let noise_seed: u64 = rng.random();
    let condition = degrade(&target, task, &spec.with_seed(noise_seed))?;
    Ok(Pair {
        condition,
        target,
        seed: image_seed,
    })
}

pub fn make_batch<R: Rng + ?Sized>(
    task: TaskKind,
    spec: &DegradeSpec,
    batch: usize,
    crop: usize,
    augment: Augment,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    spec.validate()?;
    if !crop.is_multiple_of(task.scale()) {
        return Err(Error::InvalidShape(format!(
            "{} needs an even crop, got {crop}",
            task.name()
        )));
    }
    (0..batch)
        .map(|_| make_pair(task, spec, crop, augment, rng))
        .collect()
}

/// Fixed held-out pairs. Item `i` depends only on `(task, spec, crop, seed, i)`,
/// never on training draws.
pub fn validation_pair(
    task: TaskKind,
    spec: &DegradeSpec,
    crop: usize,
    seed: u64,
    index: usize,
) -> Result<Pair> {
    let item_seed = derive_seed(seed ^ VALIDATION_SALT, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    make_pair(task, spec, crop, Augment::NONE, &mut rng)
}

pub fn validation_set(
    task: TaskKind,
    spec: &DegradeSpec,
    count: usize,
    crop: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    spec.validate()?;
    (0..count)
        .map(|i| validation_pair(task, spec, crop, seed, i))
        .collect()
}
