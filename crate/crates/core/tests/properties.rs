use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfr_core::backbone::{
    init_backbone, BackboneConfig, Checkpoint, CheckpointMeta, Parameterization,
};
use rfr_core::flowcore::{
    euler_step, induced_velocity, make_state, rfr_loss, sample_t, time_grid, TSamplerConfig,
    TStrategy, DEFAULT_T_MIN,
};
use rfr_core::metrics::{psnr, ssim, PSNR_CAP};
use rfr_core::pngio::{encode_png, quantize};
use rfr_core::synthdata::{degrade, gen_image, validation_set, DegradeSpec, TaskKind};
use rfr_core::{ImageTensor, Shape};

fn tensor(seed: u64, shape: Shape) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::<f64>::randn(shape, &mut rng)
}

fn unit_image(seed: u64, size: usize) -> ImageTensor<f32> {
    gen_image(seed, size).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_t_stays_in_range(draw in 0.0f64..1.0, strategy in 0usize..3, p in 1u32..3) {
        let cfg = TSamplerConfig { strategy: TStrategy::ALL[strategy], p, ..TSamplerConfig::default() };
        let draw = if strategy == 2 { (draw - 0.5) * 12.0 } else { draw };
        let t = sample_t(&cfg, draw).unwrap();
        prop_assert!((DEFAULT_T_MIN..=1.0).contains(&t));
    }

    #[test]
    fn beta_sampler_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = TSamplerConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(sample_t(&cfg, lo).unwrap() <= sample_t(&cfg, hi).unwrap());
    }

    #[test]
    fn loss_matches_velocity_residual(seed in any::<u64>(), t in DEFAULT_T_MIN..1.0) {
        let shape = Shape::new(3, 4, 5);
        let y = tensor(seed, shape);
        let eps = tensor(seed ^ 1, shape);
        let f = tensor(seed ^ 2, shape);
        let yt = make_state(&y, &eps, t).unwrap();
        let v = induced_velocity(&yt, &f, t, DEFAULT_T_MIN).unwrap();
        let residual = eps
            .zip_map(&y, |e, a| e - a)
            .unwrap()
            .zip_map(&v, |u, w| (u - w).abs())
            .unwrap()
            .mean();
        let loss = rfr_loss(&y, &f, t, 1).unwrap();
        assert_relative_eq!(loss, residual, max_relative = 1e-9);
    }

    #[test]
    fn euler_step_moves_toward_prediction(seed in any::<u64>(), n in 1usize..20) {
        let shape = Shape::new(1, 3, 3);
        let y = tensor(seed, shape);
        let f = tensor(seed ^ 7, shape);
        let grid = time_grid(n);
        let t = grid[0];
        let dt = 1.0 / n as f64;
        let next = euler_step(&y, &f, t, dt).unwrap();
        for ((&a, &b), &c) in y.data().iter().zip(f.data()).zip(next.data()) {
            assert_relative_eq!(c - a, dt / t * (b - a), max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn final_step_returns_prediction(seed in any::<u64>(), t in 0.01f64..1.0) {
        let shape = Shape::new(2, 2, 2);
        let y = tensor(seed, shape);
        let f = tensor(seed ^ 3, shape);
        prop_assert_eq!(euler_step(&y, &f, t, t).unwrap(), f);
    }

    #[test]
    fn psnr_is_symmetric_and_capped(seed in any::<u64>(), other in any::<u64>()) {
        let a = unit_image(seed, 16);
        let b = unit_image(other, 16);
        let ab = psnr(&a, &b, PSNR_CAP).unwrap();
        prop_assert_eq!(ab, psnr(&b, &a, PSNR_CAP).unwrap());
        prop_assert!(ab <= PSNR_CAP);
        prop_assert_eq!(psnr(&a, &a, PSNR_CAP).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), other in any::<u64>()) {
        let a = unit_image(seed, 16);
        let b = unit_image(other, 16);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        assert_relative_eq!(s, ssim(&b, &a).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn quantization_is_idempotent(v in -0.5f32..1.5) {
        let q = quantize(v);
        prop_assert_eq!(quantize(q as f32 / 255.0), q);
    }

    #[test]
    fn flips_are_involutions(seed in any::<u64>()) {
        let img = unit_image(seed, 16);
        prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img.clone());
        prop_assert_eq!(img.flip_vertical().flip_vertical(), img.clone());
        prop_assert_eq!(img.rot90().rot90().rot90().rot90(), img);
    }

    #[test]
    fn degradations_stay_in_unit_range(seed in any::<u64>(), task in 0usize..7) {
        let task = TaskKind::ALL[task];
        let img = unit_image(seed, 32);
        let spec = DegradeSpec::default().with_seed(seed);
        let x = degrade(&img, task, &spec).unwrap();
        prop_assert_eq!(x.shape(), task.condition_shape(img.shape()));
        let (lo, hi) = x.min_max();
        prop_assert!(lo >= 0.0 && hi <= 1.0);
    }
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let cfg = BackboneConfig {
        in_channels: 6,
        out_channels: 3,
        base_width: 8,
        depth: 2,
        parameterization: Parameterization::VPred,
        time_embedding: true,
        time_embed_dim: 8,
        upsample_factor: 1,
    };
    let ck = Checkpoint {
        params: init_backbone::<f32>(&cfg, 5).unwrap(),
        config: cfg,
        iteration: 42,
        meta: CheckpointMeta {
            task: Some("deblur".into()),
            path: Some("standard".into()),
            cfg_dropout_prob: 0.1,
        },
    };
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], b"RFRCKPT1");
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn png_encoding_is_deterministic() {
    let img = unit_image(9, 16);
    assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
}

#[test]
fn validation_set_is_independent_of_count() {
    let small = validation_set(TaskKind::Lowlight, &DegradeSpec::default(), 2, 32, 2024).unwrap();
    let large = validation_set(TaskKind::Lowlight, &DegradeSpec::default(), 5, 32, 2024).unwrap();
    assert_eq!(small[..], large[..2]);
}
