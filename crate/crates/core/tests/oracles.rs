//! Hand-derived values checked against independently computed oracles.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrc_core::conditioning::{fourier_embed, table_index, BETA_GRID};
use mrc_core::config::ModelConfig;
use mrc_core::data::{load_image, pad_to_multiple, random_resized_crop, Image, ResizeRange};
use mrc_core::entropy::{discretized_gaussian_bits, CdfTable};
use mrc_core::losses::{loss_egd, loss_gan_d, loss_gan_g, sample_betas, BetaSampling};
use mrc_core::metrics::{extract_patches, frechet_distance, psnr_from_mse, FeatureStats};
use mrc_core::model::CodecModel;
use mrc_core::perceptual::PerceptualMetric;

/// Standard normal CDF by composite Simpson integration of the density
/// from 0, independent of any erf implementation.
fn phi(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

#[test]
fn fourier_embedding_at_top_of_range() {
    let e = fourier_embed(5.12, 3);
    let want = [0.0, -1.0, 0.0, 1.0, 0.0, 1.0];
    assert_eq!(e.len(), 6);
    for (a, b) in e.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{e:?}");
    }
}

#[test]
fn gaussian_bits_of_zero() {
    let oracle = -(phi(0.5) - phi(-0.5)).log2();
    assert!((oracle - 1.385).abs() < 5e-4);
    assert!((discretized_gaussian_bits(0.0, 0.0, 1.0) - oracle).abs() < 1e-9);
}

#[test]
fn psnr_of_mse_100() {
    let oracle = 10.0 * (65025.0f64 / 100.0).log10();
    assert!((psnr_from_mse(100.0) - oracle).abs() < 1e-12);
    assert!((oracle - 28.13).abs() < 5e-3);
}

#[test]
fn padding_to_multiple_of_64() {
    let img = Image::filled(500, 333, [1, 2, 3]).unwrap();
    let (padded, orig) = pad_to_multiple(&img, 64);
    assert_eq!((padded.width(), padded.height()), (500u32.div_ceil(64) * 64, 333u32.div_ceil(64) * 64));
    assert_eq!((padded.width(), padded.height()), (512, 384));
    assert_eq!((orig.width, orig.height), (500, 333));
}

#[test]
fn crops_are_always_square() {
    let img = Image::filled(128, 256, [9, 9, 9]).unwrap();
    let range = ResizeRange { min: 0.5, max: 1.0 };
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_resized_crop(&img, 64, range, &mut rng).unwrap().crop;
        assert_eq!((c.width(), c.height()), (64, 64));
    }
}

#[test]
fn sixteen_bit_png_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deep.png");
    let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_fn(4, 4, |x, y| image::Rgb([x as u16 * 1000, y as u16, 7]));
    buf.save(&path).unwrap();
    let err = load_image(&path).unwrap_err().to_string();
    assert!(err.contains("unsupported bit depth"), "{err}");
}

#[test]
fn patch_grid_on_512() {
    let img = Image::filled(512, 512, [0, 0, 0]).unwrap();
    let starts: Vec<u32> = (0..).map(|i| i * 128).take_while(|&p| p + 256 <= 512).collect();
    assert_eq!(starts, [0, 128, 256]);
    assert_eq!(extract_patches(&img, 256).len(), starts.len() * starts.len());
}

#[test]
fn latent_shape_at_stride_16() {
    // M = 192 does not split into 10 equal slices; 12 slices of 16 do.
    let cfg = ModelConfig { latent_channels: 192, num_slices: 12, ..ModelConfig::paper() };
    let x = Tensor::zeros((1, 3, 128, 64), DType::F32, &Device::Cpu).unwrap();
    let m = CodecModel::new(&cfg, 0, false, DType::F32, &Device::Cpu).unwrap();
    let (y, _) = m.analyze(&x).unwrap();
    assert_eq!(y.dims(), &[1, 192, 128 / 16, 64 / 16]);
}

#[test]
fn snapping_picks_nearest_key() {
    let i = table_index(&BETA_GRID, 0.20, true).unwrap();
    assert_eq!(BETA_GRID[i], 0.16);
    assert!(table_index(&BETA_GRID, 0.20, false).is_err());
    assert_eq!(BETA_GRID[table_index(&BETA_GRID, 0.24, true).unwrap()], 0.16);
    assert_eq!(BETA_GRID[table_index(&BETA_GRID, 0.30, true).unwrap()], 0.32);
}

/// KL(true discretized Gaussian || quantized table), with the true mass
/// from the Simpson CDF and out-of-window values priced at the escape cost.
#[test]
fn quantized_gaussian_tables_are_close() {
    let l_max = 64;
    let mut worst = 0f64;
    let mut sigma = 0.2;
    while sigma <= 8.0 {
        for mu in [-3.3, -0.5, 0.0, 0.27, 1.5, 10.0] {
            let t = CdfTable::gaussian(mu, sigma, l_max).unwrap();
            let q = t.probabilities();
            let esc = t.escape().unwrap();
            let mut kl = 0.0;
            for k in -l_max..=l_max {
                let p = phi((k as f64 + 0.5 - mu) / sigma) - phi((k as f64 - 0.5 - mu) / sigma);
                if p < 1e-300 {
                    continue;
                }
                let qk = match t.index_of(k) {
                    Some(i) => q[i],
                    None => q[t.escape_index().unwrap()] * (-(esc.bits as f64)).exp2(),
                };
                kl += p * (p / qk).log2();
            }
            worst = worst.max(kl);
        }
        sigma *= 1.25;
    }
    assert!(worst < 1e-3, "worst KL {worst} bits/symbol");
}

#[test]
fn gan_losses_at_one_half() {
    let ln2 = 2f64.ln();
    assert!((loss_gan_g(&[0.5; 7]) - ln2).abs() < 1e-15);
    assert!((loss_gan_d(&[0.5; 3], &[0.5; 3]) - 2.0 * ln2).abs() < 1e-15);
}

#[test]
fn full_objective_example() {
    let l = loss_egd(1.0, 100.0, &[0.5], 0.1, 1.0, 0.01, 4.26);
    let oracle = 100.0 * 0.01 * 1.0 + 100.0 / 100.0 + 1.0 * (2f64.ln() + 4.26 * 0.1);
    assert!((l.total_egd - oracle).abs() < 1e-12);
    assert!((l.total_egd - 3.119).abs() < 1e-3);
}

#[test]
fn sampled_beta_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = sample_betas(&mut rng, 100_000, BetaSampling::PerExample);
    let mean = b.iter().sum::<f64>() / b.len() as f64;
    assert!((mean - 2.56).abs() < 0.03, "{mean}");
    assert!(b.iter().all(|&v| (0.0..=5.12).contains(&v)));
}

#[test]
fn perceptual_symmetry_and_positivity() {
    let m = PerceptualMetric::new(DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let a: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..255.0)).collect();
        let b: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..255.0)).collect();
        let x = Tensor::from_vec(a, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let y = Tensor::from_vec(b, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let d = m.perceptual(&x, &y).unwrap();
        assert!(d > 0.0);
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let dp = m
            .perceptual(&x.index_select(&perm, 1).unwrap(), &y.index_select(&perm, 1).unwrap())
            .unwrap();
        assert!((d - dp).abs() < 1e-12 * d.max(1.0));
        assert_eq!(m.perceptual(&x, &x).unwrap(), 0.0);
    }
}

#[test]
fn frechet_diagonal_case() {
    let s = |v: f64| FeatureStats {
        mean: nalgebra::DVector::zeros(2),
        cov: nalgebra::DMatrix::identity(2, 2) * v,
        n: 100,
    };
    // Tr(4I + I - 2 (4I)^{1/2}) = 2 (5 - 4) in dimension 2.
    assert!((frechet_distance(&s(4.0), &s(1.0)).unwrap() - 2.0).abs() < 1e-9);
}
