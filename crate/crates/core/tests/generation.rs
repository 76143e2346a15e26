use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spxc::dataio::{make_grid, ImageU8};
use spxc::generation::{sample_pixel, window_for_pixel, GenRequest, LatentSource, Sampler};
use spxc::network::{LatentCode, Model, NetworkConfig, ParamKind};

fn tiny(m: usize) -> NetworkConfig {
    let mut c = NetworkConfig::with(m, 1, 6);
    c.mixture_components = 3;
    c.latent_len = 4;
    c.vae_channels = 4;
    c.image_side = 8;
    c
}

fn randomized(cfg: &NetworkConfig, seed: u64) -> Model {
    let mut model = Model::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (spec, v) in model.store.specs.iter().zip(model.store.values.iter_mut()) {
        if spec.kind != ParamKind::Kernel {
            for x in v.data.iter_mut() {
                *x = 0.3 * rng.random_range(-1.0..1.0f32);
            }
        }
    }
    model.store.ema = model.store.values.clone();
    model
}

fn prior(side: usize, seed: u64) -> GenRequest {
    GenRequest { target_side: side, latent: LatentSource::Prior, seed }
}

#[test]
fn window_choice_maximizes_causal_context() {
    for n in 1..=12 {
        for m in 1..=4.min(n) {
            for r in 0..n {
                for c in 0..n {
                    let w = window_for_pixel(r, c, m, n);
                    assert_eq!((w.origin.0 + w.position.0, w.origin.1 + w.position.1), (r, c));
                    assert!(w.origin.0 + m <= n && w.origin.1 + m <= n);
                    let mut best = 0;
                    for wr in 0..=n - m {
                        for wc in 0..=n - m {
                            if (wr..wr + m).contains(&r) && (wc..wc + m).contains(&c) {
                                best = best.max((r - wr) * m + (c - wc));
                            }
                        }
                    }
                    assert_eq!(w.context(m), best, "n={n} m={m} ({r},{c})");
                }
            }
        }
    }
}

#[test]
fn sliding_window_matches_single_pass_when_window_is_the_image() {
    let cfg = tiny(4);
    let model = randomized(&cfg, 3);
    let s = Sampler::ema(&model);
    for seed in 0..3 {
        let a = s.generate(&prior(4, seed)).unwrap();
        let b = s.sample_single_pass(&prior(4, seed)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn neutral_fill_value_is_unobservable() {
    let cfg = tiny(4);
    let model = randomized(&cfg, 4);
    let base = Sampler::ema(&model).generate(&prior(9, 11)).unwrap();
    for fill in [-1.0, 0.37, 1.0] {
        let mut s = Sampler::ema(&model);
        s.fill = fill;
        assert_eq!(s.generate(&prior(9, 11)).unwrap(), base);
    }
}

#[test]
fn generation_is_seed_deterministic_and_batch_independent() {
    let cfg = tiny(4);
    let model = randomized(&cfg, 5);
    let s = Sampler::ema(&model);
    let reqs = [prior(8, 1), prior(8, 2), prior(12, 3)];
    let batch = s.generate_batch(&reqs).unwrap();
    for (r, img) in reqs.iter().zip(&batch) {
        assert_eq!(&s.generate(r).unwrap(), img);
        assert_eq!(img.side, r.target_side);
    }
    assert_ne!(batch[0], batch[1]);
}

#[test]
fn explicit_and_posterior_latents_are_used() {
    let cfg = tiny(4);
    let model = randomized(&cfg, 6);
    let s = Sampler::ema(&model);
    let z = |v: f64| LatentSource::Explicit(LatentCode { z: vec![v; 4] });
    let a = s.generate(&GenRequest { target_side: 8, latent: z(2.0), seed: 1 }).unwrap();
    let b = s.generate(&GenRequest { target_side: 8, latent: z(-2.0), seed: 1 }).unwrap();
    assert_ne!(a, b);
    let x = ImageU8::new(8, (0..64).map(|i| (i * 4) as u8).collect()).unwrap();
    let r1 = s.reconstruct(&x, 16, 9).unwrap();
    assert_eq!(r1.side, 16);
    assert_eq!(r1, s.reconstruct(&x, 16, 9).unwrap());
    let bad = GenRequest { target_side: 8, latent: LatentSource::Explicit(LatentCode { z: vec![0.0; 3] }), seed: 0 };
    assert!(s.generate(&bad).is_err());
}

#[test]
fn invalid_requests_fail() {
    let cfg = tiny(4);
    let mut model = randomized(&cfg, 7);
    assert!(Sampler::ema(&model).generate(&prior(3, 0)).is_err());
    assert!(Sampler::ema(&model).sample_single_pass(&prior(8, 0)).is_err());
    model.store.ema[0].data[0] = f32::NAN;
    assert!(Sampler::ema(&model).generate(&prior(4, 0)).is_err());
}

#[test]
fn grid_windows_stay_inside_the_unit_square() {
    for n in [8, 28, 56, 112] {
        let g = make_grid(n).unwrap();
        for r in 0..n {
            for c in 0..n {
                let w = window_for_pixel(r, c, 8.min(n), n);
                let patch = g.window(w.origin, 8.min(n));
                assert!(patch.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
                assert_eq!(patch[w.context(8.min(n))], g.coords[r * n + c]);
            }
        }
    }
}

#[test]
fn two_tight_components_split_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (lo, hi) = (spxc::dataio::normalize_byte(40) as f64, spxc::dataio::normalize_byte(200) as f64);
    let n = 100_000;
    let mut count = 0usize;
    for _ in 0..n {
        let v = sample_pixel(&[0.5, 0.5], &[lo, hi], &[-12.0, -12.0], &mut rng);
        assert!(v == 40 || v == 200);
        count += (v == 40) as usize;
    }
    let f = count as f64 / n as f64;
    assert!((f - 0.5).abs() < 0.01, "{f}");
}
