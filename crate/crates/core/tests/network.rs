use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spxc::dataio::{make_grid, PatchPair};
use spxc::network::{
    gated_condition, pcnn_forward, reparameterize, resample_grid, vae_decode, vae_encode, Ctx, GateProjections,
    LatentCode, Mode, Model, NetworkConfig, ParamBuilder, ParamKind, PosteriorParams,
};
use spxc::dataio::ImageF;
use spxc::tensor::Tensor;

fn tiny(m: usize) -> NetworkConfig {
    let mut c = NetworkConfig::with(m, 1, 6);
    c.mixture_components = 3;
    c.latent_len = 4;
    c.vae_channels = 4;
    c.image_side = 8;
    c
}

/// Model with every conditioning projection randomized so that nothing is
/// trivially zero.
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
    model
}

fn random_patch(m: usize, origin: (usize, usize), n: usize, rng: &mut ChaCha8Rng) -> PatchPair {
    let grid = make_grid(n).unwrap();
    PatchPair {
        m,
        origin,
        patch_y: (0..m * m).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
        patch_g: grid.window(origin, m),
    }
}

fn code(l: usize, rng: &mut ChaCha8Rng) -> LatentCode {
    LatentCode {
        z: (0..l).map(|_| StandardNormal.sample(&mut *rng)).collect(),
    }
}

fn pixel_outputs(out: &spxc::network::MixtureParams, i: usize) -> Vec<f64> {
    let (a, b, c) = out.pixel(i);
    a.iter().chain(b).chain(c).copied().collect()
}

#[test]
fn causality_holds_for_every_pixel_pair_on_a_4x4_patch() {
    let cfg = tiny(4);
    let model = randomized(&cfg, 3);
    let params = model.store.values_as::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = random_patch(4, (2, 1), 8, &mut rng);
    let z = vec![code(cfg.latent_len, &mut rng)];
    let run = |p: &PatchPair| pcnn_forward(&model, &params, std::slice::from_ref(p), Some(&z), Mode::Eval).unwrap().remove(0);
    let out0 = run(&base);
    let mut depends = vec![vec![false; 16]; 16];
    for j in 0..16 {
        let mut p = base.clone();
        p.patch_y[j] += 0.75;
        let out = run(&p);
        for i in 0..16 {
            let (a, b) = (pixel_outputs(&out0, i), pixel_outputs(&out, i));
            depends[i][j] = a != b;
        }
    }
    for i in 0..16 {
        for j in i..16 {
            assert!(!depends[i][j], "output {i} depends on input {j}");
        }
    }
    for i in 1..16 {
        assert!(depends[i][i - 1], "output {i} ignores its left/upper neighbour");
    }
    assert!(depends[15][0], "last pixel ignores the first");
}

#[test]
fn causality_gradients_are_exactly_zero() {
    use spxc::network::patch_tensor;
    let cfg = tiny(4);
    let model = randomized(&cfg, 5);
    let params = model.store.values_as::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patch = random_patch(4, (0, 0), 8, &mut rng);
    let z = code(cfg.latent_len, &mut rng);
    for i in 0..16 {
        let mut ctx = Ctx::eval(&params);
        let y = ctx.g.leaf(patch_tensor(std::slice::from_ref(&patch), 4), true);
        let grids = spxc::network::grid_pyramid::<f64>(std::slice::from_ref(&patch), 4, cfg.levels())
            .unwrap()
            .into_iter()
            .map(|t| ctx.g.constant(t))
            .collect::<Vec<_>>();
        let zt = ctx.g.constant(spxc::network::latent_tensor(std::slice::from_ref(&z)).unwrap());
        let out = model.pcnn.forward(&mut ctx, y, &grids, Some(zt));
        let c = ctx.g.shape(out)[0];
        let mut sel = Tensor::zeros([c, 1, 4, 4]);
        for ch in 0..c {
            sel.data[ch * 16 + i] = 1.0;
        }
        let picked = ctx.g.const_mul(out, sel);
        let s = ctx.g.sum(picked);
        let grads = ctx.g.backward(s);
        let gy = grads.get(y).unwrap();
        for j in i..16 {
            assert_eq!(gy.data[j], 0.0, "d out[{i}] / d y[{j}]");
        }
        if i > 0 {
            assert!(gy.data[..i].iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn outputs_are_finite_and_depend_on_grid_and_latent() {
    let cfg = tiny(8);
    let model = randomized(&cfg, 11);
    let params = model.store.values_as::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_patch(8, (0, 0), 8, &mut rng);
    let z = vec![code(cfg.latent_len, &mut rng)];
    let out = pcnn_forward(&model, &params, std::slice::from_ref(&a), Some(&z), Mode::Eval).unwrap();
    assert!(out[0].all_finite());
    assert!(out[0].log_scales.iter().all(|&s| s >= cfg.log_scale_floor));

    let mut moved = a.clone();
    moved.patch_g = moved.patch_g.iter().map(|c| [c[0] * 0.5, c[1] * 0.5 + 0.1]).collect();
    let out_g = pcnn_forward(&model, &params, std::slice::from_ref(&moved), Some(&z), Mode::Eval).unwrap();
    assert_ne!(out[0], out_g[0]);

    let z2 = vec![code(cfg.latent_len, &mut rng)];
    let out_z = pcnn_forward(&model, &params, std::slice::from_ref(&a), Some(&z2), Mode::Eval).unwrap();
    assert_ne!(out[0], out_z[0]);

    let again = pcnn_forward(&model, &params, std::slice::from_ref(&a), Some(&z), Mode::Eval).unwrap();
    assert_eq!(out, again);
}

#[test]
fn batching_does_not_change_results() {
    let cfg = tiny(4);
    let model = randomized(&cfg, 4);
    let params = model.store.values_as::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let patches: Vec<_> = (0..3).map(|i| random_patch(4, (i, 2), 8, &mut rng)).collect();
    let zs: Vec<_> = (0..3).map(|_| code(cfg.latent_len, &mut rng)).collect();
    let all = pcnn_forward(&model, &params, &patches, Some(&zs), Mode::Eval).unwrap();
    for i in 0..3 {
        let one = pcnn_forward(&model, &params, &patches[i..i + 1], Some(&zs[i..i + 1]), Mode::Eval).unwrap();
        for (x, y) in one[0].means.iter().zip(&all[i].means) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_mode_is_seeded() {
    let cfg = tiny(4);
    let model = randomized(&cfg, 4);
    let params = model.store.values_as::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = vec![random_patch(4, (0, 0), 8, &mut rng)];
    let z = vec![code(cfg.latent_len, &mut rng)];
    let run = |s| pcnn_forward(&model, &params, &p, Some(&z), Mode::Train(ChaCha8Rng::seed_from_u64(s))).unwrap();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let eval = pcnn_forward(&model, &params, &p, Some(&z), Mode::Eval).unwrap();
    assert_ne!(run(1), eval);
}

#[test]
fn shape_and_finiteness_errors() {
    let cfg = tiny(4);
    let model = Model::new(&cfg, 0).unwrap();
    let params = model.store.values_as::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = random_patch(4, (0, 0), 8, &mut rng);
    let z = vec![code(cfg.latent_len, &mut rng)];
    let wrong = random_patch(8, (0, 0), 8, &mut rng);
    assert!(pcnn_forward(&model, &params, &[wrong], Some(&z), Mode::Eval).is_err());
    assert!(pcnn_forward(&model, &params, std::slice::from_ref(&p), None, Mode::Eval).is_err());
    p.patch_y[3] = f32::NAN;
    let e = pcnn_forward(&model, &params, &[p], Some(&z), Mode::Eval).unwrap_err();
    assert!(matches!(e, spxc::Error::NonFinite(_)));
}

#[test]
fn gated_condition_zero_init_and_symmetry() {
    let (f, l) = (3, 5);
    let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(0));
    let proj = GateProjections::new(&mut pb, "gate", f, Some(l), true);
    let mut store = pb.finish();
    let params = store.values_as::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ab_vals: Vec<f64> = (0..2 * f * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ab = Tensor::from_vec([2 * f, 1, 4, 4], ab_vals.clone());
    let g = Tensor::from_vec([2, 1, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
    let z = Tensor::from_vec([l, 1, 1, 1], (0..l).map(|_| rng.random_range(-1.0..1.0)).collect());

    let mut ctx = Ctx::eval(&params);
    let (abv, gv, zv) = (ctx.g.constant(ab.clone()), ctx.g.constant(g.clone()), ctx.g.constant(z.clone()));
    let out = gated_condition(&mut ctx, abv, Some(gv), Some(zv), &proj);
    let got = ctx.g.value(out).data.clone();
    for i in 0..f * 16 {
        let want = ab_vals[i].tanh() * (1.0 / (1.0 + (-ab_vals[f * 16 + i]).exp()));
        assert!((got[i] - want).abs() < 1e-14);
    }

    for v in store.values.iter_mut() {
        v.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    let params = store.values_as::<f64>();
    let uniform_ab = Tensor::full([2 * f, 1, 4, 4], 0.3);
    let const_g = Tensor::from_vec([2, 1, 4, 4], [vec![0.2; 16], vec![-0.4; 16]].concat());
    let mut ctx = Ctx::eval(&params);
    let (abv, gv, zv) = (ctx.g.constant(uniform_ab.clone()), ctx.g.constant(const_g), ctx.g.constant(z.clone()));
    let out = gated_condition(&mut ctx, abv, Some(gv), Some(zv), &proj);
    let v = ctx.g.value(out);
    for c in 0..f {
        let plane = &v.data[c * 16..(c + 1) * 16];
        assert!(plane.iter().all(|&x| x == plane[0]));
    }

    let z2 = z.map(|x| x + 0.5);
    let eval_z = |zt: &Tensor<f64>| {
        let mut ctx = Ctx::eval(&params);
        let (abv, gv, zv) = (ctx.g.constant(uniform_ab.clone()), ctx.g.constant(g.clone()), ctx.g.constant(zt.clone()));
        let out = gated_condition(&mut ctx, abv, Some(gv), Some(zv), &proj);
        ctx.g.value(out).data.clone()
    };
    assert_ne!(eval_z(&z), eval_z(&z2));
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let small = NetworkConfig::small(8);
    let large = NetworkConfig::large(8);
    let a = Model::param_count(&small).unwrap();
    assert_eq!(a, Model::new(&small, 99).unwrap().store.count());
    assert!(a < Model::param_count(&large).unwrap());
    let m = Model::new(&small, 1).unwrap();
    assert_eq!(m.store.values.len(), m.store.ema.len());
    for (v, e) in m.store.values.iter().zip(&m.store.ema) {
        assert_eq!(v.shape, e.shape);
    }
    assert!(m.store.all_finite());
}

#[test]
fn corners_survive_repeated_resampling() {
    for m in [4usize, 8, 16, 32] {
        let g = make_grid(40).unwrap().window((3, 5), m);
        let (first, last) = (g[0], g[g.len() - 1]);
        let mut cur = g;
        let mut side = m;
        while side > 2 {
            cur = resample_grid(&cur, side).unwrap();
            side /= 2;
            assert_eq!(cur[0], first);
            assert_eq!(cur[cur.len() - 1], last);
        }
    }
}

fn image(n: usize, rng: &mut ChaCha8Rng) -> ImageF {
    ImageF {
        side: n,
        pixels: (0..n * n).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
    }
}

#[test]
fn encoder_is_deterministic_and_batch_equivariant() {
    let cfg = tiny(4);
    let model = Model::new(&cfg, 2).unwrap();
    let params = model.store.values_as::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<_> = (0..3).map(|_| image(8, &mut rng)).collect();
    let a = vae_encode(&model, &params, &xs).unwrap();
    assert_eq!(a, vae_encode(&model, &params, &xs).unwrap());
    let perm = vec![xs[2].clone(), xs[0].clone(), xs[1].clone()];
    let b = vae_encode(&model, &params, &perm).unwrap();
    for (i, j) in [(0, 2), (1, 0), (2, 1)] {
        for (x, y) in b[i].mu.iter().zip(&a[j].mu) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(a.iter().all(|p| p.logvar.iter().all(|v| v.abs() <= 10.0)));
    assert!(vae_encode(&model, &params, &[image(12, &mut rng)]).is_err());
}

#[test]
fn decoder_is_deterministic_and_finite() {
    let cfg = tiny(4);
    let model = Model::new(&cfg, 2).unwrap();
    let params = model.store.values_as::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let zs = vec![code(cfg.latent_len, &mut rng)];
    let a = vae_decode(&model, &params, &zs).unwrap();
    assert_eq!(a, vae_decode(&model, &params, &zs).unwrap());
    assert_eq!((a[0].h, a[0].w, a[0].k), (8, 8, 1));
    assert!(a[0].all_finite());
}

#[test]
fn reparameterization_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let p = PosteriorParams {
        mu: vec![0.0; 3],
        logvar: vec![0.0; 3],
    };
    let n = 100_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let z = reparameterize(&p, &mut rng);
        for d in 0..3 {
            sum[d] += z.z[d];
            sq[d] += z.z[d] * z.z[d];
        }
    }
    for d in 0..3 {
        let mean = sum[d] / n as f64;
        let var = sq[d] / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    let tight = PosteriorParams {
        mu: vec![0.25, -1.5],
        logvar: vec![-10.0, -10.0],
    };
    let z = reparameterize(&tight, &mut rng);
    for (a, b) in z.z.iter().zip(&tight.mu) {
        assert!((a - b).abs() < 5.0 * (-5.0f64).exp(), "{a} vs {b}");
    }
    let a = reparameterize(&p, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(a, reparameterize(&p, &mut ChaCha8Rng::seed_from_u64(1)));
}
