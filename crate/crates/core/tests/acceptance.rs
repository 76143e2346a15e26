//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! Criteria 1-9 are self-contained property checks and make the target fail
//! when they fail. Criteria 10-14 grade artifacts produced by the `spxc`
//! command line (see README) found under `SPXC_RUNS_DIR` (default `runs/`
//! at the workspace root); they report their verdict without aborting.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spxc::dataio::{make_grid, ImageU8, PatchPair};
use spxc::eval::{downsample_to_28, ms_ssim, pair_scores, Lenet, ScoreReport, SsimConfig};
use spxc::generation::{window_for_pixel, GenRequest, LatentSource, Sampler};
use spxc::graph::Graph;
use spxc::losses::{kl_gauss, mixture_bin_probs};
use spxc::network::{
    grid_pyramid, latent_tensor, patch_tensor, pcnn_forward, resample_grid, Ctx, LatentCode, Mode, Model,
    NetworkConfig, ParamKind, PosteriorParams,
};
use spxc::tensor::Tensor;
use spxc::training::{EpochRecord, TrainConfig, TrainState};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}
use Verdict::*;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn runs_dir() -> PathBuf {
    std::env::var_os("SPXC_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../runs"))
}

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

fn noise_image(n: usize, rng: &mut ChaCha8Rng) -> ImageU8 {
    ImageU8::new(n, (0..n * n).map(|_| rng.random()).collect()).unwrap()
}

// 1 ------------------------------------------------------------------------

fn causality() -> Verdict {
    let cfg = tiny(4);
    let model = randomized(&cfg, 3);
    let params = model.store.values_as::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = make_grid(8).unwrap();
    let base = PatchPair {
        m: 4,
        origin: (2, 1),
        patch_y: (0..16).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
        patch_g: grid.window((2, 1), 4),
    };
    let z = vec![LatentCode { z: (0..4).map(|_| StandardNormal.sample(&mut rng)).collect() }];

    // Sum of every output channel at pixel i, as a function of the patch.
    let outputs = |y: &[f64]| -> Vec<f64> {
        let mut ctx = Ctx::eval(&params);
        let yt = ctx.g.constant(Tensor::from_vec([1, 1, 4, 4], y.to_vec()));
        let grids: Vec<_> = grid_pyramid::<f64>(std::slice::from_ref(&base), 4, cfg.levels())
            .unwrap()
            .into_iter()
            .map(|t| ctx.g.constant(t))
            .collect();
        let zt = ctx.g.constant(latent_tensor(&z).unwrap());
        let out = model.pcnn.forward(&mut ctx, yt, &grids, Some(zt));
        let v = ctx.g.value(out);
        let c = v.shape[0];
        (0..16).map(|i| (0..c).map(|ch| v.data[ch * 16 + i]).sum()).collect()
    };
    let y0: Vec<f64> = base.patch_y.iter().map(|&v| v as f64).collect();
    let run = |p: &PatchPair| pcnn_forward(&model, &params, std::slice::from_ref(p), Some(&z), Mode::Eval).unwrap().remove(0);
    let out0 = run(&base);

    let mut violations = 0;
    let mut fd_nonzero_left = 0;
    for j in 0..16 {
        let mut p = base.clone();
        p.patch_y[j] += 0.75;
        let out = run(&p);
        let h = 1e-4;
        let (mut up, mut dn) = (y0.clone(), y0.clone());
        up[j] += h;
        dn[j] -= h;
        let (fu, fdn) = (outputs(&up), outputs(&dn));
        for i in 0..16 {
            let (a, b) = (out0.pixel(i), out.pixel(i));
            let same = a == b;
            let fd = (fu[i] - fdn[i]) / (2.0 * h);
            if j >= i {
                if !same || fd != 0.0 {
                    violations += 1;
                }
            } else if fd != 0.0 {
                fd_nonzero_left += 1;
            }
        }
    }

    // Reverse-mode gradients for every output pixel.
    let mut grad_violations = 0;
    for i in 0..16 {
        let mut ctx = Ctx::eval(&params);
        let y = ctx.g.leaf(patch_tensor(std::slice::from_ref(&base), 4), true);
        let grids: Vec<_> = grid_pyramid::<f64>(std::slice::from_ref(&base), 4, cfg.levels())
            .unwrap()
            .into_iter()
            .map(|t| ctx.g.constant(t))
            .collect();
        let zt = ctx.g.constant(latent_tensor(&z).unwrap());
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
        grad_violations += (i..16).filter(|&j| gy.data[j] != 0.0).count();
    }
    check(
        violations == 0 && grad_violations == 0 && fd_nonzero_left > 0,
        format!(
            "256 pairs: {violations} perturbation/finite-difference and {grad_violations} gradient violations; {fd_nonzero_left} of 120 causal pairs active"
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(-1.3..1.3)).collect();
        let scales: Vec<f64> = (0..k).map(|_| rng.random_range(-7.0..1.0)).collect();
        let p = mixture_bin_probs(&logits, &means, &scales);
        let s: f64 = p.iter().sum();
        worst = worst.max((s - 1.0).abs());
    }
    check(worst <= 1e-6, format!("max |sum - 1| over 1000 mixtures = {worst:.2e}"))
}

// 3 ------------------------------------------------------------------------

fn kl() -> Verdict {
    let zero = kl_gauss(&PosteriorParams { mu: vec![0.0; 60], logvar: vec![0.0; 60] });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let d = 6;
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.0)).collect();
        let analytic = kl_gauss(&PosteriorParams { mu: mu.clone(), logvar: lv.clone() });
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut lr = 0.0;
            for k in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                let s = (0.5 * lv[k]).exp();
                let z = mu[k] + s * e;
                // log q(z) - log p(z), constants cancel.
                lr += -0.5 * e * e - 0.5 * lv[k] + 0.5 * z * z;
            }
            acc += lr;
        }
        let mc = acc / n as f64;
        worst = worst.max((mc - analytic).abs() / analytic);
    }
    check(
        zero == 0.0 && worst < 0.01,
        format!("kl(0,0) = {zero}; worst Monte Carlo relative error {worst:.2e}"),
    )
}

// 4 ------------------------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

fn gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst = [0.0f64; 3];

    let (k, side) = (3, 3);
    let targets: Vec<u8> = (0..side * side).map(|_| rng.random()).collect();
    let mut p0: Vec<f64> = (0..3 * k * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    for v in &mut p0[2 * k * side * side..] {
        *v = rng.random_range(-4.0..0.0);
    }
    let nll = |p: &[f64]| -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([3 * k, 1, side, side], p.to_vec()), true);
        let l = g.dlm_nll(x, k, &targets);
        let s = g.sum(l);
        let v = g.value(s).data[0];
        let grads = g.backward(s);
        (v, grads.get(x).unwrap().data.clone())
    };
    let (_, an) = nll(&p0);
    for j in 0..p0.len() {
        let mut q = p0.clone();
        q[j] += h;
        let up = nll(&q).0;
        q[j] -= 2.0 * h;
        let dn = nll(&q).0;
        worst[0] = worst[0].max(rel_err((up - dn) / (2.0 * h), an[j]));
    }

    let d = 5;
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..2.0)).collect();
    let klf = |mu: &[f64], lv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::from_vec([d, 1, 1, 1], mu.to_vec()), true);
        let l = g.leaf(Tensor::from_vec([d, 1, 1, 1], lv.to_vec()), true);
        let kl = g.kl_gauss(m, l);
        let s = g.sum(kl);
        let v = g.value(s).data[0];
        let gr = g.backward(s);
        (v, gr.get(m).unwrap().data.clone(), gr.get(l).unwrap().data.clone())
    };
    let (_, gm, gl) = klf(&mu, &lv);
    for j in 0..d {
        let mut a = mu.clone();
        a[j] += h;
        let up = klf(&a, &lv).0;
        a[j] -= 2.0 * h;
        let dn = klf(&a, &lv).0;
        worst[1] = worst[1].max(rel_err((up - dn) / (2.0 * h), gm[j]));
        let mut b = lv.clone();
        b[j] += h;
        let up = klf(&mu, &b).0;
        b[j] -= 2.0 * h;
        let dn = klf(&mu, &b).0;
        worst[1] = worst[1].max(rel_err((up - dn) / (2.0 * h), gl[j]));
    }

    let mut net = NetworkConfig::with(4, 1, 4);
    net.image_side = 8;
    net.mixture_components = 2;
    net.latent_len = 3;
    net.vae_channels = 4;
    let st = TrainState::new(&net, &TrainConfig::default()).unwrap();
    let mut params = st.model.store.values_as::<f64>();
    for (spec, t) in st.model.store.specs.iter().zip(params.iter_mut()) {
        if spec.kind != ParamKind::Kernel {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let batch: Vec<_> = (0..2).map(|_| noise_image(8, &mut rng)).collect();
    let loss_at = |p: &[Tensor<f64>]| {
        let mut ctx = Ctx::eval(p);
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let (loss, _) = st.batch_loss(&mut ctx, &batch, &mut r).unwrap();
        ctx.g.value(loss).data[0]
    };
    let grads = {
        let mut ctx = Ctx::train(&params, vec![true; params.len()], None);
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let (loss, _) = st.batch_loss(&mut ctx, &batch, &mut r).unwrap();
        let mut g = ctx.g.backward(loss);
        ctx.param_grads(&mut g)
    };
    for i in 0..params.len() {
        let g = grads[i].as_ref().unwrap();
        let n = params[i].len();
        for j in [0, n / 2, n - 1] {
            let orig = params[i].data[j];
            params[i].data[j] = orig + h;
            let up = loss_at(&params);
            params[i].data[j] = orig - h;
            let dn = loss_at(&params);
            params[i].data[j] = orig;
            worst[2] = worst[2].max(rel_err((up - dn) / (2.0 * h), g.data[j]));
        }
    }
    check(
        worst.iter().all(|&w| w < 1e-3),
        format!(
            "max relative error: dlm_nll {:.1e}, kl_gauss {:.1e}, network loss {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn window_equivalence() -> Verdict {
    let mut same = 0;
    let mut total = 0;
    for (m, seed) in [(4, 3u64), (8, 5)] {
        let model = randomized(&tiny(m), seed);
        let s = Sampler::ema(&model);
        for k in 0..3 {
            let req = GenRequest { target_side: m, latent: LatentSource::Prior, seed: 100 + k };
            total += 1;
            same += (s.generate(&req).unwrap() == s.sample_single_pass(&req).unwrap()) as usize;
        }
    }
    check(same == total, format!("{same}/{total} sliding-window images bit-identical to single-pass"))
}

// 6 ------------------------------------------------------------------------

fn window_maximality() -> Verdict {
    let mut cases = 0;
    let mut bad = 0;
    for n in 1..=12 {
        for m in 1..=4.min(n) {
            for r in 0..n {
                for c in 0..n {
                    let w = window_for_pixel(r, c, m, n);
                    let mut best = None;
                    for wr in 0..=n - m {
                        for wc in 0..=n - m {
                            if (wr..wr + m).contains(&r) && (wc..wc + m).contains(&c) {
                                let ctx = (r - wr) * m + (c - wc);
                                best = Some(best.map_or(ctx, |b: usize| b.max(ctx)));
                            }
                        }
                    }
                    cases += 1;
                    let legal = w.origin.0 + m <= n && w.origin.1 + m <= n;
                    if !legal || Some(w.context(m)) != best {
                        bad += 1;
                    }
                }
            }
        }
    }
    check(bad == 0, format!("{cases} placements checked, {bad} not maximal"))
}

// 7 ------------------------------------------------------------------------

fn grid() -> Verdict {
    let mut problems = Vec::new();
    for n in [2usize, 3, 4, 8, 28, 56, 112] {
        let g = make_grid(n).unwrap();
        if g.coords[0] != [-1.0, -1.0] || g.coords[n * n - 1] != [1.0, 1.0] || g.coords[n - 1] != [-1.0, 1.0] {
            problems.push(format!("corners of G_{n}"));
        }
        let step = 2.0 / (n - 1) as f64;
        for k in 1..n {
            let d = g.coords[k][1] - g.coords[k - 1][1];
            if (d - step).abs() > 1e-15 {
                problems.push(format!("step of G_{n}"));
                break;
            }
        }
        for m in [2usize, 4, 8].into_iter().filter(|&m| m <= n) {
            for origin in [(0, 0), (n - m, n - m), ((n - m) / 2, 0)] {
                let w = g.window(origin, m);
                let half = m / 2;
                let r = resample_grid(&w, m).unwrap();
                let (a, b) = (w[0], w[m * m - 1]);
                if half == 1 {
                    if r[0] != [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])] {
                        problems.push(format!("resample midpoint n={n} m={m}"));
                    }
                    continue;
                }
                if r[0] != a || r[half * half - 1] != b {
                    problems.push(format!("resample corners n={n} m={m}"));
                }
                let st = (b[1] - a[1]) / (half - 1) as f64;
                if ((r[1][1] - r[0][1]) - st).abs() > 1e-12 || ((r[half][0] - r[0][0]) - st).abs() > 1e-12 {
                    problems.push(format!("resample step n={n} m={m}"));
                }
            }
        }
    }
    let model = randomized(&tiny(4), 4);
    let req = GenRequest { target_side: 9, latent: LatentSource::Prior, seed: 11 };
    let base = Sampler::ema(&model).generate(&req).unwrap();
    let mut fills_ok = true;
    for fill in [-1.0f32, 0.37, 1.0] {
        let mut s = Sampler::ema(&model);
        s.fill = fill;
        fills_ok &= s.generate(&req).unwrap() == base;
    }
    if !fills_ok {
        problems.push("neutral fill changed output".into());
    }
    check(
        problems.is_empty(),
        if problems.is_empty() { "grid corners, steps, resampling and neutral fill exact".into() } else { problems.join("; ") },
    )
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Verdict {
    let mut net = NetworkConfig::with(4, 1, 6);
    net.image_side = 8;
    net.mixture_components = 3;
    net.latent_len = 4;
    net.vae_channels = 4;
    let cfg = TrainConfig { batch_size: 4, seed: 21, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<_> = (0..16).map(|_| noise_image(8, &mut rng)).collect();
    let run = || {
        let mut st = TrainState::new(&net, &cfg).unwrap();
        for s in 0..50 {
            let b = (s * 4) % 16;
            st.train_step(&data[b..b + 4]).unwrap();
        }
        st.to_bytes().unwrap()
    };
    let (a, b) = (run(), run());
    let st = TrainState::from_bytes(&a).unwrap();
    let again = st.to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.spxc");
    st.save(&p).unwrap();
    let loaded = TrainState::load(&p).unwrap();
    let lossless = loaded.model.store == st.model.store && loaded.adam_m == st.adam_m && loaded.adam_v == st.adam_v;
    check(
        a == b && again == a && lossless,
        format!(
            "50-step checkpoints identical: {}; round trip identical: {}; {} bytes",
            a == b,
            again == a && lossless,
            a.len()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn msssim_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let imgs: Vec<_> = (0..500).map(|_| noise_image(28, &mut rng)).collect();
    let cfg = SsimConfig::default();
    let mut self_err: f64 = 0.0;
    let mut asym = 0;
    for i in 0..20 {
        self_err = self_err.max((ms_ssim(&imgs[i], &imgs[i], &cfg).unwrap() - 1.0).abs());
        let j = (i * 7 + 3) % 500;
        asym += (ms_ssim(&imgs[i], &imgs[j], &cfg).unwrap().to_bits() != ms_ssim(&imgs[j], &imgs[i], &cfg).unwrap().to_bits()) as usize;
    }
    let pairs = pair_scores(&imgs, &cfg).unwrap().len();
    check(
        self_err <= 1e-9 && asym == 0 && pairs == 124_750,
        format!("self-score error {self_err:.1e}, asymmetric pairs {asym}, pair count {pairs}"),
    )
}

// 10 -----------------------------------------------------------------------

fn lenet_path() -> PathBuf {
    runs_dir().join("lenet/lenet.spxc")
}

fn lenet() -> Verdict {
    let p = lenet_path();
    let Some(test) = common::mnist_test() else { return Skip("MNIST not available".into()) };
    if !p.exists() {
        return Skip(format!("no classifier at {}", p.display()));
    }
    let net = Lenet::load(&p).unwrap();
    let labels: Vec<u8> = test.iter().map(|i| i.label.unwrap()).collect();
    let acc = net.accuracy(&test, &labels).unwrap();
    let sub = net.accuracy(&test[..1000], &labels[..1000]).unwrap();
    let conf = net.confidence_report(&test[..1000]).unwrap();
    check(
        acc >= 98.5 && conf.mean >= 99.0 && (sub - acc).abs() <= 1.0,
        format!(
            "test accuracy {acc:.2}% (first 1000: {sub:.2}%), confidence {:.2} +- {:.2} on 1000 test images",
            conf.mean, conf.std
        ),
    )
}

// 11 -----------------------------------------------------------------------

fn mnist_msssim() -> Verdict {
    let Some(test) = common::mnist_test() else { return Skip("MNIST not available".into()) };
    let r = ScoreReport::from_values(&pair_scores(&test[..500], &SsimConfig::default()).unwrap());
    check(
        (r.mean - 0.16).abs() <= 0.06 && (r.std - 0.27).abs() <= 0.08,
        format!("{} pairs: mean {:.4}, std {:.4}", r.count, r.mean, r.std),
    )
}

// 12 -----------------------------------------------------------------------

fn history(dir: &Path) -> Option<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(dir.join("train_log.jsonl")).ok()?;
    Some(
        text.lines()
            .filter_map(|l| serde_json::from_str::<EpochRecord>(l).ok())
            .collect(),
    )
}

fn overfit() -> Verdict {
    let dir = runs_dir().join("overfit_16");
    let Some(h) = history(&dir) else { return Skip(format!("no training log in {}", dir.display())) };
    let within: Vec<_> = h.iter().filter(|r| r.step <= 2000).collect();
    let Some(best) = within.iter().map(|r| r.patch_bpd).reduce(f64::min) else {
        return Skip("training log has no epochs".into());
    };
    let last = within.last().unwrap();
    check(
        best < 1.0,
        format!("best epoch patch bpd {best:.4} within {} steps (final {:.4})", last.step, last.patch_bpd),
    )
}

// 13 -----------------------------------------------------------------------

fn metric(dir: &Path, file: &str) -> Option<serde_json::Value> {
    let t = std::fs::read_to_string(dir.join("metrics").join(file)).ok()?;
    serde_json::from_str(&t).ok()
}

fn short_run() -> Verdict {
    let dir = runs_dir().join("small_8x8");
    let Some(h) = history(&dir) else { return Skip(format!("no training log in {}", dir.display())) };
    if h.len() < 20 {
        return Skip(format!("run has {} of 20 epochs", h.len()));
    }
    let val: Vec<f64> = h.iter().filter_map(|r| r.val_bpd).collect();
    let decreasing = val.len() >= 5 && val[..5].windows(2).all(|w| w[1] < w[0]);
    let bpd = std::fs::read_dir(dir.join("metrics"))
        .ok()
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .find(|f| f.starts_with("bpd_") && f.ends_with("_model_28.json"))
        .and_then(|f| metric(&dir, &f));
    let conf = metric(&dir, "confidence_model_28.json");
    let (Some(bpd), Some(conf)) = (bpd, conf) else {
        return Skip("missing bpd or confidence metrics for the 20-epoch model".into());
    };
    let test_bpd = bpd["mean"].as_f64().unwrap_or(f64::NAN);
    let c = conf["mean"].as_f64().unwrap_or(f64::NAN);
    let n = conf["count"].as_u64().unwrap_or(0);
    let first5: Vec<String> = val.iter().take(5).map(|v| format!("{v:.3}")).collect();
    check(
        test_bpd <= 3.0 && decreasing && c >= 60.0 && n == 100,
        format!(
            "test bpd {test_bpd:.4} ({} images); first validation bpds [{}]; confidence {c:.2} over {n} samples",
            bpd["count"],
            first5.join(", ")
        ),
    )
}

// 14 -----------------------------------------------------------------------

fn upscaling() -> Verdict {
    let dir = runs_dir().join("small_8x8/reconstructions");
    let Some(test) = common::mnist_test() else { return Skip("MNIST not available".into()) };
    if !lenet_path().exists() {
        return Skip("no classifier".into());
    }
    let net = Lenet::load(&lenet_path()).unwrap();
    let load = |side: usize| -> Option<Vec<ImageU8>> {
        (0..10)
            .map(|i| spxc::imageio::read_png(&dir.join(format!("{side}x{side}/recon_{i:04}.png"))).ok())
            .collect()
    };
    let (Some(r28), Some(r56), Some(r112)) = (load(28), load(56), load(112)) else {
        return Skip(format!("reconstructions at 28, 56 and 112 not found under {}", dir.display()));
    };
    let labels: Vec<u8> = test[..10].iter().map(|i| i.label.unwrap()).collect();
    let acc = |imgs: &[ImageU8]| {
        let d: Vec<_> = imgs.iter().map(|i| downsample_to_28(i).unwrap()).collect();
        net.accuracy(&d, &labels).unwrap()
    };
    let sides_ok = r56.iter().all(|i| i.side == 56) && r112.iter().all(|i| i.side == 112);
    let (a28, a56, a112) = (acc(&r28), acc(&r56), acc(&r112));
    check(
        sides_ok && a56 >= a28 - 15.0,
        format!("accuracy on 10 reconstructions: 28x28 {a28:.0}%, 56x56 {a56:.0}%, 112x112 {a112:.0}%"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 14] = [
        (1, "causality", causality),
        (2, "likelihood normalization", normalization),
        (3, "kl divergence", kl),
        (4, "gradient checks", gradients),
        (5, "window equivalence", window_equivalence),
        (6, "window maximality", window_maximality),
        (7, "grid and neutral fill", grid),
        (8, "determinism", determinism),
        (9, "ms-ssim properties", msssim_properties),
        (10, "classifier accuracy and confidence", lenet),
        (11, "ms-ssim of mnist test images", mnist_msssim),
        (12, "overfit run", overfit),
        (13, "short real run", short_run),
        (14, "upscaling mechanics", upscaling),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed_properties = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &v {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {id:>2} [{tag}] {name}: {detail}");
        if id <= 9 && !matches!(v, Pass(_)) {
            failed_properties += 1;
        }
    }
    if failed_properties > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
