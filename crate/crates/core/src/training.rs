//! Joint VAE + PixelCNN optimization: Adam with coupled L2, EMA shadows,
//! bits/dim validation, early stopping and resumable checkpoints.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataio::{make_grid, normalize, sample_origin, all_patch_origins, CoordGrid, ImageF, ImageU8, PatchPair};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::losses::{bits_per_dim, LossBreakdown};
use crate::network::{image_tensor, vae_encode, Ctx, Dropout, Group, LatentCode, Model, NetworkConfig, ParamKind};
use crate::par;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Joint,
    PretrainVaeThenPcnn,
}

/// Which losses and parameters a step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Joint,
    VaeOnly,
    PcnnOnly,
}

fn d_batch() -> usize {
    128
}
fn d_lr0() -> f64 {
    0.001
}
fn d_decay() -> f64 {
    0.999995
}
fn d_dropout() -> f64 {
    0.5
}
fn d_l2() -> f64 {
    1e-4
}
fn d_ema() -> f64 {
    0.9995
}
fn d_patience() -> usize {
    100
}
fn d_max_epochs() -> usize {
    100_000
}
fn d_pretrain() -> usize {
    10
}
fn d_val_windows() -> usize {
    50
}
fn d_val_count() -> usize {
    5000
}
fn d_mode() -> TrainMode {
    TrainMode::Joint
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_decay")]
    pub lr_decay_per_step: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_l2")]
    pub l2: f64,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    #[serde(default = "d_patience")]
    pub patience_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mode")]
    pub mode: TrainMode,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    /// VAE-only epochs before the PixelCNN phase in pretrain mode.
    #[serde(default = "d_pretrain")]
    pub pretrain_epochs: usize,
    /// Training images held out for validation.
    #[serde(default = "d_val_count")]
    pub validation_count: usize,
    /// Validation images scored per epoch (all when absent).
    #[serde(default)]
    pub validation_images: Option<usize>,
    #[serde(default = "d_val_windows")]
    pub validation_windows: usize,
    /// Stop (after checkpointing) once this many total steps are done.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0, 1], got {v}")))
            }
        };
        unit("lr0", self.lr0)?;
        unit("lr_decay_per_step", self.lr_decay_per_step)?;
        unit("ema_decay", self.ema_decay)?;
        unit("l2", self.l2)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.patience_epochs == 0 {
            return Err(Error::Config("patience_epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.validation_windows == 0 {
            return Err(Error::Config("batch_size and validation_windows must be positive".into()));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr0 · decay^step`.
pub fn learning_rate(lr0: f64, decay: f64, step: u64) -> f64 {
    lr0 * decay.powf(step as f64)
}

/// One Adam update with the L2 term `l2·p` folded into the gradient.
/// `t` is the 1-based update count of this tensor.
pub fn adam_update(p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], lr: f64, t: u64, l2: f64) {
    let c1 = 1.0 - ADAM_BETA1.powf(t as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(t as f64);
    for i in 0..p.len() {
        let pi = p[i] as f64;
        let gi = g[i] as f64 + l2 * pi;
        let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
        let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        p[i] = (pi - lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS)) as f32;
    }
}

/// Patience-based stopping on a value where lower is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records one epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if self.best.is_none_or(|b| value < b) {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

/// Runs `epoch(i)` from `first` until the stopper fires or `max` epochs
/// have been run in total. Returns the number of epochs run by this call.
pub fn run_epochs<F>(stopper: &mut EarlyStopping, first: usize, max: usize, mut epoch: F) -> Result<usize>
where
    F: FnMut(usize, bool) -> Result<f64>,
{
    let mut ran = 0;
    for e in first..max {
        let v = epoch(e, false)?;
        ran += 1;
        let (improved, stop) = stopper.observe(e, v);
        if improved {
            epoch(e, true)?;
        }
        if stop {
            break;
        }
    }
    Ok(ran)
}

/// Anything that assigns a negative log-likelihood to image windows.
pub trait PatchDensity {
    fn patch_side(&self) -> usize;
    /// NLL in nats of each `(image index, origin)` window.
    fn window_nll(&self, images: &[ImageU8], windows: &[(usize, (usize, usize))]) -> Result<Vec<f64>>;
}

/// Uniform distribution over bytes: `ln 256` nats per pixel.
pub struct UniformDensity {
    pub m: usize,
}

impl PatchDensity for UniformDensity {
    fn patch_side(&self) -> usize {
        self.m
    }

    fn window_nll(&self, _: &[ImageU8], windows: &[(usize, (usize, usize))]) -> Result<Vec<f64>> {
        Ok(vec![(self.m * self.m) as f64 * 256f64.ln(); windows.len()])
    }
}

/// The PixelCNN under a given parameter set, conditioned on each image's
/// posterior mean.
pub struct ModelDensity<'a> {
    pub model: &'a Model,
    pub params: &'a [Tensor<f32>],
    pub batch: usize,
}

impl ModelDensity<'_> {
    fn latents(&self, images: &[ImageU8], needed: &[usize]) -> Result<Vec<Option<LatentCode>>> {
        let mut out = vec![None; images.len()];
        if !self.model.cfg.use_latent {
            return Ok(out);
        }
        for chunk in needed.chunks(self.batch.max(1)) {
            let xs: Vec<ImageF> = chunk.iter().map(|&i| normalize(&images[i])).collect();
            let post = vae_encode(self.model, self.params, &xs)?;
            for (&i, p) in chunk.iter().zip(post) {
                out[i] = Some(LatentCode { z: p.mu });
            }
        }
        Ok(out)
    }
}

impl PatchDensity for ModelDensity<'_> {
    fn patch_side(&self) -> usize {
        self.model.cfg.patch_side
    }

    fn window_nll(&self, images: &[ImageU8], windows: &[(usize, (usize, usize))]) -> Result<Vec<f64>> {
        let m = self.patch_side();
        let mut needed: Vec<usize> = windows.iter().map(|w| w.0).collect();
        needed.sort_unstable();
        needed.dedup();
        let z = self.latents(images, &needed)?;
        let n = images.first().ok_or(Error::EmptyDataset)?.side;
        let grid = make_grid(n)?;
        let k = self.model.cfg.mixture_components;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(self.batch.max(1)) {
            let mut patches = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len() * m * m);
            for &(i, origin) in chunk {
                patches.push(PatchPair::extract(&normalize(&images[i]), &grid, origin, m)?);
                targets.extend(images[i].window(origin, m));
            }
            let mut ctx = Ctx::eval(self.params);
            let zv = if self.model.cfg.use_latent {
                let codes: Vec<LatentCode> = chunk.iter().map(|w| z[w.0].clone().expect("latent")).collect();
                Some(ctx.g.constant(crate::network::latent_tensor(&codes)?))
            } else {
                None
            };
            let o = self.model.pcnn_graph(&mut ctx, &patches, zv)?;
            let nll = ctx.g.dlm_nll(o, k, &targets);
            out.extend(ctx.g.value(nll).data.iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

/// Windows scored for image `i`: all of them, or a seeded subsample.
pub fn eval_windows(n: usize, m: usize, subsample: Option<usize>, seed: u64, i: usize) -> Vec<(usize, usize)> {
    let all = all_patch_origins(n, m);
    match subsample {
        Some(k) if k < all.len() => {
            let mut rng = stream_rng(seed ^ 0x7661_6c69_6461_7465, i as u64);
            let mut idx = rand::seq::index::sample(&mut rng, all.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|j| all[j]).collect()
        }
        _ => all,
    }
}

/// Mean bits/dim over all (or a seeded subsample of) window positions.
pub fn evaluate_bpd<D: PatchDensity>(density: &D, images: &[ImageU8], subsample: Option<usize>, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = density.patch_side();
    let n = images[0].side;
    let mut total = Vec::new();
    for (c, chunk) in images.chunks(64).enumerate() {
        let windows: Vec<(usize, (usize, usize))> = (0..chunk.len())
            .flat_map(|j| {
                eval_windows(n, m, subsample, seed, c * 64 + j)
                    .into_iter()
                    .map(move |o| (j, o))
            })
            .collect();
        total.extend(density.window_nll(chunk, &windows)?);
    }
    let count = total.len();
    let mean = par::compensated_sum(total) / count as f64;
    Ok(bits_per_dim(mean, m * m))
}

/// Splits the last `count` images off as a validation set.
pub fn split_validation(mut images: Vec<ImageU8>, count: usize) -> Result<(Vec<ImageU8>, Vec<ImageU8>)> {
    if count == 0 || count >= images.len() {
        return Err(Error::Config(format!(
            "validation_count {count} must be in 1..{}",
            images.len()
        )));
    }
    let val = images.split_off(images.len() - count);
    Ok((images, val))
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Running sums for the current epoch's training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAcc {
    pub patch_nll: f64,
    pub recon_nll: f64,
    pub kl: f64,
    pub batches: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub phase: Phase,
    pub patch_bpd: f64,
    pub recon_nll: f64,
    pub kl: f64,
    pub val_bpd: Option<f64>,
}

/// Everything besides tensors needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    /// Adam update count per parameter tensor.
    pub updates: Vec<u64>,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub phase: Phase,
    pub acc: EpochAcc,
    pub stopper: EarlyStopping,
    pub history: Vec<EpochRecord>,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradNorms {
    pub pcnn: f64,
    pub vae: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
    train: TrainConfig,
    progress: Progress,
    #[serde(default)]
    run: Option<serde_json::Value>,
}

pub struct TrainState {
    pub train: TrainConfig,
    pub model: Model,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
    pub progress: Progress,
    pub last_grad_norms: GradNorms,
    /// Caller metadata stored verbatim in checkpoints.
    pub provenance: Option<serde_json::Value>,
    grid: CoordGrid,
}

impl TrainState {
    pub fn new(net: &NetworkConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = Model::new(net, train.seed)?;
        let zeros: Vec<Tensor<f32>> = model.store.values.iter().map(|t| Tensor::zeros(t.shape)).collect();
        let phase = match (train.mode, net.use_latent) {
            (TrainMode::Joint, _) => Phase::Joint,
            (TrainMode::PretrainVaeThenPcnn, true) => Phase::VaeOnly,
            (TrainMode::PretrainVaeThenPcnn, false) => {
                return Err(Error::Config("pretraining needs a model with a latent code".into()))
            }
        };
        Ok(TrainState {
            train: train.clone(),
            progress: Progress {
                step: 0,
                updates: vec![0; zeros.len()],
                epoch: 0,
                batch_in_epoch: 0,
                phase,
                acc: EpochAcc::default(),
                stopper: EarlyStopping::new(train.patience_epochs),
                history: Vec::new(),
                finished: false,
            },
            adam_m: zeros.clone(),
            adam_v: zeros,
            last_grad_norms: GradNorms::default(),
            provenance: None,
            grid: make_grid(net.image_side)?,
            model,
        })
    }

    pub fn net(&self) -> &NetworkConfig {
        &self.model.cfg
    }

    /// Learning rate for the next step.
    pub fn lr(&self) -> f64 {
        learning_rate(self.train.lr0, self.train.lr_decay_per_step, self.progress.step)
    }

    fn trainable(&self) -> Vec<bool> {
        match self.progress.phase {
            Phase::Joint => self.model.mask(&[Group::PixelCnn, Group::Vae]),
            Phase::VaeOnly => self.model.mask(&[Group::Vae]),
            Phase::PcnnOnly => self.model.mask(&[Group::PixelCnn]),
        }
    }

    /// Builds the mean batch loss in `ctx`, drawing patch origins and
    /// reparameterization noise from `rng`; returns `(loss, breakdown)`.
    pub fn batch_loss<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        batch: &[ImageU8],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossBreakdown)> {
        let net = &self.model.cfg;
        let (n, m) = (net.image_side, net.patch_side);
        let b = batch.len();
        let phase = self.progress.phase;
        let xs: Vec<ImageF> = batch.iter().map(normalize).collect();
        let origins = (0..b).map(|_| sample_origin(n, m, rng)).collect::<Result<Vec<_>>>()?;
        let mut parts = Vec::new();
        let mut sums = [0.0f64; 3];

        let z = if net.use_latent {
            let vae = self.model.vae()?;
            let l = net.latent_len;
            let x = ctx.g.constant(image_tensor(&xs)?);
            let (mu, lv) = vae.encode(ctx, x);
            let eps: Vec<T> = (0..l * b).map(|_| T::f(StandardNormal.sample(&mut *rng))).collect();
            let half = ctx.g.scale(lv, 0.5);
            let sd = ctx.g.exp(half);
            let noise = ctx.g.const_mul(sd, Tensor::from_vec([l, b, 1, 1], eps));
            let z = ctx.g.add(mu, noise);
            if phase != Phase::PcnnOnly {
                let recon = vae.decode(ctx, z);
                let bytes: Vec<u8> = batch.iter().flat_map(|i| i.pixels.iter().copied()).collect();
                let rn = ctx.g.dlm_nll(recon, 1, &bytes);
                let kl = ctx.g.kl_gauss(mu, lv);
                sums[1] = ctx.g.value(rn).data.iter().map(|v| v.to_f()).sum();
                sums[2] = ctx.g.value(kl).data.iter().map(|v| v.to_f()).sum();
                parts.push(rn);
                parts.push(kl);
            }
            Some(z)
        } else {
            None
        };

        if phase != Phase::VaeOnly {
            let patches = xs
                .iter()
                .zip(&origins)
                .map(|(x, &o)| PatchPair::extract(x, &self.grid, o, m))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<u8> = batch.iter().zip(&origins).flat_map(|(img, &o)| img.window(o, m)).collect();
            let out = self.model.pcnn_graph(ctx, &patches, z)?;
            let pn = ctx.g.dlm_nll(out, net.mixture_components, &targets);
            sums[0] = ctx.g.value(pn).data.iter().map(|v| v.to_f()).sum();
            parts.push(pn);
        }

        let bf = b as f64;
        let losses = LossBreakdown::new(sums[0] / bf, sums[1] / bf, sums[2] / bf, m * m);
        losses.check_finite()?;
        let mut total = ctx.g.sum(parts[0]);
        for &p in &parts[1..] {
            let s = ctx.g.sum(p);
            total = ctx.g.add(total, s);
        }
        Ok((ctx.g.scale(total, 1.0 / bf), losses))
    }

    /// One optimizer step on `batch` (one random patch per image).
    pub fn train_step(&mut self, batch: &[ImageU8]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch.len() > self.train.batch_size {
            return Err(Error::InvalidArgument(format!(
                "batch of {} exceeds batch_size {}",
                batch.len(),
                self.train.batch_size
            )));
        }
        let n = self.model.cfg.image_side;
        if let Some(bad) = batch.iter().find(|i| i.side != n) {
            return Err(Error::Shape(format!("{0}x{0} image in a {n}x{n} run", bad.side)));
        }
        let step = self.progress.step;
        let mut rng = stream_rng(self.train.seed, 2 * step);
        let dropout = Dropout {
            rate: self.train.dropout,
            rng: stream_rng(self.train.seed, 2 * step + 1),
        };
        let trainable = self.trainable();
        let (losses, grads) = {
            let mut ctx = Ctx::train(&self.model.store.values, trainable, Some(dropout));
            let (loss, losses) = self.batch_loss(&mut ctx, batch, &mut rng)?;
            let mut g = ctx.g.backward(loss);
            (losses, ctx.param_grads(&mut g))
        };

        let lr = self.lr();
        let mut norms = [0.0f64; 2];
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let spec = &self.model.store.specs[i];
            let sq: f64 = g.data.iter().map(|&v| (v as f64) * (v as f64)).sum();
            norms[(spec.group == Group::Vae) as usize] += sq;
            let l2 = if spec.kind == ParamKind::Kernel { self.train.l2 } else { 0.0 };
            self.progress.updates[i] += 1;
            adam_update(
                &mut self.model.store.values[i].data,
                &mut self.adam_m[i].data,
                &mut self.adam_v[i].data,
                &g.data,
                lr,
                self.progress.updates[i],
                l2,
            );
        }
        if !self.model.store.values.iter().all(|t| t.all_finite()) {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        self.model.store.update_ema(self.train.ema_decay);
        self.last_grad_norms = GradNorms {
            pcnn: norms[0].sqrt(),
            vae: norms[1].sqrt(),
        };
        self.progress.step += 1;
        Ok(losses)
    }

    /// VAE-only epochs, after which the VAE is frozen.
    pub fn pretrain_vae(&mut self, train: &[ImageU8], epochs: usize) -> Result<()> {
        if self.progress.phase != Phase::VaeOnly {
            return Err(Error::Config("pretrain_vae needs mode pretrain-vae-then-pcnn".into()));
        }
        for _ in 0..epochs {
            for batch in self.epoch_batches(train.len()) {
                let imgs: Vec<ImageU8> = batch.iter().map(|&i| train[i].clone()).collect();
                self.train_step(&imgs)?;
            }
            self.progress.epoch += 1;
        }
        self.progress.phase = Phase::PcnnOnly;
        Ok(())
    }

    /// Shuffled batch indices for the current epoch.
    pub fn epoch_batches(&self, count: usize) -> Vec<Vec<usize>> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = stream_rng(self.train.seed ^ 0x6570_6f63_6873_6866, self.progress.epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(self.train.batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn ema_density(&self, batch: usize) -> ModelDensity<'_> {
        ModelDensity {
            model: &self.model,
            params: &self.model.store.ema,
            batch,
        }
    }

    /// Validation bits/dim with EMA parameters on the fixed subsample.
    pub fn validation_bpd(&self, val: &[ImageU8]) -> Result<f64> {
        let k = self.train.validation_images.unwrap_or(val.len()).min(val.len());
        evaluate_bpd(
            &self.ema_density(256),
            &val[..k],
            Some(self.train.validation_windows),
            self.train.seed,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            network: self.model.cfg.clone(),
            train: self.train.clone(),
            progress: self.progress.clone(),
            run: self.provenance.clone(),
        };
        let store = &self.model.store;
        let mut tensors = Vec::with_capacity(4 * store.len());
        for (prefix, set) in [
            ("param", &store.values),
            ("ema", &store.ema),
            ("adam_m", &self.adam_m),
            ("adam_v", &self.adam_v),
        ] {
            for (spec, t) in store.specs.iter().zip(set.iter()) {
                tensors.push((format!("{prefix}/{}", spec.name), t));
            }
        }
        checkpoint::encode(&header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = checkpoint::decode(bytes)?;
        let header: CheckpointHeader = serde_json::from_value(c.conf.clone())?;
        let mut st = TrainState::new(&header.network, &header.train)?;
        if header.progress.updates.len() != st.model.store.len() {
            return Err(Error::Format("parameter count differs from the stored config".into()));
        }
        let names: Vec<String> = st.model.store.specs.iter().map(|s| s.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let shape = st.model.store.specs[i].shape;
            for (prefix, slot) in [
                ("param", &mut st.model.store.values[i]),
                ("ema", &mut st.model.store.ema[i]),
                ("adam_m", &mut st.adam_m[i]),
                ("adam_v", &mut st.adam_v[i]),
            ] {
                let t = c.take(&format!("{prefix}/{name}"))?;
                if t.shape != shape {
                    return Err(Error::Shape(format!("{prefix}/{name}: stored {:?}, expected {shape:?}", t.shape)));
                }
                *slot = t;
            }
        }
        st.progress = header.progress;
        st.provenance = header.run;
        Ok(st)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TrainState::from_bytes(&bytes)
    }

    /// Trains epoch by epoch until early stopping, `max_epochs`, or
    /// `opts.max_steps`. Resumes from the current progress.
    pub fn train_loop(&mut self, train: &[ImageU8], val: &[ImageU8], opts: &LoopOptions) -> Result<()> {
        if train.is_empty() || (val.is_empty() && self.progress.phase != Phase::VaeOnly) {
            return Err(Error::EmptyDataset);
        }
        let mut log = match opts.log_path() {
            Some(p) => Some(open_log(p, self.provenance.as_ref())?),
            None => None,
        };
        let mut timing = match opts.timing_path() {
            Some(p) => Some(open_log(p, None)?),
            None => None,
        };
        let max_steps = match (opts.max_steps, self.train.max_steps) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        while !self.progress.finished && self.progress.epoch < self.train.max_epochs {
            let started = Instant::now();
            let batches = self.epoch_batches(train.len());
            while self.progress.batch_in_epoch < batches.len() {
                if max_steps.is_some_and(|s| self.progress.step >= s) {
                    if let Some(p) = opts.last_path() {
                        self.save(&p)?;
                    }
                    return Ok(());
                }
                let imgs: Vec<ImageU8> = batches[self.progress.batch_in_epoch].iter().map(|&i| train[i].clone()).collect();
                let l = self.train_step(&imgs)?;
                let acc = &mut self.progress.acc;
                acc.patch_nll += l.patch_nll;
                acc.recon_nll += l.recon_nll;
                acc.kl += l.kl;
                acc.batches += 1;
                self.progress.batch_in_epoch += 1;
                if let (Some(every), Some(p)) = (opts.checkpoint_every, opts.last_path()) {
                    if self.progress.step % every == 0 {
                        self.save(&p)?;
                    }
                }
                if opts.verbose && self.progress.step % 50 == 0 {
                    eprintln!(
                        "epoch {} step {} patch_bpd {:.4} recon {:.2} kl {:.2}",
                        self.progress.epoch, self.progress.step, l.bpd_patch, l.recon_nll, l.kl
                    );
                }
            }
            self.finish_epoch(val, opts, log.as_mut(), timing.as_mut(), started)?;
        }
        self.progress.finished = true;
        if let Some(p) = opts.last_path() {
            self.save(&p)?;
        }
        Ok(())
    }

    fn finish_epoch(
        &mut self,
        val: &[ImageU8],
        opts: &LoopOptions,
        log: Option<&mut File>,
        timing: Option<&mut File>,
        started: Instant,
    ) -> Result<()> {
        let m = self.model.cfg.patch_side;
        let acc = std::mem::take(&mut self.progress.acc);
        let nb = acc.batches.max(1) as f64;
        let phase = self.progress.phase;
        let val_bpd = if phase == Phase::VaeOnly {
            None
        } else {
            Some(self.validation_bpd(val)?)
        };
        let rec = EpochRecord {
            epoch: self.progress.epoch,
            step: self.progress.step,
            lr: self.lr(),
            phase,
            patch_bpd: bits_per_dim(acc.patch_nll / nb, m * m),
            recon_nll: acc.recon_nll / nb,
            kl: acc.kl / nb,
            val_bpd,
        };
        if opts.verbose {
            eprintln!("{}", serde_json::to_string(&rec)?);
        }
        if let Some(f) = log {
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(opts.log_path().unwrap(), e))?;
        }
        if let Some(f) = timing {
            let t = serde_json::json!({"epoch": rec.epoch, "wall_time": started.elapsed().as_secs_f64()});
            writeln!(f, "{t}").map_err(|e| Error::io(opts.timing_path().unwrap(), e))?;
        }
        self.progress.history.push(rec);
        self.progress.epoch += 1;
        self.progress.batch_in_epoch = 0;
        if phase == Phase::VaeOnly {
            if self.progress.epoch >= self.train.pretrain_epochs {
                self.progress.phase = Phase::PcnnOnly;
            }
        } else if let Some(v) = val_bpd {
            let (improved, stop) = self.progress.stopper.observe(self.progress.epoch - 1, v);
            if improved {
                if let Some(p) = opts.best_path() {
                    self.save(&p)?;
                }
            }
            self.progress.finished = stop;
        }
        if let Some(p) = opts.last_path() {
            self.save(&p)?;
        }
        Ok(())
    }
}

/// Opens a JSONL file for appending; a new file starts with a
/// `{"run": header}` line when a header is given.
fn open_log(path: PathBuf, header: Option<&serde_json::Value>) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = std::fs::metadata(&path).map_or(true, |m| m.len() == 0);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if let (true, Some(h)) = (fresh, header) {
        writeln!(f, "{}", serde_json::json!({ "run": h })).map_err(|e| Error::io(&path, e))?;
    }
    Ok(f)
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Directory for `last.spxc`, `best.spxc` and `train_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Also checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Return (after checkpointing) once this many total steps are done.
    pub max_steps: Option<u64>,
    pub verbose: bool,
}

impl LoopOptions {
    pub fn last_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("last.spxc"))
    }
    pub fn best_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("best.spxc"))
    }
    pub fn log_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("train_log.jsonl"))
    }
    /// Wall-clock times live apart from the deterministic log.
    pub fn timing_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("train_log.timing.jsonl"))
    }
}
