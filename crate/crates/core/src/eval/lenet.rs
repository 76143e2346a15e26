//! Small LeNet-style MNIST classifier: two conv+pool stages, two dense layers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::conv::{Geom, Pad};
use crate::dataio::{normalize, ImageU8};
use crate::graph::Var;
use crate::network::image_tensor;
use crate::network::{Ctx, ParamBuilder, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::training::{adam_update, learning_rate};
use crate::{par, Error, Result};

use super::ScoreReport;

pub const CLASSES: usize = 10;
const SIDE: usize = 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LenetConfig {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for LenetConfig {
    fn default() -> Self {
        LenetConfig { conv1: 8, conv2: 16, hidden: 128, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LenetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_per_step: f64,
    pub l2: f64,
    pub seed: u64,
    /// Accuracy the trained model must reach on the test set.
    pub target_accuracy: f64,
}

impl Default for LenetTrainConfig {
    fn default() -> Self {
        LenetTrainConfig {
            epochs: 8,
            batch_size: 64,
            lr0: 2e-3,
            lr_decay_per_step: 0.9999,
            l2: 0.0,
            seed: 0,
            target_accuracy: 98.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: LenetConfig,
    test_accuracy: Option<f64>,
    run: Option<serde_json::Value>,
}

const KIND: &str = "lenet";

#[derive(Clone, Debug)]
pub struct Lenet {
    pub cfg: LenetConfig,
    pub store: ParamStore,
    ids: [ParamId; 8],
    /// Test accuracy recorded at training time.
    pub test_accuracy: Option<f64>,
}

impl Lenet {
    pub fn new(cfg: &LenetConfig) -> Self {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(cfg.seed));
        let he = 2f64.sqrt();
        let flat = cfg.conv2 * 5 * 5;
        let ids = [
            pb.kernel("conv1.w", [cfg.conv1, 1, 5, 5], he, false),
            pb.bias("conv1.b", cfg.conv1),
            pb.kernel("conv2.w", [cfg.conv2, cfg.conv1, 5, 5], he, false),
            pb.bias("conv2.b", cfg.conv2),
            pb.kernel("fc1.w", [cfg.hidden, flat, 1, 1], he, false),
            pb.bias("fc1.b", cfg.hidden),
            pb.kernel("fc2.w", [CLASSES, cfg.hidden, 1, 1], 1.0, false),
            pb.bias("fc2.b", CLASSES),
        ];
        Lenet { cfg: cfg.clone(), store: pb.finish(), ids, test_accuracy: None }
    }

    fn graph<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let p = |ctx: &mut Ctx<T>, i: usize| ctx.p(self.ids[i]);
        let g1 = Geom::conv(SIDE, SIDE, 5, 5, 1, Pad::same(5, 5));
        let (w, b) = (p(ctx, 0), p(ctx, 1));
        let h = ctx.g.conv(x, w, Some(b), g1);
        let h = ctx.g.relu(h);
        let h = ctx.g.max_pool2(h);
        let g2 = Geom::conv(14, 14, 5, 5, 1, Pad::default());
        let (w, b) = (p(ctx, 2), p(ctx, 3));
        let h = ctx.g.conv(h, w, Some(b), g2);
        let h = ctx.g.relu(h);
        let h = ctx.g.max_pool2(h);
        let h = ctx.g.flatten(h);
        let one = Geom::conv(1, 1, 1, 1, 1, Pad::default());
        let (w, b) = (p(ctx, 4), p(ctx, 5));
        let h = ctx.g.conv(h, w, Some(b), one);
        let h = ctx.g.relu(h);
        let (w, b) = (p(ctx, 6), p(ctx, 7));
        ctx.g.conv(h, w, Some(b), one)
    }

    fn check(images: &[ImageU8]) -> Result<()> {
        if let Some(bad) = images.iter().find(|i| i.side != SIDE) {
            return Err(Error::Shape(format!(
                "classifier expects 28x28 inputs, got {0}x{0}; downsample first",
                bad.side
            )));
        }
        Ok(())
    }

    /// Class logits per image.
    pub fn logits(&self, images: &[ImageU8]) -> Result<Vec<[f64; CLASSES]>> {
        Self::check(images)?;
        let chunks: Vec<&[ImageU8]> = images.chunks(256).collect();
        let out = par::map_slice(&chunks, |c| -> Result<Vec<[f64; CLASSES]>> {
            let xs: Vec<_> = c.iter().map(normalize).collect();
            let mut ctx = Ctx::eval(&self.store.values);
            let x = ctx.g.constant(image_tensor::<f32>(&xs)?);
            let y = self.graph(&mut ctx, x);
            let v = ctx.g.value(y);
            let b = c.len();
            Ok((0..b)
                .map(|i| std::array::from_fn(|k| v.data[k * b + i] as f64))
                .collect())
        });
        Ok(out.into_iter().collect::<Result<Vec<_>>>()?.concat())
    }

    pub fn predict(&self, images: &[ImageU8]) -> Result<Vec<u8>> {
        Ok(self.logits(images)?.iter().map(|l| argmax(l) as u8).collect())
    }

    /// `100 · max softmax` per image.
    pub fn confidences(&self, images: &[ImageU8]) -> Result<Vec<f64>> {
        Ok(self.logits(images)?.iter().map(confidence).collect())
    }

    pub fn confidence_report(&self, images: &[ImageU8]) -> Result<ScoreReport> {
        Ok(ScoreReport::from_values(&self.confidences(images)?))
    }

    /// Percentage of images whose predicted class equals the label.
    pub fn accuracy(&self, images: &[ImageU8], labels: &[u8]) -> Result<f64> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(100.0 * hits as f64 / images.len() as f64)
    }

    /// Adam on softmax cross-entropy; returns the per-epoch mean loss.
    pub fn train(&mut self, train: &[ImageU8], cfg: &LenetTrainConfig) -> Result<Vec<f64>> {
        Self::check(train)?;
        if train.iter().any(|i| i.label.is_none()) {
            return Err(Error::InvalidArgument("training images need labels".into()));
        }
        let mut m: Vec<Tensor<f32>> = self.store.values.iter().map(|t| Tensor::zeros(t.shape)).collect();
        let mut v = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut step = 0u64;
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let xs: Vec<_> = idx.iter().map(|&i| normalize(&train[i])).collect();
                let ys: Vec<u8> = idx.iter().map(|&i| train[i].label.unwrap()).collect();
                let grads = {
                    let mut ctx = Ctx::train(&self.store.values, vec![true; self.store.len()], None);
                    let x = ctx.g.constant(image_tensor::<f32>(&xs)?);
                    let y = self.graph(&mut ctx, x);
                    let per = ctx.g.softmax_xent(y, &ys);
                    let s = ctx.g.sum(per);
                    let loss = ctx.g.scale(s, 1.0 / idx.len() as f64);
                    total += ctx.g.value(s).data[0] as f64;
                    let mut g = ctx.g.backward(loss);
                    ctx.param_grads(&mut g)
                };
                step += 1;
                let lr = learning_rate(cfg.lr0, cfg.lr_decay_per_step, step - 1);
                for (i, g) in grads.into_iter().enumerate() {
                    let Some(g) = g else { continue };
                    let l2 = if self.store.specs[i].kind == ParamKind::Kernel { cfg.l2 } else { 0.0 };
                    adam_update(&mut self.store.values[i].data, &mut m[i].data, &mut v[i].data, &g.data, lr, step, l2);
                }
            }
            if !self.store.values.iter().all(|t| t.all_finite()) {
                return Err(Error::NonFinite("classifier parameters".into()));
            }
            losses.push(total / train.len() as f64);
        }
        self.store.ema = self.store.values.clone();
        Ok(losses)
    }

    pub fn to_bytes(&self, run: Option<serde_json::Value>) -> Result<Vec<u8>> {
        let header = Header {
            kind: KIND.into(),
            config: self.cfg.clone(),
            test_accuracy: self.test_accuracy,
            run,
        };
        let tensors: Vec<(String, &Tensor<f32>)> = self
            .store
            .specs
            .iter()
            .zip(&self.store.values)
            .map(|(s, t)| (s.name.clone(), t))
            .collect();
        checkpoint::encode(&header, &tensors)
    }

    pub fn save(&self, path: &Path, run: Option<serde_json::Value>) -> Result<()> {
        let bytes = self.to_bytes(run)?;
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = checkpoint::decode(bytes)?;
        let h: Header = serde_json::from_value(c.conf.clone())?;
        if h.kind != KIND {
            return Err(Error::Format(format!("checkpoint holds a {:?}, not a classifier", h.kind)));
        }
        let mut net = Lenet::new(&h.config);
        for i in 0..net.store.len() {
            let name = net.store.specs[i].name.clone();
            let t = c.take(&name)?;
            if t.shape != net.store.specs[i].shape {
                return Err(Error::Shape(format!("{name}: stored {:?}", t.shape)));
            }
            net.store.values[i] = t;
        }
        net.store.ema = net.store.values.clone();
        net.test_accuracy = h.test_accuracy;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn argmax(l: &[f64; CLASSES]) -> usize {
    let mut best = 0;
    for k in 1..CLASSES {
        if l[k] > l[best] {
            best = k;
        }
    }
    best
}

/// `100 · max softmax(l)`.
pub fn confidence(l: &[f64; CLASSES]) -> f64 {
    let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = l.iter().map(|x| (x - mx).exp()).sum();
    100.0 / s
}
