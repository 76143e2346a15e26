use std::path::Path;

use clap::ValueEnum;
use serde_json::json;
use spxc::eval::{downsample_to_28, msssim_pair_report, Lenet, Metric, ScoreReport, SsimConfig};
use spxc::generation::{generate_chunked, Sampler};
use spxc::training::evaluate_bpd;

use crate::artifacts::{load_lenet, load_state, mkdir, png_meta, save_montage};
use crate::cmd_reconstruct::reconstruct_all;
use crate::cmd_sample::{prior_requests, CHUNK};
use crate::config::{load_mnist, CliError, CliResult, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricKind {
    Bpd,
    Msssim,
    Confidence,
    Accuracy,
}

pub struct EvalOptions<'a> {
    pub checkpoint: Option<&'a Path>,
    pub lenet: Option<&'a Path>,
    pub count: Option<usize>,
    pub side: usize,
    /// Score all windows of every image (bpd).
    pub exhaustive: bool,
    /// Windows per image when not exhaustive (bpd).
    pub windows: Option<usize>,
    /// Score real test images instead of model output (msssim, confidence, accuracy).
    pub real: bool,
}

fn classifier(cfg: &RunConfig, path: Option<&Path>) -> CliResult<Lenet> {
    let p = cfg.lenet_path(path);
    if p.exists() || path.is_some() || cfg.lenet_checkpoint.is_some() {
        return load_lenet(&p);
    }
    eprintln!("no classifier at {}; training one", p.display());
    crate::cmd_lenet::train(cfg, &p, false)
}

fn to_28(imgs: &[spxc::dataio::ImageU8]) -> CliResult<Vec<spxc::dataio::ImageU8>> {
    Ok(imgs.iter().map(downsample_to_28).collect::<spxc::Result<_>>()?)
}

pub fn run(cfg: &RunConfig, kind: MetricKind, o: &EvalOptions<'_>) -> CliResult<()> {
    let seed = cfg.train.seed;
    let ck = cfg.model_checkpoint(o.checkpoint);
    let model_ck = (!o.real || kind == MetricKind::Bpd).then(|| ck.display().to_string());
    let state = match &model_ck {
        Some(_) => Some(load_state(&ck)?),
        None => None,
    };
    let out = cfg.out_dir().join("metrics");
    mkdir(&out)?;
    let test = || -> CliResult<Vec<spxc::dataio::ImageU8>> { Ok(load_mnist(cfg)?.test) };
    let (name, report, resolution) = match kind {
        MetricKind::Bpd => {
            let st = state.as_ref().unwrap();
            let mut imgs = test()?;
            if let Some(n) = o.count {
                imgs.truncate(n);
            }
            let windows = if o.exhaustive { None } else { Some(o.windows.unwrap_or(cfg.train.validation_windows)) };
            let bpd = evaluate_bpd(&st.ema_density(256), &imgs, windows, seed)?;
            let tag = if o.exhaustive { "bpd_exhaustive".to_string() } else { format!("bpd_{}w", windows.unwrap()) };
            (tag, ScoreReport { mean: bpd, std: f64::NAN, count: imgs.len() }, st.model.cfg.image_side)
        }
        MetricKind::Msssim => {
            let count = o.count.unwrap_or(500);
            let imgs = match &state {
                Some(st) => generate_chunked(&Sampler::ema(&st.model), &prior_requests(count, o.side, seed), CHUNK)?,
                None => {
                    let mut t = test()?;
                    t.truncate(count);
                    t
                }
            };
            if imgs.len() != count {
                return Err(CliError::Usage(format!("only {} images available", imgs.len())));
            }
            if state.is_some() {
                let meta = png_meta(cfg, json!({"kind": "msssim-samples", "side": o.side}));
                save_montage(&out.join(format!("msssim_samples_{}.png", o.side)), &imgs, &meta)?;
            }
            let r = msssim_pair_report(&imgs, Some(count), &SsimConfig::default())?;
            ("msssim".into(), r, imgs[0].side)
        }
        MetricKind::Confidence => {
            let count = o.count.unwrap_or(1000);
            let imgs = match &state {
                Some(st) => generate_chunked(&Sampler::ema(&st.model), &prior_requests(count, o.side, seed), CHUNK)?,
                None => {
                    let mut t = test()?;
                    t.truncate(count);
                    t
                }
            };
            if state.is_some() {
                let meta = png_meta(cfg, json!({"kind": "confidence-samples", "side": o.side}));
                save_montage(&out.join(format!("confidence_samples_{}.png", o.side)), &imgs, &meta)?;
            }
            let side = imgs[0].side;
            let net = classifier(cfg, o.lenet)?;
            ("confidence".into(), net.confidence_report(&to_28(&imgs)?)?, side)
        }
        MetricKind::Accuracy => {
            let count = o.count.unwrap_or(1000);
            let mut src = test()?;
            src.truncate(count);
            let labels: Vec<u8> = src.iter().map(|i| i.label.unwrap_or(255)).collect();
            let imgs = match &state {
                Some(st) => reconstruct_all(&Sampler::ema(&st.model), &src, o.side, seed)?,
                None => src,
            };
            if state.is_some() {
                let meta = png_meta(cfg, json!({"kind": "accuracy-reconstructions", "side": o.side}));
                save_montage(&out.join(format!("accuracy_recons_{}.png", o.side)), &imgs, &meta)?;
            }
            let side = imgs[0].side;
            let net = classifier(cfg, o.lenet)?;
            let acc = net.accuracy(&to_28(&imgs)?, &labels)?;
            ("accuracy".into(), ScoreReport { mean: acc, std: f64::NAN, count: imgs.len() }, side)
        }
    };
    let metric = Metric {
        metric: name.clone(),
        count: report.count,
        mean: report.mean,
        std: report.std,
        seed,
        model_checkpoint: model_ck,
        resolution,
    };
    let mut v = serde_json::to_value(&metric).map_err(|e| CliError::Runtime(e.to_string()))?;
    v["run"] = cfg.provenance();
    let src = if o.real { "real" } else { "model" };
    let path = out.join(format!("{name}_{src}_{resolution}.json"));
    crate::write_json(&path, &v)?;
    println!(
        "{name} ({src}, {resolution}x{resolution}, n={}): mean {:.4} std {:.4} -> {}",
        report.count,
        report.mean,
        report.std,
        path.display()
    );
    Ok(())
}
