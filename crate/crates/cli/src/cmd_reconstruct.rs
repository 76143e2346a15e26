use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use spxc::dataio::{denormalize_value, normalize, ImageU8};
use spxc::generation::{forward_passes, generate_chunked, image_seed, GenRequest, LatentSource, Sampler};
use spxc::imageio::read_png;
use spxc::network::{vae_decode, vae_encode, LatentCode};

use crate::artifacts::{load_state, mkdir, png_meta, save_montage, save_png, side_dir};
use crate::config::{load_mnist, CliError, CliResult, RunConfig};
use crate::cmd_sample::CHUNK;

/// Where reconstruction inputs come from.
pub enum Inputs {
    Files(Vec<PathBuf>),
    /// The first N MNIST test images.
    MnistTest(usize),
}

pub fn load_inputs(cfg: &RunConfig, inputs: &Inputs) -> CliResult<Vec<ImageU8>> {
    let imgs = match inputs {
        Inputs::Files(paths) => paths
            .iter()
            .map(|p| {
                if !p.exists() {
                    return Err(CliError::Usage(format!("input image not found: {}", p.display())));
                }
                read_png(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            })
            .collect::<CliResult<Vec<_>>>()?,
        Inputs::MnistTest(n) => {
            let mut t = load_mnist(cfg)?.test;
            t.truncate(*n);
            t
        }
    };
    if let Some(bad) = imgs.iter().find(|i| i.side != cfg.network.image_side) {
        return Err(CliError::Usage(format!(
            "inputs must be {0}x{0}, got {1}x{1}",
            cfg.network.image_side, bad.side
        )));
    }
    Ok(imgs)
}

/// Posterior-mean reconstructions of `imgs` at `side`.
pub fn reconstruct_all(sampler: &Sampler<'_>, imgs: &[ImageU8], side: usize, seed: u64) -> CliResult<Vec<ImageU8>> {
    let reqs: Vec<_> = imgs
        .iter()
        .enumerate()
        .map(|(i, x)| GenRequest {
            target_side: side,
            latent: LatentSource::PosteriorMean(x.clone()),
            seed: image_seed(seed, i as u64),
        })
        .collect();
    Ok(generate_chunked(sampler, &reqs, CHUNK)?)
}

pub fn run(cfg: &RunConfig, checkpoint: Option<&Path>, inputs: &Inputs, sides: &[usize]) -> CliResult<()> {
    let ck = cfg.model_checkpoint(checkpoint);
    let state = load_state(&ck)?;
    let model = &state.model;
    let imgs = load_inputs(cfg, inputs)?;
    if imgs.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    let sampler = Sampler::ema(model);
    let seed = cfg.train.seed;
    let out = cfg.out_dir().join("reconstructions");
    mkdir(&out)?;

    let xs: Vec<_> = imgs.iter().map(normalize).collect();
    let post = vae_encode(model, &sampler.params, &xs)?;
    let zs: Vec<_> = post.into_iter().map(|p| LatentCode { z: p.mu }).collect();
    let dec = vae_decode(model, &sampler.params, &zs)?;
    let vae_imgs: Vec<ImageU8> = dec
        .iter()
        .map(|d| ImageU8::new(d.h, d.means.iter().map(|&m| denormalize_value(m)).collect()))
        .collect::<spxc::Result<_>>()?;
    for (i, (x, v)) in imgs.iter().zip(&vae_imgs).enumerate() {
        save_png(&out.join(format!("input_{i:04}.png")), x, &png_meta(cfg, json!({"kind": "input", "index": i})))?;
        let meta = png_meta(cfg, json!({"kind": "vae-decode", "index": i, "checkpoint": ck}));
        save_png(&out.join(format!("vae_{i:04}.png")), v, &meta)?;
    }

    let per_pass = {
        let t = Instant::now();
        reconstruct_all(&sampler, &imgs[..1], model.cfg.patch_side, seed)?;
        t.elapsed().as_secs_f64() / forward_passes(model.cfg.patch_side) as f64
    };
    for &side in sides {
        let est = per_pass * forward_passes(side) as f64 * (imgs.len() as f64 / CHUNK as f64).ceil().max(1.0);
        eprintln!(
            "side {side}: {} forward passes per image, estimated {:.0} s",
            forward_passes(side),
            est
        );
        let rec = reconstruct_all(&sampler, &imgs, side, seed)?;
        let dir = side_dir(&out, "", side);
        mkdir(&dir)?;
        for (i, r) in rec.iter().enumerate() {
            let meta = png_meta(cfg, json!({"kind": "reconstruction", "index": i, "side": side, "checkpoint": ck}));
            save_png(&dir.join(format!("recon_{i:04}.png")), r, &meta)?;
        }
        let meta = png_meta(cfg, json!({"kind": "montage", "side": side, "checkpoint": ck}));
        save_montage(&dir.join("montage.png"), &rec, &meta)?;
    }
    crate::write_json(
        &out.join("reconstructions.json"),
        &json!({"run": cfg.provenance(), "checkpoint": ck, "sides": sides, "count": imgs.len(), "seed": seed}),
    )?;
    println!("wrote reconstructions of {} images to {}", imgs.len(), out.display());
    Ok(())
}

