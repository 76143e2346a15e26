use std::path::Path;

use serde_json::json;
use spxc::generation::{generate_chunked, image_seed, GenRequest, LatentSource, Sampler};

use crate::artifacts::{load_state, mkdir, png_meta, save_montage, save_png, side_dir};
use crate::config::{CliResult, RunConfig};

pub const CHUNK: usize = 100;

pub fn prior_requests(count: usize, side: usize, seed: u64) -> Vec<GenRequest> {
    (0..count)
        .map(|i| GenRequest {
            target_side: side,
            latent: LatentSource::Prior,
            seed: image_seed(seed, i as u64),
        })
        .collect()
}

pub fn run(cfg: &RunConfig, checkpoint: Option<&Path>, count: usize, side: usize) -> CliResult<()> {
    let ck = cfg.model_checkpoint(checkpoint);
    let state = load_state(&ck)?;
    let seed = cfg.train.seed;
    let reqs = prior_requests(count, side, seed);
    let imgs = generate_chunked(&Sampler::ema(&state.model), &reqs, CHUNK)?;
    let dir = side_dir(&cfg.out_dir(), "samples", side);
    mkdir(&dir)?;
    for (i, (img, r)) in imgs.iter().zip(&reqs).enumerate() {
        let meta = png_meta(cfg, json!({"kind": "prior-sample", "index": i, "seed": r.seed, "checkpoint": ck}));
        save_png(&dir.join(format!("sample_{i:04}.png")), img, &meta)?;
    }
    let meta = png_meta(cfg, json!({"kind": "montage", "count": count, "seed": seed, "checkpoint": ck}));
    save_montage(&dir.join("montage.png"), &imgs, &meta)?;
    crate::write_json(
        &dir.join("samples.json"),
        &json!({
            "run": cfg.provenance(),
            "checkpoint": ck,
            "side": side,
            "seed": seed,
            "image_seeds": reqs.iter().map(|r| r.seed).collect::<Vec<_>>(),
        }),
    )?;
    println!("wrote {count} samples at {side}x{side} to {}", dir.display());
    Ok(())
}
