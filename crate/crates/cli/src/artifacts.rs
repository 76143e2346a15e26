use std::path::{Path, PathBuf};

use spxc::dataio::ImageU8;
use spxc::eval::Lenet;
use spxc::imageio;
use spxc::training::TrainState;

use crate::config::{CliError, CliResult, RunConfig};

pub fn load_state(path: &Path) -> CliResult<TrainState> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(TrainState::load(path)?)
}

pub fn load_lenet(path: &Path) -> CliResult<Lenet> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "classifier checkpoint not found: {} (run lenet-train first)",
            path.display()
        )));
    }
    Ok(Lenet::load(path)?)
}

pub fn mkdir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

/// PNG metadata: resolved config, build id and any extra fields.
pub fn png_meta(cfg: &RunConfig, extra: serde_json::Value) -> String {
    let mut v = cfg.provenance();
    v["image"] = extra;
    v.to_string()
}

pub fn save_png(path: &Path, img: &ImageU8, meta: &str) -> CliResult<()> {
    Ok(imageio::write_png(path, img, &[("spxc", meta)])?)
}

pub fn save_montage(path: &Path, imgs: &[ImageU8], meta: &str) -> CliResult<()> {
    Ok(imageio::write_montage_png(path, imgs, &[("spxc", meta)])?)
}

pub fn side_dir(out: &Path, kind: &str, side: usize) -> PathBuf {
    out.join(kind).join(format!("{side}x{side}"))
}
