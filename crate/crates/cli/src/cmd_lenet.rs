use std::path::Path;

use serde_json::json;
use spxc::eval::{Lenet, LenetConfig};

use crate::config::{load_mnist, CliError, CliResult, RunConfig};

pub fn train(cfg: &RunConfig, out: &Path, verbose: bool) -> CliResult<Lenet> {
    let data = load_mnist(cfg)?;
    let mut net = Lenet::new(&LenetConfig { seed: cfg.lenet.seed, ..Default::default() });
    let losses = net.train(&data.train, &cfg.lenet)?;
    if verbose {
        for (e, l) in losses.iter().enumerate() {
            eprintln!("lenet epoch {e} loss {l:.5}");
        }
    }
    let (imgs, labels): (Vec<_>, Vec<_>) = data.test.iter().map(|i| (i.clone(), i.label.unwrap_or(255))).unzip();
    let full = net.accuracy(&imgs, &labels)?;
    let sub = net.accuracy(&imgs[..1000], &labels[..1000])?;
    net.test_accuracy = Some(full);
    net.save(out, Some(cfg.provenance()))?;
    let summary = json!({
        "run": cfg.provenance(),
        "checkpoint": out,
        "epoch_loss": losses,
        "test_accuracy": full,
        "test_subset_1000_accuracy": sub,
    });
    crate::write_json(&out.with_extension("json"), &summary)?;
    println!("classifier test accuracy {full:.2}% (first 1000: {sub:.2}%), saved to {}", out.display());
    if full < cfg.lenet.target_accuracy {
        return Err(CliError::Runtime(format!(
            "classifier reached {full:.2}% test accuracy, below the {:.2}% target after {} epochs",
            cfg.lenet.target_accuracy, cfg.lenet.epochs
        )));
    }
    Ok(net)
}

pub fn run(cfg: &RunConfig, out: Option<&Path>, verbose: bool) -> CliResult<()> {
    let path = cfg.lenet_path(out);
    train(cfg, &path, verbose).map(|_| ())
}
