//! Overfits a tiny network on 16 MNIST digits and reports patch bits/dim.
//!
//! `cargo run --release --example overfit -- /root/data/mnist 2000`

use spxc::dataio::MnistFiles;
use spxc::network::NetworkConfig;
use spxc::training::{evaluate_bpd, ModelDensity, TrainConfig, TrainState};

fn main() -> spxc::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "/root/data/mnist".into());
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let imgs = MnistFiles::new(dir).load()?.train[..16].to_vec();
    let ch = std::env::var("CH").ok().and_then(|s| s.parse().ok()).unwrap_or(8);
    let mut net = NetworkConfig::with(8, 1, ch);
    net.vae_channels = 8;
    net.use_latent = std::env::var("NOZ").is_err();
    net.use_coords = std::env::var("NOG").is_err();
    let train = TrainConfig {
        batch_size: 16,
        lr0: std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(0.001),
        dropout: std::env::var("DROPOUT").ok().and_then(|s| s.parse().ok()).unwrap_or(0.5),
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(&net, &train)?;
    for s in 0..steps {
        let l = st.train_step(&imgs)?;
        if s % 100 == 0 || s + 1 == steps {
            let raw = ModelDensity {
                model: &st.model,
                params: &st.model.store.values,
                batch: 512,
            };
            let bpd = evaluate_bpd(&raw, &imgs, None, 0)?;
            println!("step {s}: train {:.3}  eval {bpd:.3}  recon {:.1}  kl {:.2}", l.bpd_patch, l.recon_nll, l.kl);
        }
    }
    Ok(())
}
