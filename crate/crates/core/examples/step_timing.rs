//! Times training steps and evaluation windows on real MNIST images.
//!
//! `cargo run --release --example step_timing -- /root/data/mnist`

use std::time::Instant;

use spxc::dataio::MnistFiles;
use spxc::network::NetworkConfig;
use spxc::training::{evaluate_bpd, TrainConfig, TrainState};

fn main() -> spxc::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "/root/data/mnist".into());
    let data = MnistFiles::new(dir).load()?;
    let net = NetworkConfig::small(8);
    let mut st = TrainState::new(&net, &TrainConfig::default())?;
    println!("parameters: {}", st.model.store.count());
    let batch = &data.train[..128];
    for _ in 0..3 {
        let t = Instant::now();
        let l = st.train_step(batch)?;
        println!("step {:.3}s  patch bpd {:.3}", t.elapsed().as_secs_f64(), l.bpd_patch);
    }
    let t = Instant::now();
    let bpd = evaluate_bpd(&st.ema_density(256), &data.test[..20], Some(50), 0)?;
    println!("1000 eval windows {:.3}s  bpd {bpd:.3}", t.elapsed().as_secs_f64());
    Ok(())
}
