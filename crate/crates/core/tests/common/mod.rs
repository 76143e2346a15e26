#![allow(dead_code)]

use std::path::PathBuf;

use spxc::dataio::{ImageU8, Mnist, MnistFiles};

/// `SPXC_DATA_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("SPXC_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn mnist() -> Option<Mnist> {
    let f = MnistFiles::new(mnist_dir());
    if !f.exists() {
        eprintln!("MNIST not found under {}; skipping", mnist_dir().display());
        return None;
    }
    Some(f.load().expect("MNIST loads"))
}

pub fn mnist_test() -> Option<Vec<ImageU8>> {
    let f = MnistFiles::new(mnist_dir());
    if !f.exists() {
        eprintln!("MNIST not found under {}; skipping", mnist_dir().display());
        return None;
    }
    Some(f.load_test().expect("MNIST test split loads"))
}
