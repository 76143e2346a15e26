//! Sample-quality metrics: MS-SSIM diversity, LeNet confidence and
//! reconstruction accuracy.

pub mod lenet;
pub mod msssim;

use serde::{Deserialize, Serialize};

use crate::dataio::ImageU8;
use crate::par::compensated_sum;
use crate::{Error, Result};

pub use lenet::{Lenet, LenetConfig, LenetTrainConfig};
pub use msssim::{ms_ssim, msssim_pair_report, pair_scores, SsimConfig, SsimPyramid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl ScoreReport {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return ScoreReport { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = compensated_sum(v.iter().copied()) / n as f64;
        let var = compensated_sum(v.iter().map(|x| (x - mean) * (x - mean))) / n as f64;
        ScoreReport { mean, std: var.sqrt(), count: n }
    }
}

/// Area-average resampling of an `n×n` image (n ≥ 28) to 28×28.
pub fn downsample_to_28(img: &ImageU8) -> Result<ImageU8> {
    downsample_area(img, 28)
}

/// Box filter over each output pixel's footprint, weighting partial
/// source pixels by overlap.
pub fn downsample_area(img: &ImageU8, out: usize) -> Result<ImageU8> {
    let n = img.side;
    if n < out || out == 0 {
        return Err(Error::InvalidArgument(format!("cannot downsample {n}x{n} to {out}x{out}")));
    }
    if n == out {
        return Ok(img.clone());
    }
    // Footprint of output index i is [i·n/out, (i+1)·n/out) in source units;
    // work in units of 1/out so the bounds are integers.
    let weights: Vec<Vec<(usize, f64)>> = (0..out)
        .map(|i| {
            let (lo, hi) = (i * n, (i + 1) * n);
            (lo / out..hi.div_ceil(out))
                .map(|s| {
                    let a = (s * out).max(lo);
                    let b = ((s + 1) * out).min(hi);
                    (s, (b - a) as f64 / n as f64)
                })
                .collect()
        })
        .collect();
    let mut px = Vec::with_capacity(out * out);
    for wr in &weights {
        for wc in &weights {
            let mut acc = 0.0;
            for &(r, a) in wr {
                for &(c, b) in wc {
                    acc += a * b * img.pixels[r * n + c] as f64;
                }
            }
            px.push(acc.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageU8::new(out, px)
}

/// Metrics record written by evaluation commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
    pub model_checkpoint: Option<String>,
    pub resolution: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_of_constant_values() {
        let r = ScoreReport::from_values(&[0.25; 7]);
        assert_eq!((r.mean, r.std, r.count), (0.25, 0.0, 7));
    }

    #[test]
    fn downsample_examples() {
        let x = ImageU8::new(28, (0..784).map(|i| (i % 251) as u8).collect()).unwrap();
        assert_eq!(downsample_to_28(&x).unwrap(), x);
        let c = ImageU8::new(56, vec![93; 56 * 56]).unwrap();
        assert!(downsample_to_28(&c).unwrap().pixels.iter().all(|&v| v == 93));
        let checker = ImageU8::new(
            56,
            (0..56 * 56).map(|i| if ((i / 56) + (i % 56)) % 2 == 0 { 0 } else { 255 }).collect(),
        )
        .unwrap();
        assert!(downsample_to_28(&checker).unwrap().pixels.iter().all(|&v| v == 128));
        assert!(downsample_to_28(&ImageU8::new(20, vec![0; 400]).unwrap()).is_err());
    }

    #[test]
    fn fractional_footprints_preserve_mean() {
        let n = 41;
        let x = ImageU8::new(n, (0..n * n).map(|i| ((i * 37) % 256) as u8).collect()).unwrap();
        let d = downsample_to_28(&x).unwrap();
        let m0 = x.pixels.iter().map(|&v| v as f64).sum::<f64>() / (n * n) as f64;
        let m1 = d.pixels.iter().map(|&v| v as f64).sum::<f64>() / 784.0;
        assert!((m0 - m1).abs() <= 0.5, "{m0} {m1}");
    }
}
