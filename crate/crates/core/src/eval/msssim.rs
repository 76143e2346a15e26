//! Multiscale structural similarity between equal-size grayscale images.

use crate::dataio::ImageU8;
use crate::{par, Error, Result};

use super::ScoreReport;

pub const CANONICAL_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    /// One weight per scale, finest first.
    pub weights: Vec<f64>,
    /// Shrink the window (and its sigma proportionally) to fit small scales.
    /// When off, every scale must hold a full window.
    pub shrink_window: bool,
}

impl Default for SsimConfig {
    /// Five canonical scales with window shrinking at the coarse end.
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            weights: CANONICAL_WEIGHTS.to_vec(),
            shrink_window: true,
        }
    }
}

impl SsimConfig {
    /// Two full-window scales with the canonical weight prefix rescaled to sum 1.
    pub fn two_scale() -> Self {
        let s = CANONICAL_WEIGHTS[0] + CANONICAL_WEIGHTS[1];
        SsimConfig {
            weights: vec![CANONICAL_WEIGHTS[0] / s, CANONICAL_WEIGHTS[1] / s],
            shrink_window: false,
            ..Self::default()
        }
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Config("ms-ssim weights must be positive".into()));
        }
        let coarsest = scale_sides(side, self.scales()).last().copied().unwrap_or(0);
        let need = if self.shrink_window { 1 } else { self.window };
        if coarsest < need {
            return Err(Error::InvalidArgument(format!(
                "a {side}x{side} image is too small for {} scales with a {}-pixel window",
                self.scales(),
                self.window
            )));
        }
        Ok(())
    }
}

fn scale_sides(side: usize, scales: usize) -> Vec<usize> {
    let mut v = vec![side];
    for _ in 1..scales {
        let s = *v.last().unwrap();
        v.push(s.div_ceil(2));
    }
    v
}

/// Normalized `size×size` Gaussian; even sizes are centred between pixels.
fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let off = if size % 2 == 0 { 0.5 } else { 0.0 };
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - r + off;
            let x = (i % size) as f64 - r + off;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode weighted window sums of a `side×side` plane.
fn filter(x: &[f64], side: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let o = side - ks + 1;
    let mut out = vec![0.0; o * o];
    for r in 0..o {
        for c in 0..o {
            let mut acc = 0.0;
            for a in 0..ks {
                let row = &x[(r + a) * side + c..(r + a) * side + c + ks];
                for (w, v) in k[a * ks..(a + 1) * ks].iter().zip(row) {
                    acc += w * v;
                }
            }
            out[r * o + c] = acc;
        }
    }
    out
}

/// 2×2 mean then stride 2, reflecting the far edge for odd sides.
fn downsample(x: &[f64], side: usize) -> Vec<f64> {
    let o = side.div_ceil(2);
    let at = |i: usize| if i >= side { 2 * side - 1 - i } else { i };
    let mut out = vec![0.0; o * o];
    for r in 0..o {
        for c in 0..o {
            let (r0, r1, c0, c1) = (2 * r, at(2 * r + 1), 2 * c, at(2 * c + 1));
            out[r * o + c] = 0.25 * (x[r0 * side + c0] + x[r0 * side + c1] + x[r1 * side + c0] + x[r1 * side + c1]);
        }
    }
    out
}

/// Per-image statistics reused across all pairs.
#[derive(Clone, Debug)]
pub struct SsimPyramid {
    levels: Vec<Level>,
}

#[derive(Clone, Debug)]
struct Level {
    side: usize,
    ks: usize,
    kernel: Vec<f64>,
    pixels: Vec<f64>,
    mu: Vec<f64>,
    sq: Vec<f64>,
}

impl SsimPyramid {
    pub fn new(img: &ImageU8, cfg: &SsimConfig) -> Result<Self> {
        cfg.validate(img.side)?;
        let mut side = img.side;
        let mut px: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
        let mut levels = Vec::with_capacity(cfg.scales());
        for s in 0..cfg.scales() {
            let ks = cfg.window.min(side);
            let sigma = if cfg.shrink_window { ks as f64 * cfg.sigma / cfg.window as f64 } else { cfg.sigma };
            let kernel = gaussian(ks, sigma);
            let sq: Vec<f64> = px.iter().map(|v| v * v).collect();
            levels.push(Level {
                side,
                ks,
                mu: filter(&px, side, &kernel, ks),
                sq: filter(&sq, side, &kernel, ks),
                kernel,
                pixels: px.clone(),
            });
            if s + 1 < cfg.scales() {
                px = downsample(&px, side);
                side = side.div_ceil(2);
            }
        }
        Ok(SsimPyramid { levels })
    }
}

fn signed_pow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

/// Score from two precomputed pyramids built with the same `cfg`.
pub fn ms_ssim_pyramids(a: &SsimPyramid, b: &SsimPyramid, cfg: &SsimConfig) -> f64 {
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let last = cfg.scales() - 1;
    let mut score = 1.0;
    for (s, (la, lb)) in a.levels.iter().zip(&b.levels).enumerate() {
        let prod: Vec<f64> = la.pixels.iter().zip(&lb.pixels).map(|(x, y)| x * y).collect();
        let cross = filter(&prod, la.side, &la.kernel, la.ks);
        let n = cross.len() as f64;
        let (mut ssim, mut cs) = (0.0, 0.0);
        for i in 0..cross.len() {
            let (m1, m2) = (la.mu[i], lb.mu[i]);
            let (m11, m22, m12) = (m1 * m1, m2 * m2, m1 * m2);
            let v1 = 2.0 * (cross[i] - m12) + c2;
            let v2 = (la.sq[i] - m11) + (lb.sq[i] - m22) + c2;
            ssim += (2.0 * m12 + c1) * v1 / ((m11 + m22 + c1) * v2);
            cs += v1 / v2;
        }
        let term = if s == last { ssim / n } else { cs / n };
        score *= signed_pow(term, cfg.weights[s]);
    }
    score
}

pub fn ms_ssim(a: &ImageU8, b: &ImageU8, cfg: &SsimConfig) -> Result<f64> {
    if a.side != b.side {
        return Err(Error::Shape(format!("ms-ssim of {}x{0} and {}x{1} images", a.side, b.side)));
    }
    Ok(ms_ssim_pyramids(&SsimPyramid::new(a, cfg)?, &SsimPyramid::new(b, cfg)?, cfg))
}

/// Scores over all unordered pairs of `images`.
pub fn pair_scores(images: &[ImageU8], cfg: &SsimConfig) -> Result<Vec<f64>> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument("ms-ssim pairs need at least two images".into()));
    }
    let side = images[0].side;
    if images.iter().any(|i| i.side != side) {
        return Err(Error::Shape("ms-ssim images differ in size".into()));
    }
    let pyr: Vec<SsimPyramid> = par::map_slice(images, |i| SsimPyramid::new(i, cfg))
        .into_iter()
        .collect::<Result<_>>()?;
    let n = images.len();
    let rows = par::map_range(n, |i| {
        (i + 1..n).map(|j| ms_ssim_pyramids(&pyr[i], &pyr[j], cfg)).collect::<Vec<_>>()
    });
    Ok(rows.into_iter().flatten().collect())
}

/// Mean and std of all `C(N, 2)` pair scores; `expected` pins `N`.
pub fn msssim_pair_report(images: &[ImageU8], expected: Option<usize>, cfg: &SsimConfig) -> Result<ScoreReport> {
    if let Some(e) = expected {
        if images.len() != e {
            return Err(Error::InvalidArgument(format!("expected {e} images, got {}", images.len())));
        }
    }
    Ok(ScoreReport::from_values(&pair_scores(images, cfg)?))
}
