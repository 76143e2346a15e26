//! The coordinate- and latent-conditioned PixelCNN and its VAE.

mod model;
mod params;
mod pixelcnn;
mod vae;

pub use model::{
    grid_pyramid, image_tensor, latent_tensor, patch_tensor, pcnn_forward, reparameterize, vae_decode, vae_encode, Mode,
    Model, DROPOUT_RATE,
};
pub use params::{Ctx, Dropout, Group, ParamBuilder, ParamId, ParamKind, ParamSpec, ParamStore};
pub use pixelcnn::{gated_condition, GateProjections, PixelCnn};
pub use vae::Vae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn default_blocks() -> usize {
    6
}
fn default_k() -> usize {
    10
}
fn default_latent() -> usize {
    60
}
fn default_kernel() -> usize {
    3
}
fn default_image_side() -> usize {
    28
}
fn default_vae_channels() -> usize {
    32
}
fn default_floor() -> f64 {
    -7.0
}
fn yes() -> bool {
    true
}

/// Architecture. `patch_side`, `channels` and `layers_per_block` have no
/// defaults and must be given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    pub layers_per_block: usize,
    /// Feature maps per convolution.
    pub channels: usize,
    #[serde(default = "default_k")]
    pub mixture_components: usize,
    pub patch_side: usize,
    #[serde(default = "default_image_side")]
    pub image_side: usize,
    #[serde(default = "default_latent")]
    pub latent_len: usize,
    /// Width of the vertical-stack kernel; the stacks use `[(k+1)/2, k]`
    /// and `[(k+1)/2, (k+1)/2]` shifted kernels.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_vae_channels")]
    pub vae_channels: usize,
    #[serde(default = "default_floor")]
    pub log_scale_floor: f64,
    /// Condition the PixelCNN on the coordinate grid.
    #[serde(default = "yes")]
    pub use_coords: bool,
    /// Train a VAE and condition the PixelCNN on its latent code.
    #[serde(default = "yes")]
    pub use_latent: bool,
}

impl NetworkConfig {
    /// Two layers per block, 25 feature maps.
    pub fn small(patch_side: usize) -> Self {
        Self::with(patch_side, 2, 25)
    }

    /// Five layers per block, 140 feature maps.
    pub fn large(patch_side: usize) -> Self {
        Self::with(patch_side, 5, 140)
    }

    pub fn with(patch_side: usize, layers_per_block: usize, channels: usize) -> Self {
        NetworkConfig {
            blocks: 6,
            layers_per_block,
            channels,
            mixture_components: 10,
            patch_side,
            image_side: 28,
            latent_len: 60,
            kernel: 3,
            vae_channels: 32,
            log_scale_floor: -7.0,
            use_coords: true,
            use_latent: true,
        }
    }

    /// Number of resolutions in the U shape.
    pub fn levels(&self) -> usize {
        self.blocks / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks < 2 || self.blocks % 2 != 0 {
            return bad(format!("blocks must be an even number ≥ 2, got {}", self.blocks));
        }
        if self.layers_per_block == 0 || self.channels == 0 {
            return bad("layers_per_block and channels must be positive".into());
        }
        if self.mixture_components == 0 || self.mixture_components > 64 {
            return bad(format!("mixture_components must be in 1..=64, got {}", self.mixture_components));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd and ≥ 3, got {}", self.kernel));
        }
        let div = 1usize << (self.levels() - 1);
        if self.patch_side == 0 || self.patch_side % div != 0 {
            return bad(format!(
                "patch_side {} must be a positive multiple of {div} for {} blocks",
                self.patch_side, self.blocks
            ));
        }
        if self.patch_side > self.image_side {
            return bad(format!(
                "patch_side {} exceeds image_side {}",
                self.patch_side, self.image_side
            ));
        }
        if self.use_latent {
            if self.latent_len == 0 || self.vae_channels == 0 {
                return bad("latent_len and vae_channels must be positive".into());
            }
            if self.image_side % 4 != 0 {
                return bad(format!("image_side {} must be divisible by 4 for the VAE", self.image_side));
            }
        }
        if !self.log_scale_floor.is_finite() {
            return bad("log_scale_floor must be finite".into());
        }
        Ok(())
    }
}

/// Per-pixel mixture parameters, pixel-major with `k` values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl MixtureParams {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn all_finite(&self) -> bool {
        self.logits
            .iter()
            .chain(&self.means)
            .chain(&self.log_scales)
            .all(|v| v.is_finite())
    }

    /// Extracts batch item `b` from a network output of `3K` (or, for one
    /// component, 2) channels.
    pub fn from_output<T: Scalar>(out: &Tensor<T>, k: usize, b: usize) -> Self {
        let [c, bs, h, w] = out.shape;
        let with_logits = c == 3 * k;
        assert!(with_logits || (k == 1 && c == 2), "mixture channel layout");
        let off = if with_logits { k } else { 0 };
        let hw = h * w;
        let mut m = MixtureParams {
            k,
            h,
            w,
            logits: vec![0.0; hw * k],
            means: vec![0.0; hw * k],
            log_scales: vec![0.0; hw * k],
        };
        for p in 0..hw {
            for j in 0..k {
                let at = |ch: usize| out.data[(ch * bs + b) * hw + p].to_f();
                if with_logits {
                    m.logits[p * k + j] = at(j);
                }
                m.means[p * k + j] = at(off + j);
                m.log_scales[p * k + j] = at(off + k + j);
            }
        }
        m
    }

    /// The mixture at one pixel as `(logits, means, log_scales)`.
    pub fn pixel(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let r = i * self.k..(i + 1) * self.k;
        (&self.logits[r.clone()], &self.means[r.clone()], &self.log_scales[r])
    }
}

/// Diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

/// `linspace(a, b, k)` with exact endpoints; the midpoint when `k = 1`.
fn linspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..k)
            .map(|t| {
                if t == 0 {
                    a
                } else if t == k - 1 {
                    b
                } else {
                    a + (b - a) * t as f64 / (k - 1) as f64
                }
            })
            .collect(),
    }
}

/// Halves an `m×m` coordinate patch by re-spacing its corner range into
/// `m/2` steps per axis.
pub fn resample_grid(g: &[[f64; 2]], m: usize) -> Result<Vec<[f64; 2]>> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::InvalidArgument(format!("grid side {m} must be even and ≥ 2")));
    }
    if g.len() != m * m {
        return Err(Error::Shape(format!("{} coordinates for a {m}x{m} grid", g.len())));
    }
    let first = g[0];
    let last = g[m * m - 1];
    let k = m / 2;
    let rows = linspace(first[0], last[0], k);
    let cols = linspace(first[1], last[1], k);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| [r, c]))
        .collect())
}

/// Builds `[2, B, m, m]` coordinate maps from per-sample patches.
pub fn grid_tensor<T: Scalar>(patches: &[Vec<[f64; 2]>], m: usize) -> Tensor<T> {
    let b = patches.len();
    let hw = m * m;
    let mut t = Tensor::zeros([2, b, m, m]);
    for (bi, p) in patches.iter().enumerate() {
        assert_eq!(p.len(), hw, "grid patch size");
        for (i, c) in p.iter().enumerate() {
            t.data[bi * hw + i] = T::f(c[0]);
            t.data[(b + bi) * hw + i] = T::f(c[1]);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_small_grids() {
        let g4 = crate::dataio::make_grid(4).unwrap();
        let r = resample_grid(&g4.coords, 4).unwrap();
        assert_eq!(r, vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]);
        let g8 = crate::dataio::make_grid(8).unwrap();
        let r = resample_grid(&g8.coords, 8).unwrap();
        assert_eq!(r.len(), 16);
        let want = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (i, w) in want.iter().enumerate() {
            assert!((r[i][1] - w).abs() < 1e-15);
            assert!((r[4 * i][0] - w).abs() < 1e-15);
        }
        assert!(resample_grid(&g8.coords[..9], 3).is_err());
    }

    #[test]
    fn one_by_one_is_midpoint() {
        let g = vec![[-0.5, 0.1], [-0.5, 0.3], [0.2, 0.1], [0.2, 0.3]];
        let r = resample_grid(&g, 2).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0][0] - (-0.15)).abs() < 1e-15 && (r[0][1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::small(8).validate().is_ok());
        assert!(NetworkConfig::small(6).validate().is_err());
        assert!(NetworkConfig::small(32).validate().is_err());
        let mut c = NetworkConfig::small(8);
        c.kernel = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn required_fields_have_no_defaults() {
        let err = serde_json::from_str::<NetworkConfig>(r#"{"channels": 25, "layers_per_block": 2}"#);
        assert!(err.unwrap_err().to_string().contains("patch_side"));
        let err = serde_json::from_str::<NetworkConfig>(
            r#"{"channels": 25, "layers_per_block": 2, "patch_side": 8, "bogus": 1}"#,
        );
        assert!(err.is_err());
    }
}
