//! Discretized logistic mixture likelihood, Gaussian KL, and the composite
//! objective.
//!
//! Pixel values are bytes `v` mapped to `v/127.5 − 1`. Bin `v` covers
//! `[x − 1/255, x + 1/255]`, with bins 0 and 255 extended to ∓∞. All math
//! here runs in `f64` regardless of the network's element type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{MixtureParams, PosteriorParams};

pub const HALF_BIN: f64 = 1.0 / 255.0;

/// Normalized value of byte `v`.
#[inline]
pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-probability of byte `target` under one logistic component, with
/// derivatives w.r.t. the mean and the log-scale.
///
/// Interior bins use `log(σ(a) − σ(b)) = logσ(a) + logσ(b) − b + log(1 − e^{b−a})`,
/// which stays finite in both tails.
pub fn logistic_bin_log_prob(mean: f64, log_scale: f64, target: u8) -> (f64, f64, f64) {
    let inv = (-log_scale).exp();
    let c = byte_to_unit(target) - mean;
    let a = inv * (c + HALF_BIN);
    let b = inv * (c - HALF_BIN);
    let (lp, da, db) = match target {
        0 => (log_sigmoid(a), sigmoid(-a), 0.0),
        255 => (log_sigmoid(-b), 0.0, -sigmoid(b)),
        _ => {
            let gap = (-(b - a).exp_m1()).ln();
            let lsa = log_sigmoid(a);
            let lsb = log_sigmoid(b);
            let lp = lsa + lsb - b + gap;
            let da = (log_sigmoid(-a) - log_sigmoid(-b) - gap).exp();
            let db = -(lsb - lsa - gap).exp();
            (lp, da, db)
        }
    };
    (lp, -inv * (da + db), -(a * da + b * db))
}

/// Negative log-likelihood of one pixel under a `K`-component mixture, and
/// its gradient. `logits` may be empty for a single-component model.
pub fn mixture_pixel_nll(
    logits: &[f64],
    means: &[f64],
    log_scales: &[f64],
    target: u8,
    d_logits: &mut [f64],
    d_means: &mut [f64],
    d_log_scales: &mut [f64],
) -> f64 {
    let k = means.len();
    debug_assert_eq!(log_scales.len(), k);
    if k == 1 && logits.len() <= 1 {
        let (lp, dm, ds) = logistic_bin_log_prob(means[0], log_scales[0], target);
        d_means[0] = -dm;
        d_log_scales[0] = -ds;
        if let Some(d) = d_logits.first_mut() {
            *d = 0.0;
        }
        return -lp;
    }
    debug_assert_eq!(logits.len(), k);
    let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_w = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
    let mut terms = [0.0f64; 64];
    let mut dms = [0.0f64; 64];
    let mut dss = [0.0f64; 64];
    assert!(k <= 64, "at most 64 mixture components");
    for j in 0..k {
        let (lp, dm, ds) = logistic_bin_log_prob(means[j], log_scales[j], target);
        terms[j] = logits[j] - lse_w + lp;
        dms[j] = dm;
        dss[j] = ds;
    }
    let tmax = terms[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logp = tmax + terms[..k].iter().map(|t| (t - tmax).exp()).sum::<f64>().ln();
    for j in 0..k {
        let resp = (terms[j] - logp).exp();
        let w = (logits[j] - lse_w).exp();
        d_logits[j] = w - resp;
        d_means[j] = -resp * dms[j];
        d_log_scales[j] = -resp * dss[j];
    }
    -logp
}

/// Probability of every byte value under a mixture at one pixel.
pub fn mixture_bin_probs(logits: &[f64], means: &[f64], log_scales: &[f64]) -> [f64; 256] {
    let k = means.len();
    let mut dl = vec![0.0; logits.len()];
    let mut dm = vec![0.0; k];
    let mut ds = vec![0.0; k];
    let mut out = [0.0; 256];
    for (v, o) in out.iter_mut().enumerate() {
        *o = (-mixture_pixel_nll(logits, means, log_scales, v as u8, &mut dl, &mut dm, &mut ds)).exp();
    }
    out
}

/// Summed negative log-likelihood (nats) of a patch of bytes.
pub fn dlm_nll(mix: &MixtureParams, targets: &[u8]) -> Result<f64> {
    let n = mix.pixels();
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for a {}-pixel mixture",
            targets.len(),
            n
        )));
    }
    if !mix.all_finite() {
        return Err(Error::NonFinite("mixture parameters".into()));
    }
    let k = mix.k;
    let mut dl = vec![0.0; k];
    let mut dm = vec![0.0; k];
    let mut ds = vec![0.0; k];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let r = i * k..(i + 1) * k;
        total += mixture_pixel_nll(
            &mix.logits[r.clone()],
            &mix.means[r.clone()],
            &mix.log_scales[r],
            t,
            &mut dl,
            &mut dm,
            &mut ds,
        );
    }
    Ok(total)
}

pub fn bits_per_dim(nll_nats: f64, dims: usize) -> f64 {
    assert!(dims > 0, "bits_per_dim needs at least one dimension");
    nll_nats / (dims as f64 * std::f64::consts::LN_2)
}

/// `KL(N(μ, σ²) ‖ N(0, I))` in nats.
pub fn kl_gauss(p: &PosteriorParams) -> f64 {
    p.mu
        .iter()
        .zip(&p.logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Image loss: reconstruction NLL under the decoder's per-pixel logistic,
/// plus the posterior's KL from the prior.
pub fn image_loss(x: &[u8], recon: &MixtureParams, posterior: &PosteriorParams) -> Result<f64> {
    Ok(dlm_nll(recon, x)? + kl_gauss(posterior))
}

/// Patch loss: NLL of the patch under the conditioned PixelCNN output.
pub fn patch_loss(mix: &MixtureParams, patch: &[u8]) -> Result<f64> {
    dlm_nll(mix, patch)
}

pub fn total_loss(lx: f64, ly: f64) -> f64 {
    lx + ly
}

/// Per-batch mean losses reported by a training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Nats per patch.
    pub patch_nll: f64,
    /// Nats per image.
    pub recon_nll: f64,
    pub kl: f64,
    pub total: f64,
    pub bpd_patch: f64,
}

impl LossBreakdown {
    pub fn new(patch_nll: f64, recon_nll: f64, kl: f64, patch_dims: usize) -> Self {
        LossBreakdown {
            patch_nll,
            recon_nll,
            kl,
            total: total_loss(recon_nll + kl, patch_nll),
            bpd_patch: bits_per_dim(patch_nll, patch_dims),
        }
    }

    /// Names the first non-finite component.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("patch_nll", self.patch_nll),
            ("recon_nll", self.recon_nll),
            ("kl", self.kl),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center(v: u8) -> f64 {
        byte_to_unit(v)
    }

    fn one(mean: f64, log_scale: f64) -> MixtureParams {
        MixtureParams {
            k: 1,
            h: 1,
            w: 1,
            logits: vec![0.0],
            means: vec![mean],
            log_scales: vec![log_scale],
        }
    }

    #[test]
    fn single_component_bins_partition_unity() {
        for &(m, s) in &[(0.0, 0.0), (0.3, -3.0), (-0.99, -7.0), (2.5, 1.0), (0.1, -5.5)] {
            let p = mixture_bin_probs(&[0.0], &[m], &[s]);
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "mean {m} log-scale {s}: {total}");
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn concentrated_component_gives_zero_nll() {
        let nll = dlm_nll(&one(center(128), -12.0), &[128]).unwrap();
        assert!(nll.abs() < 1e-9, "{nll}");
    }

    #[test]
    fn two_tight_components_split_mass() {
        let mix = MixtureParams {
            k: 2,
            h: 1,
            w: 1,
            logits: vec![0.3, 0.3],
            means: vec![center(0), center(255)],
            log_scales: vec![-9.0, -9.0],
        };
        let nll = dlm_nll(&mix, &[0]).unwrap();
        assert!((nll - std::f64::consts::LN_2).abs() < 1e-3);
    }

    #[test]
    fn edge_bins_do_not_underflow() {
        // far tail: target 200 under a component sitting at -1 with tiny scale
        let (lp, dm, ds) = logistic_bin_log_prob(-1.0, -7.0, 200);
        assert!(lp.is_finite() && dm.is_finite() && ds.is_finite());
        assert!(lp < -1000.0);
    }

    #[test]
    fn uniform_is_eight_bits() {
        let nll = 64.0 * 256f64.ln();
        assert!((bits_per_dim(nll, 64) - 8.0).abs() < 1e-12);
        assert_eq!(bits_per_dim(0.0, 10), 0.0);
    }

    #[test]
    fn kl_known_values() {
        let p = PosteriorParams { mu: vec![0.0; 60], logvar: vec![0.0; 60] };
        assert_eq!(kl_gauss(&p), 0.0);
        let p = PosteriorParams { mu: vec![1.0], logvar: vec![0.0] };
        assert_eq!(kl_gauss(&p), 0.5);
    }

    #[test]
    fn total_is_a_sum() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.5, 2.5), 4.0);
    }

    #[test]
    fn breakdown_names_bad_term() {
        let b = LossBreakdown::new(1.0, f64::NAN, 0.1, 64);
        let msg = b.check_finite().unwrap_err().to_string();
        assert!(msg.contains("recon_nll"), "{msg}");
    }

    #[test]
    fn patch_loss_delegates() {
        let mix = one(0.2, -2.0);
        assert_eq!(patch_loss(&mix, &[140]).unwrap(), dlm_nll(&mix, &[140]).unwrap());
        assert!(patch_loss(&mix, &[140]).unwrap() > 0.0);
    }

    #[test]
    fn image_loss_limits() {
        let recon = MixtureParams {
            k: 1,
            h: 1,
            w: 2,
            logits: vec![0.0, 0.0],
            means: vec![center(3), center(250)],
            log_scales: vec![-14.0, -14.0],
        };
        let prior = PosteriorParams { mu: vec![0.0; 4], logvar: vec![0.0; 4] };
        assert!(image_loss(&[3, 250], &recon, &prior).unwrap().abs() < 1e-9);
        let post = PosteriorParams { mu: vec![0.5, -1.0], logvar: vec![0.2, -0.3] };
        let l = image_loss(&[3, 250], &recon, &post).unwrap();
        assert!((l - kl_gauss(&post)).abs() < 1e-9);
    }

    #[test]
    fn mismatched_targets_rejected() {
        assert!(matches!(dlm_nll(&one(0.0, 0.0), &[1, 2]), Err(Error::Shape(_))));
        assert!(matches!(dlm_nll(&one(f64::NAN, 0.0), &[1]), Err(Error::NonFinite(_))));
    }
}
