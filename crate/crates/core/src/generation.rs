//! Sliding-window sampling: prior samples, reconstructions and upscaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{denormalize_value, make_grid, normalize, ImageU8, PatchPair};
use crate::network::{pcnn_forward, vae_encode, LatentCode, MixtureParams, Mode, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Normalized value written into window positions not yet generated.
pub const NEUTRAL_FILL: f32 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPlacement {
    pub pixel: (usize, usize),
    pub origin: (usize, usize),
    pub position: (usize, usize),
}

impl WindowPlacement {
    /// Number of in-window pixels preceding the generated one in raster order.
    pub fn context(&self, m: usize) -> usize {
        self.position.0 * m + self.position.1
    }
}

/// Window of side `m` that gives pixel `(r, c)` of an `n×n` image the most
/// causal context: the pixel sits bottom-right unless a border intervenes.
pub fn window_for_pixel(r: usize, c: usize, m: usize, n: usize) -> WindowPlacement {
    debug_assert!(r < n && c < n && m <= n);
    let place = |x: usize| (x + 1).saturating_sub(m).min(n - m);
    let origin = (place(r), place(c));
    WindowPlacement {
        pixel: (r, c),
        origin,
        position: (r - origin.0, c - origin.1),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentSource {
    /// Fresh `N(0, I)` draw from the request's stream.
    Prior,
    /// Posterior mean of a full-size image.
    PosteriorMean(ImageU8),
    Explicit(LatentCode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub target_side: usize,
    pub latent: LatentSource,
    pub seed: u64,
}

/// Draws one byte from a logistic mixture given as `(logits, means, log_scales)`.
pub fn sample_pixel<R: Rng + ?Sized>(logits: &[f64], means: &[f64], log_scales: &[f64], rng: &mut R) -> u8 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut t = rng.random::<f64>() * total;
    let mut k = w.len() - 1;
    for (j, &wj) in w.iter().enumerate() {
        if t < wj {
            k = j;
            break;
        }
        t -= wj;
    }
    let u = 1e-5 + (1.0 - 2e-5) * rng.random::<f64>();
    let x = means[k] + log_scales[k].exp() * (u.ln() - (-u).ln_1p());
    denormalize_value(x.clamp(-1.0, 1.0))
}

fn sample_at<R: Rng + ?Sized>(mix: &MixtureParams, i: usize, rng: &mut R) -> u8 {
    let (l, m, s) = mix.pixel(i);
    sample_pixel(l, m, s, rng)
}

/// A model plus the (normally EMA) parameters to sample with.
pub struct Sampler<'a> {
    pub model: &'a Model,
    pub params: Vec<Tensor<f32>>,
    /// Value written into ungenerated window positions.
    pub fill: f32,
}

struct Job {
    side: usize,
    z: Option<LatentCode>,
    rng: ChaCha8Rng,
    pixels: Vec<f32>,
    bytes: Vec<u8>,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Model, params: Vec<Tensor<f32>>) -> Self {
        Sampler {
            model,
            params,
            fill: NEUTRAL_FILL,
        }
    }

    /// Samples with the model's EMA weights.
    pub fn ema(model: &'a Model) -> Self {
        Self::new(model, model.store.ema_as::<f32>())
    }

    fn check(&self) -> Result<()> {
        if self.params.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("sampling parameters".into()));
        }
        Ok(())
    }

    /// Latent codes for each request, consuming the prior draw from its
    /// stream first.
    fn start(&self, reqs: &[GenRequest]) -> Result<Vec<Job>> {
        let cfg = &self.model.cfg;
        let mut jobs = Vec::with_capacity(reqs.len());
        let mut to_encode = Vec::new();
        for (i, r) in reqs.iter().enumerate() {
            if r.target_side < cfg.patch_side {
                return Err(Error::InvalidArgument(format!(
                    "target side {} is smaller than the patch side {}",
                    r.target_side, cfg.patch_side
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            let z = if !cfg.use_latent {
                None
            } else {
                match &r.latent {
                    LatentSource::Prior => Some(LatentCode {
                        z: (0..cfg.latent_len).map(|_| StandardNormal.sample(&mut rng)).collect(),
                    }),
                    LatentSource::Explicit(c) => {
                        if c.z.len() != cfg.latent_len {
                            return Err(Error::Shape(format!("latent code must have length {}", cfg.latent_len)));
                        }
                        Some(c.clone())
                    }
                    LatentSource::PosteriorMean(img) => {
                        to_encode.push((i, normalize(img)));
                        None
                    }
                }
            };
            let n = r.target_side;
            jobs.push(Job {
                side: n,
                z,
                rng,
                pixels: vec![self.fill; n * n],
                bytes: vec![0; n * n],
            });
        }
        if !to_encode.is_empty() {
            let xs: Vec<_> = to_encode.iter().map(|(_, x)| x.clone()).collect();
            let post = vae_encode(self.model, &self.params, &xs)?;
            for ((i, _), p) in to_encode.iter().zip(post) {
                jobs[*i].z = Some(LatentCode { z: p.mu });
            }
        }
        Ok(jobs)
    }

    fn run(&self, mut jobs: Vec<Job>) -> Result<Vec<ImageU8>> {
        let m = self.model.cfg.patch_side;
        let max_side = jobs.iter().map(|j| j.side).max().unwrap_or(0);
        let grids: Vec<_> = jobs.iter().map(|j| make_grid(j.side)).collect::<Result<_>>()?;
        for r in 0..max_side {
            for c in 0..max_side {
                let active: Vec<usize> = (0..jobs.len()).filter(|&i| r < jobs[i].side && c < jobs[i].side).collect();
                if active.is_empty() {
                    continue;
                }
                let mut patches = Vec::with_capacity(active.len());
                let mut places = Vec::with_capacity(active.len());
                for &i in &active {
                    let j = &jobs[i];
                    let w = window_for_pixel(r, c, m, j.side);
                    let (r0, c0) = w.origin;
                    let patch_y = (0..m)
                        .flat_map(|a| j.pixels[(r0 + a) * j.side + c0..(r0 + a) * j.side + c0 + m].iter().copied())
                        .collect();
                    patches.push(PatchPair {
                        m,
                        origin: w.origin,
                        patch_y,
                        patch_g: grids[i].window(w.origin, m),
                    });
                    places.push(w);
                }
                let zs: Option<Vec<LatentCode>> = self
                    .model
                    .cfg
                    .use_latent
                    .then(|| active.iter().map(|&i| jobs[i].z.clone().expect("latent resolved")).collect());
                let mixes = pcnn_forward(self.model, &self.params, &patches, zs.as_deref(), Mode::Eval)?;
                for ((&i, w), mix) in active.iter().zip(&places).zip(&mixes) {
                    let j = &mut jobs[i];
                    let v = sample_at(mix, w.context(m), &mut j.rng);
                    j.bytes[r * j.side + c] = v;
                    j.pixels[r * j.side + c] = crate::dataio::normalize_byte(v);
                }
            }
        }
        jobs.into_iter().map(|j| ImageU8::new(j.side, j.bytes)).collect()
    }

    /// Generates every request, advancing all images in lockstep so each
    /// forward pass carries one window per unfinished image.
    pub fn generate_batch(&self, reqs: &[GenRequest]) -> Result<Vec<ImageU8>> {
        self.check()?;
        let jobs = self.start(reqs)?;
        self.run(jobs)
    }

    pub fn generate(&self, req: &GenRequest) -> Result<ImageU8> {
        Ok(self.generate_batch(std::slice::from_ref(req))?.remove(0))
    }

    /// Reconstruction of `x` at side `n`, conditioned on its posterior mean.
    pub fn reconstruct(&self, x: &ImageU8, n: usize, seed: u64) -> Result<ImageU8> {
        self.generate(&GenRequest {
            target_side: n,
            latent: LatentSource::PosteriorMean(x.clone()),
            seed,
        })
    }

    /// Plain full-image sampler for `m = n`: one forward pass over the whole
    /// canvas per pixel, reading the pixel's own output.
    pub fn sample_single_pass(&self, req: &GenRequest) -> Result<ImageU8> {
        self.check()?;
        let n = self.model.cfg.patch_side;
        if req.target_side != n {
            return Err(Error::InvalidArgument(format!(
                "single-pass sampling needs target side {n}"
            )));
        }
        let mut job = self.start(std::slice::from_ref(req))?.remove(0);
        let grid = make_grid(n)?.window((0, 0), n);
        for i in 0..n * n {
            let patch = PatchPair {
                m: n,
                origin: (0, 0),
                patch_y: job.pixels.clone(),
                patch_g: grid.clone(),
            };
            let zs = job.z.clone().map(|z| vec![z]);
            let mix = pcnn_forward(self.model, &self.params, &[patch], zs.as_deref(), Mode::Eval)?;
            let v = sample_at(&mix[0], i, &mut job.rng);
            job.bytes[i] = v;
            job.pixels[i] = crate::dataio::normalize_byte(v);
        }
        ImageU8::new(n, job.bytes)
    }
}

/// Forward passes a sliding-window run at side `n` performs.
pub fn forward_passes(n: usize) -> usize {
    n * n
}

/// Independent seed for image `i` of a request seeded with `seed`.
pub fn image_seed(seed: u64, i: u64) -> u64 {
    use rand::RngCore;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i);
    r.next_u64()
}

/// Generates in chunks of at most `chunk` images per forward batch.
pub fn generate_chunked(s: &Sampler<'_>, reqs: &[GenRequest], chunk: usize) -> Result<Vec<ImageU8>> {
    let mut out = Vec::with_capacity(reqs.len());
    for c in reqs.chunks(chunk.max(1)) {
        out.extend(s.generate_batch(c)?);
    }
    Ok(out)
}
