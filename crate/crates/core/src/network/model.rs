use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{Ctx, Dropout, Group, ParamBuilder, ParamStore};
use super::pixelcnn::PixelCnn;
use super::vae::Vae;
use super::{grid_tensor, resample_grid, LatentCode, MixtureParams, NetworkConfig, PosteriorParams};
use crate::dataio::{ImageF, PatchPair};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::{Scalar, Tensor};

pub const DROPOUT_RATE: f64 = 0.5;

/// Forward-pass mode.
pub enum Mode {
    Eval,
    /// Dropout on, driven by the given generator.
    Train(ChaCha8Rng),
}

/// PixelCNN plus (optionally) the VAE, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub pcnn: PixelCnn,
    pub vae: Option<Vae>,
}

impl Model {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(seed));
        let pcnn = PixelCnn::build(cfg, &mut pb);
        let vae = cfg.use_latent.then(|| Vae::build(cfg, &mut pb));
        Ok(Model {
            cfg: cfg.clone(),
            store: pb.finish(),
            pcnn,
            vae,
        })
    }

    /// Number of scalar parameters implied by `cfg`.
    pub fn param_count(cfg: &NetworkConfig) -> Result<usize> {
        Ok(Model::new(cfg, 0)?.store.count())
    }

    /// Mask selecting the parameters of the given groups.
    pub fn mask(&self, groups: &[Group]) -> Vec<bool> {
        self.store.specs.iter().map(|s| groups.contains(&s.group)).collect()
    }

    pub fn vae(&self) -> Result<&Vae> {
        self.vae
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a latent code".into()))
    }

    /// Binds inputs and runs the PixelCNN inside `ctx`.
    pub fn pcnn_graph<T: Scalar>(&self, ctx: &mut Ctx<T>, patches: &[PatchPair], z: Option<Var>) -> Result<Var> {
        let m = self.cfg.patch_side;
        check_patches(patches, m)?;
        let y = ctx.g.constant(patch_tensor(patches, m));
        let grids = grid_pyramid::<T>(patches, m, self.cfg.levels())?
            .into_iter()
            .map(|t| ctx.g.constant(t))
            .collect::<Vec<_>>();
        Ok(self.pcnn.forward(ctx, y, &grids, z))
    }
}

fn check_patches(patches: &[PatchPair], m: usize) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for p in patches {
        if p.m != m || p.patch_y.len() != m * m || p.patch_g.len() != m * m {
            return Err(Error::Shape(format!(
                "patch of side {} ({} values, {} coordinates) for a side-{m} network",
                p.m,
                p.patch_y.len(),
                p.patch_g.len()
            )));
        }
        if !p.patch_y.iter().all(|v| v.is_finite()) || !p.patch_g.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("patch input".into()));
        }
    }
    Ok(())
}

/// `[1, B, m, m]` patch values.
pub fn patch_tensor<T: Scalar>(patches: &[PatchPair], m: usize) -> Tensor<T> {
    let data = patches
        .iter()
        .flat_map(|p| p.patch_y.iter().map(|&v| T::f(v as f64)))
        .collect();
    Tensor::from_vec([1, patches.len(), m, m], data)
}

/// Coordinate maps at each of `levels` resolutions, halving each time.
pub fn grid_pyramid<T: Scalar>(patches: &[PatchPair], m: usize, levels: usize) -> Result<Vec<Tensor<T>>> {
    let mut cur: Vec<Vec<[f64; 2]>> = patches.iter().map(|p| p.patch_g.clone()).collect();
    let mut side = m;
    let mut out = vec![grid_tensor(&cur, side)];
    for _ in 1..levels {
        cur = cur.iter().map(|g| resample_grid(g, side)).collect::<Result<_>>()?;
        side /= 2;
        out.push(grid_tensor(&cur, side));
    }
    Ok(out)
}

/// `[L, B, 1, 1]` latent codes.
pub fn latent_tensor<T: Scalar>(zs: &[LatentCode]) -> Result<Tensor<T>> {
    let l = zs.first().map_or(0, |z| z.z.len());
    let b = zs.len();
    let mut t = Tensor::zeros([l, b, 1, 1]);
    for (bi, z) in zs.iter().enumerate() {
        if z.z.len() != l {
            return Err(Error::Shape("latent codes of different lengths".into()));
        }
        if !z.z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        for (d, &v) in z.z.iter().enumerate() {
            t.data[d * b + bi] = T::f(v);
        }
    }
    Ok(t)
}

/// `[1, B, n, n]` images.
pub fn image_tensor<T: Scalar>(xs: &[ImageF]) -> Result<Tensor<T>> {
    let n = xs.first().ok_or(Error::EmptyDataset)?.side;
    if xs.iter().any(|x| x.side != n || x.pixels.len() != n * n) {
        return Err(Error::Shape("images of different sizes in one batch".into()));
    }
    let data = xs.iter().flat_map(|x| x.pixels.iter().map(|&v| T::f(v as f64))).collect();
    Ok(Tensor::from_vec([1, xs.len(), n, n], data))
}

fn column<T: Scalar>(t: &Tensor<T>, b: usize) -> Vec<f64> {
    let bs = t.shape[1];
    (0..t.shape[0]).map(|d| t.data[d * bs + b].to_f()).collect()
}

/// Mixture parameters for each patch.
pub fn pcnn_forward<T: Scalar>(
    model: &Model,
    params: &[Tensor<T>],
    patches: &[PatchPair],
    z: Option<&[LatentCode]>,
    mode: Mode,
) -> Result<Vec<MixtureParams>> {
    let mut ctx = match mode {
        Mode::Eval => Ctx::eval(params),
        Mode::Train(rng) => Ctx::train(
            params,
            vec![false; params.len()],
            Some(Dropout {
                rate: DROPOUT_RATE,
                rng,
            }),
        ),
    };
    let zv = match (model.cfg.use_latent, z) {
        (true, Some(zs)) => {
            if zs.len() != patches.len() || zs.iter().any(|c| c.z.len() != model.cfg.latent_len) {
                return Err(Error::Shape(format!(
                    "need one length-{} latent code per patch",
                    model.cfg.latent_len
                )));
            }
            Some(ctx.g.constant(latent_tensor(zs)?))
        }
        (true, None) => return Err(Error::Shape("model expects a latent code".into())),
        (false, _) => None,
    };
    let out = model.pcnn_graph(&mut ctx, patches, zv)?;
    let v = ctx.g.value(out);
    Ok((0..patches.len())
        .map(|b| MixtureParams::from_output(v, model.cfg.mixture_components, b))
        .collect())
}

/// Posterior for each full-size image.
pub fn vae_encode<T: Scalar>(model: &Model, params: &[Tensor<T>], xs: &[ImageF]) -> Result<Vec<PosteriorParams>> {
    let vae = model.vae()?;
    if xs.iter().any(|x| x.side != vae.image_side) {
        return Err(Error::Shape(format!("encoder expects {0}x{0} images", vae.image_side)));
    }
    let mut ctx = Ctx::eval(params);
    let x = ctx.g.constant(image_tensor(xs)?);
    let (mu, lv) = vae.encode(&mut ctx, x);
    let (mu, lv) = (ctx.g.value(mu), ctx.g.value(lv));
    Ok((0..xs.len())
        .map(|b| PosteriorParams {
            mu: column(mu, b),
            logvar: column(lv, b),
        })
        .collect())
}

/// Single-component reconstruction distribution for each code.
pub fn vae_decode<T: Scalar>(model: &Model, params: &[Tensor<T>], zs: &[LatentCode]) -> Result<Vec<MixtureParams>> {
    let vae = model.vae()?;
    if zs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if zs.iter().any(|z| z.z.len() != vae.latent_len) {
        return Err(Error::Shape(format!("decoder expects length-{} codes", vae.latent_len)));
    }
    let mut ctx = Ctx::eval(params);
    let z = ctx.g.constant(latent_tensor(zs)?);
    let out = vae.decode(&mut ctx, z);
    let v = ctx.g.value(out);
    Ok((0..zs.len()).map(|b| MixtureParams::from_output(v, 1, b)).collect())
}

/// `z = μ + exp(logvar/2) ⊙ ε`.
pub fn reparameterize<R: rand::Rng + ?Sized>(p: &PosteriorParams, rng: &mut R) -> LatentCode {
    LatentCode {
        z: p.mu
            .iter()
            .zip(&p.logvar)
            .map(|(&m, &lv)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (0.5 * lv).exp() * e
            })
            .collect(),
    }
}
