//! Full network: per-level shallow features, patch embedding, carrier-token
//! initialization and DCHAT groups with cross-level fusion, followed by the
//! reconstruction head (token deconvolution, pre-reconstruction, long skip,
//! channel halving, ICNR-initialized pixel-shuffle upsampling).
//!
//! Levels are named from the finest: `level1` is the prediction level,
//! `level2` the next coarser one, and so on. A model with multi-context input
//! disabled only holds `level1`, so its parameter names coincide with a
//! single-level model's.

use mtv_autograd::{gather_tensor, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionMode, ModelConfig};
use crate::dchat::{dchat_block_param_count, dchat_group, init_dchat_group};
use crate::error::{Error, Result};
use crate::nn::{conv_count, linear_count, uniform_tensor, Bound, Init, ParamStore, LEAKY_SLOPE};
use crate::svhat::{LayerDims, SvhatState};
use crate::tokenizer::{crop_and_pass, embed_patches, init_cats, sfe, LevelPlan};

/// Name of the `i`-th active level counted from the coarsest.
pub fn level_name(cfg: &ModelConfig, i: usize) -> String {
    format!("level{}", cfg.active_levels().len() - i)
}

/// Element index of a 3-D pixel shuffle of `[B, C*s^3, H, W, D]` into
/// `[B, C, sH, sW, sD]`: output `(c, s h + a, s w + b, s d + e)` reads input
/// channel `c s^3 + a s^2 + b s + e` at `(h, w, d)`.
pub fn pixel_shuffle_index(batch: usize, channels: usize, dims: [usize; 3], s: usize) -> Vec<usize> {
    let [h, w, d] = dims;
    let s3 = s * s * s;
    let mut idx = Vec::with_capacity(batch * channels * s3 * h * w * d);
    for b in 0..batch {
        for c in 0..channels {
            for x in 0..h * s {
                for y in 0..w * s {
                    for z in 0..d * s {
                        let (a, bb, e) = (x % s, y % s, z % s);
                        let ch = c * s3 + (a * s + bb) * s + e;
                        idx.push((((b * channels * s3 + ch) * h + x / s) * w + y / s) * d + z / s);
                    }
                }
            }
        }
    }
    idx
}

fn shuffle_dims(shape: &[usize], s: usize) -> Result<(usize, usize, [usize; 3])> {
    if shape.len() != 5 || s == 0 || shape[1] % (s * s * s) != 0 {
        return Err(Error::Shape(format!(
            "pixel shuffle x{s} needs [B, C*{}, H, W, D], got {shape:?}",
            s * s * s
        )));
    }
    Ok((shape[0], shape[1] / (s * s * s), [shape[2], shape[3], shape[4]]))
}

pub fn pixel_shuffle_3d(t: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, dims) = shuffle_dims(t.shape(), s)?;
    let idx = pixel_shuffle_index(b, c, dims, s);
    Ok(gather_tensor(t, &idx, 1, &[b, c, dims[0] * s, dims[1] * s, dims[2] * s]))
}

/// Inverse rearrangement of [`pixel_shuffle_3d`].
pub fn pixel_unshuffle_3d(t: &Tensor, s: usize) -> Result<Tensor> {
    let sh = t.shape();
    if sh.len() != 5 || s == 0 || sh[2..].iter().any(|&d| d % s != 0) {
        return Err(Error::Shape(format!("cannot unshuffle {sh:?} by {s}")));
    }
    let (b, c) = (sh[0], sh[1]);
    let dims = [sh[2] / s, sh[3] / s, sh[4] / s];
    let idx = pixel_shuffle_index(b, c, dims, s);
    let mut out = vec![0.0; t.numel()];
    for (o, &i) in idx.iter().enumerate() {
        out[i] = t.data()[o];
    }
    Ok(Tensor::new(&[b, c * s * s * s, dims[0], dims[1], dims[2]], out))
}

pub fn pixel_shuffle_var(g: &mut Graph, x: Var, s: usize) -> Result<Var> {
    let (b, c, dims) = shuffle_dims(g.shape(x), s)?;
    let idx = pixel_shuffle_index(b, c, dims, s);
    Ok(g.gather(x, idx.into(), 1, &[b, c, dims[0] * s, dims[1] * s, dims[2] * s]))
}

/// ICNR initialization of a `[C_out, C_in, k, k, k]` convolution feeding an
/// `s`-fold pixel shuffle: `C_out / s^3` base filters, each replicated to its
/// `s^3` consecutive output channels, so the shuffled output repeats one
/// value per `s^3` block.
pub fn icnr_init<R: Rng>(cout: usize, cin: usize, k: usize, s: usize, rng: &mut R) -> Result<Tensor> {
    let s3 = s * s * s;
    if s == 0 || cout % s3 != 0 {
        return Err(Error::Shape(format!("{cout} output channels not divisible by {s3}")));
    }
    let per = cin * k * k * k;
    let bound = 1.0 / (per as f64).sqrt();
    let base = uniform_tensor(&[cout / s3, per], bound, rng);
    let mut w = Vec::with_capacity(cout * per);
    for o in 0..cout {
        let b = o / s3;
        w.extend_from_slice(&base.data()[b * per..(b + 1) * per]);
    }
    Ok(Tensor::new(&[cout, cin, k, k, k], w))
}

/// Largest variance among the `s^3` blocks of a `[B, C, sH, sW, sD]` output.
pub fn max_block_variance(t: &Tensor, s: usize) -> f64 {
    let un = pixel_unshuffle_3d(t, s).expect("divisible output");
    let (b, c) = (t.dim(0), t.dim(1));
    let s3 = s * s * s;
    let voxels = un.numel() / (b * c * s3);
    let mut worst = 0.0f64;
    for bc in 0..b * c {
        for v in 0..voxels {
            let vals: Vec<f64> = (0..s3).map(|j| un.data()[(bc * s3 + j) * voxels + v]).collect();
            // offset from the first value so identical blocks give exactly 0
            let mean = vals[0] + vals.iter().map(|x| x - vals[0]).sum::<f64>() / s3 as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s3 as f64;
            worst = worst.max(var);
        }
    }
    worst
}

/// Token deconvolution index: tokens `[B, N, C * p^3]` (features ordered
/// `(c, dx, dy, dz)`) to a `[B, C, e, e, e]` volume with `e = p * cbrt(N)`.
fn deconv_index(batch: usize, channels: usize, token_edge: usize, p: usize) -> Vec<usize> {
    let e = token_edge * p;
    let p3 = p * p * p;
    let n = token_edge.pow(3);
    let mut idx = Vec::with_capacity(batch * channels * e.pow(3));
    for b in 0..batch {
        for c in 0..channels {
            for x in 0..e {
                for y in 0..e {
                    for z in 0..e {
                        let t = ((x / p) * token_edge + y / p) * token_edge + z / p;
                        let sub = ((x % p) * p + y % p) * p + z % p;
                        idx.push((b * n + t) * channels * p3 + c * p3 + sub);
                    }
                }
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct Mtvnet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Mtvnet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng)?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expected = init_params(&cfg, &mut rng)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model needs {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(Self { cfg, params })
    }

    /// LR context extents of the active levels, coarsest first.
    pub fn context_extents(&self) -> Vec<usize> {
        self.cfg.active_levels().iter().map(|l| l.context).collect()
    }

    /// Inference without gradient bookkeeping. `contexts` are
    /// `[B, C_in, e, e, e]` tensors, coarsest first.
    pub fn predict(&self, contexts: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xs: Vec<Var> = contexts.iter().map(|t| g.constant(t.clone())).collect();
        let y = forward(&mut g, &p, &self.cfg, &xs)?;
        Ok(g.value(y).clone())
    }
}

pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let d = LayerDims::from_config(cfg);
    let c = cfg.embed_dim;
    let levels = cfg.active_levels();
    {
        let mut init = Init::new(&mut store, rng);
        for (i, lvl) in levels.iter().enumerate() {
            let name = level_name(cfg, i);
            init.conv(&format!("{name}.sfe"), cfg.in_channels, c, 3);
            if i > 0 && cfg.fusion == FusionMode::Concat {
                init.conv(&format!("{name}.fuse"), 2 * c, c, 1);
            }
            init.linear(&format!("{name}.embed"), c * lvl.patch_size.pow(3), c);
            if cfg.features.use_cat {
                let k = cfg.cat_stride();
                init.linear(&format!("{name}.cat_init"), c * k.pow(3), c);
                let ncat = (lvl.token_edge() / k).pow(3);
                init.normal(&format!("{name}.cat_init.pos"), &[ncat, c], 0.02);
            }
            init_dchat_group(&mut init, &format!("{name}.group"), &d, lvl.blocks, lvl.layers, i > 0);
        }
        let p1 = cfg.finest().patch_size;
        init.linear("head.deconv", c, c * p1.pow(3));
        init.conv("head.pre1", c, c, 3);
        init.conv("head.pre2", c, c, 3);
        init.conv("head.halve", c, c / 2, 1);
    }
    for (i, s) in cfg.shuffle_factors().into_iter().enumerate() {
        let half = c / 2;
        let w = icnr_init(half * s.pow(3), half, 1, s, rng)?;
        store.insert(format!("head.up{i}.weight"), w);
        store.insert(format!("head.up{i}.bias"), Tensor::zeros(&[half * s.pow(3)]));
    }
    Init::new(&mut store, rng).conv("head.out", c / 2, cfg.in_channels, 1);
    Ok(store)
}

/// Parameter count from the architecture formula (no allocation):
///
/// per level: `SFE conv(C_in -> C, 3^3)` + `[concat fusion conv(2C -> C, 1)]`
/// + `embed linear(C p^3 -> C)` + `[CAT init linear(C k^3 -> C) + N_cat C]`
/// + blocks; head: `deconv linear(C -> C p1^3)` + 2 `conv(C -> C, 3^3)`
/// + `conv(C -> C/2, 1)` + per shuffle stage `conv(C/2 -> C/2 s^3, 1)`
/// + `conv(C/2 -> C_in, 1)`.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let d = LayerDims::from_config(cfg);
    let c = cfg.embed_dim;
    let mut n = 0;
    for (i, lvl) in cfg.active_levels().iter().enumerate() {
        n += conv_count(cfg.in_channels, c, 3);
        if i > 0 && cfg.fusion == FusionMode::Concat {
            n += conv_count(2 * c, c, 1);
        }
        n += linear_count(c * lvl.patch_size.pow(3), c);
        if cfg.features.use_cat {
            let k = cfg.cat_stride();
            n += linear_count(c * k.pow(3), c) + (lvl.token_edge() / k).pow(3) * c;
        }
        n += lvl.blocks * dchat_block_param_count(&d, lvl.layers, i > 0);
    }
    n += linear_count(c, c * cfg.finest().patch_size.pow(3));
    n += 2 * conv_count(c, c, 3) + conv_count(c, c / 2, 1);
    n += cfg
        .shuffle_factors()
        .iter()
        .map(|s| conv_count(c / 2, c / 2 * s.pow(3), 1))
        .sum::<usize>();
    n + conv_count(c / 2, cfg.in_channels, 1)
}

/// Builds the network on `g`. `contexts` hold one `[B, C_in, e, e, e]` input
/// per active level, coarsest first. Returns `[B, C_in, s e1, s e1, s e1]`.
pub fn forward(g: &mut Graph, p: &Bound, cfg: &ModelConfig, contexts: &[Var]) -> Result<Var> {
    let levels = cfg.active_levels();
    if contexts.len() != levels.len() {
        return Err(Error::Shape(format!(
            "model expects {} context crops, got {}",
            levels.len(),
            contexts.len()
        )));
    }
    let batch = g.shape(contexts[0])[0];
    for (lvl, &x) in levels.iter().zip(contexts) {
        let s = g.shape(x);
        let e = lvl.context;
        if s != [batch, cfg.in_channels, e, e, e] {
            return Err(Error::Shape(format!(
                "context crop {s:?} does not match level extent [{batch}, {}, {e}, {e}, {e}]",
                cfg.in_channels
            )));
        }
    }
    let d = LayerDims::from_config(cfg);
    let cat = d.cat;
    let mut prev_sfe: Option<Var> = None;
    let mut prev_tokens: Option<SvhatState> = None;
    for (i, (lvl, &x)) in levels.iter().zip(contexts).enumerate() {
        let name = level_name(cfg, i);
        let mut f = sfe(g, p, &format!("{name}.sfe"), x)?;
        if let Some(prev) = prev_sfe {
            let crop = crop_and_pass(g, prev, lvl.context)?;
            f = match cfg.fusion {
                FusionMode::Add => g.add(f, crop),
                FusionMode::Concat => {
                    let both = g.concat(&[f, crop], 1);
                    p.conv(g, &format!("{name}.fuse"), both)
                }
            };
        }
        let ites = embed_patches(g, p, &format!("{name}.embed"), f, lvl.patch_size)?;
        let te = lvl.token_edge();
        let cats = match cat {
            Some(_) => Some(init_cats(g, p, &format!("{name}.cat_init"), ites, te, cfg.cat_stride())?),
            None => None,
        };
        let plan = LevelPlan::new(batch, te, cfg.window, cat, cfg.heads)?;
        let state = dchat_group(
            g,
            p,
            &format!("{name}.group"),
            &d,
            &plan,
            SvhatState { ites, cats },
            prev_tokens.as_ref(),
            lvl.blocks,
            lvl.layers,
            cfg.features.use_cyclic_shift,
        )?;
        prev_sfe = Some(f);
        prev_tokens = Some(state);
    }
    let tokens = prev_tokens.expect("at least one level").ites;
    let fin = cfg.finest();
    let c = cfg.embed_dim;
    let up = p.linear(g, "head.deconv", tokens);
    let idx = deconv_index(batch, c, fin.token_edge(), fin.patch_size);
    let e = fin.context;
    let vol = g.gather(up, idx.into(), 1, &[batch, c, e, e, e]);
    let h = p.conv(g, "head.pre1", vol);
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let h = p.conv(g, "head.pre2", h);
    let h = g.add(h, prev_sfe.expect("at least one level"));
    head_upsample(g, p, cfg, h)
}

/// Channel halving, ICNR pixel-shuffle stages and output projection.
pub fn head_upsample(g: &mut Graph, p: &Bound, cfg: &ModelConfig, h: Var) -> Result<Var> {
    let mut h = p.conv(g, "head.halve", h);
    for (i, s) in cfg.shuffle_factors().into_iter().enumerate() {
        let pre = p.conv(g, &format!("head.up{i}"), h);
        let shuffled = pixel_shuffle_var(g, pre, s)?;
        h = g.leaky_relu(shuffled, LEAKY_SLOPE);
    }
    Ok(p.conv(g, "head.out", h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Preset};

    #[test]
    fn shuffle_of_eight_channels_follows_index_map() {
        let t = Tensor::new(&[1, 8, 1, 1, 1], (0..8).map(|v| v as f64).collect());
        let o = pixel_shuffle_3d(&t, 2).unwrap();
        assert_eq!(o.shape(), &[1, 1, 2, 2, 2]);
        for a in 0..2 {
            for b in 0..2 {
                for e in 0..2 {
                    assert_eq!(o.data()[(a * 2 + b) * 2 + e], (a * 4 + b * 2 + e) as f64);
                }
            }
        }
    }

    #[test]
    fn shuffle_by_one_is_identity_and_unshuffle_inverts() {
        let t = Tensor::from_fn(&[2, 16, 2, 3, 1], |i| i as f64 * 0.5);
        assert_eq!(pixel_shuffle_3d(&t, 1).unwrap(), t);
        let o = pixel_shuffle_3d(&t, 2).unwrap();
        assert_eq!(pixel_unshuffle_3d(&o, 2).unwrap(), t);
        assert!(pixel_shuffle_3d(&Tensor::zeros(&[1, 4, 1, 1, 1]), 2).is_err());
    }

    #[test]
    fn analytic_count_matches_every_preset() {
        for preset in [Preset::Desk, Preset::L1, Preset::L2, Preset::L3] {
            let mut cfg = ExperimentConfig::preset(preset).model;
            for fusion in [FusionMode::Add, FusionMode::Concat] {
                cfg.fusion = fusion;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let store = init_params(&cfg, &mut rng).unwrap();
                assert_eq!(store.count(), analytic_param_count(&cfg), "{preset:?}");
            }
        }
    }
}
