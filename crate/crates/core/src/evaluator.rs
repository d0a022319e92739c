//! Whole-volume tiled reconstruction with overlap blending, and the metric
//! report over paired ground-truth / low-resolution volumes.

use std::fmt::Write as _;

use log::warn;
use mtv_autograd::Tensor;

use crate::error::{Error, Result};
use crate::metrics::{volume_metrics, VolumeMetrics, MIN_FOREGROUND_FRACTION};
use crate::model::Mtvnet;
use crate::volume::{trilinear_upsample, NestedPatch, Volume};

/// Tile overlap in LR voxels; `4 s` in HR voxels.
pub const OVERLAP_LR: usize = 4;

/// Anything that maps nested LR contexts to an SR prediction of the
/// innermost one.
pub trait SrModel {
    fn scale(&self) -> usize;
    /// LR context edges, coarsest first; the last one is the tile edge.
    fn context_extents(&self) -> Vec<usize>;
    /// `contexts[i]: [B, C, e_i, e_i, e_i]` -> `[B, C, s e, s e, s e]` for the
    /// innermost edge `e`.
    fn predict(&self, contexts: &[Tensor]) -> Result<Tensor>;
}

impl SrModel for Mtvnet {
    fn scale(&self) -> usize {
        self.cfg.scale
    }

    fn context_extents(&self) -> Vec<usize> {
        Mtvnet::context_extents(self)
    }

    fn predict(&self, contexts: &[Tensor]) -> Result<Tensor> {
        Mtvnet::predict(self, contexts)
    }
}

/// Trilinear upsampling baseline. It reads a one-voxel halo around each tile
/// so tiled output equals whole-volume upsampling.
#[derive(Clone, Copy, Debug)]
pub struct TrilinearModel {
    pub scale: usize,
    pub tile: usize,
}

impl SrModel for TrilinearModel {
    fn scale(&self) -> usize {
        self.scale
    }

    fn context_extents(&self) -> Vec<usize> {
        vec![self.tile + 2, self.tile]
    }

    fn predict(&self, contexts: &[Tensor]) -> Result<Tensor> {
        let halo = &contexts[0];
        let s = self.scale;
        let e = self.tile * s;
        let mut out = Vec::with_capacity(halo.dim(0) * halo.dim(1) * e * e * e);
        for b in 0..halo.dim(0) {
            let up = trilinear_upsample(&Volume::from_tensor(halo, b)?, s);
            out.extend(up.crop([s as isize; 3], [e; 3], false)?.into_data());
        }
        Ok(Tensor::new(&[halo.dim(0), halo.dim(1), e, e, e], out))
    }
}

/// Tile origins along an axis of `n` voxels: stride `tile - overlap`, the
/// last tile clamped to end at the volume edge.
pub fn tile_origins(n: usize, tile: usize, overlap: usize) -> Result<Vec<usize>> {
    if tile == 0 || tile > n {
        return Err(Error::Geometry(format!("tile {tile} does not fit extent {n}")));
    }
    if overlap >= tile {
        return Err(Error::Geometry(format!("overlap {overlap} must be below tile {tile}")));
    }
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        let clamped = o.min(n - tile);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if o + tile >= n {
            break;
        }
        o += stride;
    }
    Ok(out)
}

/// 1-D blend weights of a tile of `len` HR voxels: raised-cosine ramps
/// `sin^2` over `overlap` voxels on each side that borders another tile,
/// flat elsewhere.
pub fn blend_ramp(len: usize, overlap: usize, ramp_start: bool, ramp_end: bool) -> Vec<f64> {
    let up = |i: usize| {
        let t = (i as f64 + 0.5) / overlap as f64;
        (std::f64::consts::FRAC_PI_2 * t).sin().powi(2)
    };
    (0..len)
        .map(|i| {
            let mut w = 1.0;
            if ramp_start && i < overlap {
                w *= up(i);
            }
            if ramp_end && len - 1 - i < overlap {
                w *= up(len - 1 - i);
            }
            w
        })
        .collect()
}

/// Origins (LR) and per-axis blend weights (HR) of a tiling.
#[derive(Clone, Debug)]
pub struct TilingPlan {
    pub origins: [Vec<usize>; 3],
    pub tile: usize,
    pub scale: usize,
    pub overlap_hr: usize,
}

impl TilingPlan {
    pub fn new(dims: [usize; 3], tile: usize, scale: usize) -> Result<Self> {
        let origins = [
            tile_origins(dims[0], tile, OVERLAP_LR)?,
            tile_origins(dims[1], tile, OVERLAP_LR)?,
            tile_origins(dims[2], tile, OVERLAP_LR)?,
        ];
        Ok(Self {
            origins,
            tile,
            scale,
            overlap_hr: OVERLAP_LR * scale,
        })
    }

    pub fn tiles(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.origins[0].iter().flat_map(move |&x| {
            self.origins[1]
                .iter()
                .flat_map(move |&y| self.origins[2].iter().map(move |&z| [x, y, z]))
        })
    }

    /// HR weights of the tile at LR origin `o` along `axis`.
    pub fn axis_weights(&self, axis: usize, o: usize) -> Vec<f64> {
        let list = &self.origins[axis];
        let first = o == list[0];
        let last = o == *list.last().expect("non-empty");
        blend_ramp(self.tile * self.scale, self.overlap_hr, !first, !last)
    }

    /// Accumulated (unnormalized) weight field over an HR grid.
    pub fn weight_field(&self, dims: [usize; 3]) -> Vec<f64> {
        let hd = dims.map(|d| d * self.scale);
        let mut field = vec![0.0; hd.iter().product()];
        for o in self.tiles() {
            let w: Vec<Vec<f64>> = (0..3).map(|a| self.axis_weights(a, o[a])).collect();
            let e = self.tile * self.scale;
            for i in 0..e {
                for j in 0..e {
                    for k in 0..e {
                        let (x, y, z) = (o[0] * self.scale + i, o[1] * self.scale + j, o[2] * self.scale + k);
                        field[(x * hd[1] + y) * hd[2] + z] += w[0][i] * w[1][j] * w[2][k];
                    }
                }
            }
        }
        field
    }
}

/// Predicts every tile independently and blends overlaps with normalized
/// raised-cosine weights. Outer contexts are reflect-padded at the volume
/// boundary when `padding` is set.
pub fn reconstruct(lr: &Volume, model: &dyn SrModel, padding: bool) -> Result<Volume> {
    let extents = model.context_extents();
    let tile = *extents.last().ok_or_else(|| Error::Shape("model has no context".into()))?;
    let s = model.scale();
    if !padding && lr.dims().iter().any(|&d| d < extents[0]) {
        return Err(Error::Geometry(format!(
            "volume {:?} smaller than context {} and padding is disabled",
            lr.dims(),
            extents[0]
        )));
    }
    let plan = TilingPlan::new(lr.dims(), tile, s)?;
    let c = lr.channels();
    let hd = lr.dims().map(|d| d * s);
    let hn: usize = hd.iter().product();
    let mut acc = vec![0.0; c * hn];
    let mut wsum = vec![0.0; hn];
    let e = tile * s;
    for o in plan.tiles() {
        let center = o.map(|v| v + tile / 2);
        let patch = NestedPatch::extract(lr, None, &extents, s, center, true)?;
        let inputs: Vec<Tensor> = patch.lr_contexts.iter().map(Volume::to_tensor).collect();
        let pred = model.predict(&inputs)?;
        if pred.shape() != [1, c, e, e, e] {
            return Err(Error::Shape(format!("model predicted {:?} for a {e}^3 tile", pred.shape())));
        }
        let w: Vec<Vec<f64>> = (0..3).map(|a| plan.axis_weights(a, o[a])).collect();
        let pd = pred.data();
        for i in 0..e {
            for j in 0..e {
                for k in 0..e {
                    let wt = w[0][i] * w[1][j] * w[2][k];
                    let pos = ((o[0] * s + i) * hd[1] + o[1] * s + j) * hd[2] + o[2] * s + k;
                    wsum[pos] += wt;
                    for ch in 0..c {
                        acc[ch * hn + pos] += wt * pd[((ch * e + i) * e + j) * e + k];
                    }
                }
            }
        }
    }
    for ch in 0..c {
        for (a, w) in acc[ch * hn..(ch + 1) * hn].iter_mut().zip(&wsum) {
            *a /= w;
        }
    }
    let mut out = Volume::new(c, hd, acc)?;
    out.spacing = lr.spacing.map(|v| v / s as f64);
    out.name = lr.name.clone();
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    /// `(volume name, metrics)`; `None` for volumes without a qualifying slice.
    pub volumes: Vec<(String, Option<VolumeMetrics>)>,
}

impl MetricsReport {
    pub fn aggregate(&self) -> Option<VolumeMetrics> {
        let used: Vec<&VolumeMetrics> = self.volumes.iter().filter_map(|(_, m)| m.as_ref()).collect();
        if used.is_empty() {
            return None;
        }
        let n = used.len() as f64;
        Some(VolumeMetrics {
            psnr: used.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: used.iter().map(|m| m.ssim).sum::<f64>() / n,
            nrmse: used.iter().map(|m| m.nrmse).sum::<f64>() / n,
            slices_used: used.iter().map(|m| m.slices_used).sum(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("volume,psnr,ssim,nrmse,slices_used\n");
        let row = |s: &mut String, name: &str, m: &Option<VolumeMetrics>| match m {
            Some(m) => writeln!(s, "{name},{:.6},{:.6},{:.6},{}", m.psnr, m.ssim, m.nrmse, m.slices_used),
            None => writeln!(s, "{name},,,,0"),
        };
        for (name, m) in &self.volumes {
            row(&mut s, name, m).unwrap();
        }
        row(&mut s, "mean", &self.aggregate()).unwrap();
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, m) in &self.volumes {
            match m {
                Some(m) => writeln!(
                    s,
                    "{name:<20} PSNR {:7.3} dB  SSIM {:.4}  NRMSE {:.4}  ({} slices)",
                    m.psnr, m.ssim, m.nrmse, m.slices_used
                ),
                None => writeln!(s, "{name:<20} skipped: no slice with enough foreground"),
            }
            .unwrap();
        }
        match self.aggregate() {
            Some(m) => writeln!(
                s,
                "{:<20} PSNR {:7.3} dB  SSIM {:.4}  NRMSE {:.4}",
                "mean", m.psnr, m.ssim, m.nrmse
            ),
            None => writeln!(s, "no volume had a qualifying slice"),
        }
        .unwrap();
        s
    }
}

/// Reconstructs each LR volume and scores it against its ground truth.
pub fn evaluate(pairs: &[(Volume, Volume)], model: &dyn SrModel, padding: bool) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for (gt, lr) in pairs {
        let sr = reconstruct(lr, model, padding)?;
        if sr.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "reconstruction {:?} does not match ground truth {:?}",
                sr.dims(),
                gt.dims()
            )));
        }
        let m = volume_metrics(gt, &sr, MIN_FOREGROUND_FRACTION);
        if m.is_none() {
            warn!("volume '{}' has no slice with enough foreground; skipped", gt.name);
        }
        report.volumes.push((gt.name.clone(), m));
    }
    Ok(report)
}
