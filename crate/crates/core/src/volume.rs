//! Intensity volumes, the on-disk volume store, degradation and patch
//! sampling.
//!
//! Data is channel-first `[C, X, Y, Z]` with `z` varying fastest. The store
//! format is a single file: a text header followed by raw little-endian
//! `float32` samples in the same order.
//!
//! ```text
//! MTVVOL1
//! dims 64 64 64
//! channels 1
//! spacing 1 1 1
//! dtype float32le
//! name hr_000
//! end
//! <C*X*Y*Z float32 values>
//! ```

use std::io::Write as _;
use std::path::Path;

use mtv_autograd::Tensor;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &str = "MTVVOL1";

/// Threshold above which a normalized voxel counts as foreground.
pub const FOREGROUND_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: [usize; 3],
    pub spacing: [f64; 3],
    pub name: String,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        if data.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "volume {channels}x{dims:?} needs {n} samples, got {}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            spacing: [1.0; 3],
            name: String::new(),
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self::filled(channels, dims, 0.0)
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: f64) -> Self {
        Self::new(channels, dims, vec![value; channels * dims.iter().product::<usize>()])
            .expect("sizes agree")
    }

    /// Builds a volume by evaluating `f(c, x, y, z)` at every voxel.
    pub fn from_fn(
        channels: usize,
        dims: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
        for c in 0..channels {
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    for z in 0..dims[2] {
                        data.push(f(c, x, y, z));
                    }
                }
            }
        }
        Self::new(channels, dims, data).expect("sizes agree")
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[0] + x) * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    /// One channel as a contiguous `X*Y*Z` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Per-volume min-max normalization to `[0, 1]`. Constant volumes map to 0.
    pub fn normalize(&mut self) {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        for v in &mut self.data {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("value in volume '{}'", self.name)))
        }
    }

    /// Rounds every sample to the nearest `f32`, the precision of the store.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Sub-volume `[origin, origin + edge)`; positions outside the volume are
    /// filled by half-sample symmetric reflection when `reflect` is set.
    pub fn crop(&self, origin: [isize; 3], edge: [usize; 3], reflect: bool) -> Result<Volume> {
        for a in 0..3 {
            let inside = origin[a] >= 0 && origin[a] + edge[a] as isize <= self.dims[a] as isize;
            if !inside && !reflect {
                return Err(Error::Geometry(format!(
                    "crop [{}, {}) leaves axis {a} of extent {} and padding is disabled",
                    origin[a],
                    origin[a] + edge[a] as isize,
                    self.dims[a]
                )));
            }
        }
        let maps: Vec<Vec<usize>> = (0..3)
            .map(|a| {
                (0..edge[a])
                    .map(|i| reflect_index(origin[a] + i as isize, self.dims[a]))
                    .collect()
            })
            .collect();
        let mut data = Vec::with_capacity(self.channels * edge.iter().product::<usize>());
        for c in 0..self.channels {
            for &x in &maps[0] {
                for &y in &maps[1] {
                    let row = self.index(c, x, y, 0);
                    data.extend(maps[2].iter().map(|&z| self.data[row + z]));
                }
            }
        }
        let mut out = Volume::new(self.channels, edge, data)?;
        out.spacing = self.spacing;
        out.name = self.name.clone();
        Ok(out)
    }

    /// Cube of edge `edge` centered on `center` (`[center - edge/2, center + edge/2)`).
    pub fn crop_centered(&self, center: [usize; 3], edge: usize, reflect: bool) -> Result<Volume> {
        let origin = center.map(|c| c as isize - (edge / 2) as isize);
        self.crop(origin, [edge; 3], reflect)
    }

    /// `[1, C, X, Y, Z]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [x, y, z] = self.dims;
        Tensor::new(&[1, self.channels, x, y, z], self.data.clone())
    }

    /// Stacks same-shaped volumes into a `[B, C, X, Y, Z]` batch.
    pub fn batch_tensor(vols: &[&Volume]) -> Tensor {
        let first = vols[0];
        let [x, y, z] = first.dims;
        let mut data = Vec::with_capacity(vols.len() * first.data.len());
        for v in vols {
            assert_eq!((v.channels, v.dims), (first.channels, first.dims), "batch shape mismatch");
            data.extend_from_slice(&v.data);
        }
        Tensor::new(&[vols.len(), first.channels, x, y, z], data)
    }

    /// Sample `b` of a `[B, C, X, Y, Z]` tensor.
    pub fn from_tensor(t: &Tensor, b: usize) -> Result<Volume> {
        if t.ndim() != 5 || b >= t.dim(0) {
            return Err(Error::Shape(format!("expected [B, C, X, Y, Z], got {:?}", t.shape())));
        }
        let n = t.numel() / t.dim(0);
        Volume::new(
            t.dim(1),
            [t.dim(2), t.dim(3), t.dim(4)],
            t.data()[b * n..(b + 1) * n].to_vec(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [x, y, z] = self.dims;
        let [sx, sy, sz] = self.spacing;
        let name = if self.name.is_empty() { "-" } else { self.name.as_str() };
        let mut out = format!(
            "{MAGIC}\ndims {x} {y} {z}\nchannels {}\nspacing {sx:?} {sy:?} {sz:?}\ndtype float32le\nname {}\nend\n",
            self.channels,
            name.replace(char::is_whitespace, "_")
        )
        .into_bytes();
        out.reserve(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Volume> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(path, "truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::format(path, "header is not UTF-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(Error::format(path, format!("missing {MAGIC} magic")));
        }
        let mut dims = None;
        let mut channels = None;
        let mut spacing = [1.0; 3];
        let mut name = String::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let nums = |n: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = rest
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(path, format!("bad {key} line")))?;
                if v.len() != n {
                    return Err(Error::format(path, format!("{key} needs {n} values")));
                }
                Ok(v)
            };
            match key {
                "dims" => {
                    let v = nums(3)?;
                    dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
                }
                "channels" => channels = Some(nums(1)?[0] as usize),
                "spacing" => {
                    let v = nums(3)?;
                    spacing = [v[0], v[1], v[2]];
                }
                "dtype" if rest == "float32le" => {}
                "dtype" => return Err(Error::format(path, format!("unsupported dtype {rest}"))),
                "name" => name = if rest == "-" { String::new() } else { rest.to_string() },
                _ => return Err(Error::format(path, format!("unknown header key '{key}'"))),
            }
        }
        let dims = dims.ok_or_else(|| Error::format(path, "missing dims"))?;
        let channels = channels.ok_or_else(|| Error::format(path, "missing channels"))?;
        let n = channels * dims.iter().product::<usize>();
        let raw = &bytes[pos..];
        if raw.len() != n * 4 {
            return Err(Error::format(
                path,
                format!("expected {} payload bytes, found {}", n * 4, raw.len()),
            ));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut v = Volume::new(channels, dims, data).map_err(|e| Error::format(path, e.to_string()))?;
        v.spacing = spacing;
        v.name = name;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Volume> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Half-sample symmetric reflection (`x[-1] = x[0]`), period `2n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n2 = 2 * n as isize;
    let m = i.rem_euclid(n2) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Normalized 1-D Gaussian truncated at `4 sigma`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable isotropic Gaussian blur with symmetric boundary reflection.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return v.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let mut out = v.clone();
    for axis in 0..3 {
        out = convolve_axis(&out, axis, &kernel);
    }
    out
}

fn convolve_axis(v: &Volume, axis: usize, kernel: &[f64]) -> Volume {
    let radius = (kernel.len() / 2) as isize;
    let dims = v.dims;
    let n = dims[axis];
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let mut out = v.clone();
    let mut line = vec![0.0; n];
    for c in 0..v.channels {
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let pos = [x, y, z];
                    if pos[axis] != 0 {
                        continue;
                    }
                    let base = v.index(c, x, y, z);
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = v.data[base + i * stride];
                    }
                    for i in 0..n {
                        let mut acc = 0.0;
                        for (k, w) in kernel.iter().enumerate() {
                            let j = reflect_index(i as isize + k as isize - radius, n);
                            acc += w * line[j];
                        }
                        out.data[base + i * stride] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Blur (optional) then downsample by `scale`; each LR voxel is the mean of
/// its `scale^3` HR cell, i.e. linear interpolation at the cell center.
pub fn degrade(hr: &Volume, scale: usize, blur_sigma: Option<f64>) -> Result<Volume> {
    if scale == 0 || hr.dims.iter().any(|&d| d % scale != 0) {
        return Err(Error::Geometry(format!(
            "HR extent {:?} not divisible by scale {scale}",
            hr.dims
        )));
    }
    let blurred = match blur_sigma {
        Some(s) => gaussian_blur(hr, s),
        None => hr.clone(),
    };
    let ld = hr.dims.map(|d| d / scale);
    let norm = 1.0 / (scale * scale * scale) as f64;
    let mut out = Volume::from_fn(hr.channels, ld, |c, x, y, z| {
        let mut acc = 0.0;
        for a in 0..scale {
            for b in 0..scale {
                let row = blurred.index(c, x * scale + a, y * scale + b, z * scale);
                acc += blurred.data[row..row + scale].iter().sum::<f64>();
            }
        }
        acc * norm
    });
    out.spacing = hr.spacing.map(|s| s * scale as f64);
    out.name = hr.name.clone();
    Ok(out)
}

/// Default blur for a scale factor, `sigma = s / 2` HR voxels.
pub fn default_blur_sigma(scale: usize) -> f64 {
    scale as f64 / 2.0
}

/// Cell-centered trilinear upsampling with edge clamping.
pub fn trilinear_upsample(v: &Volume, scale: usize) -> Volume {
    let hd = v.dims.map(|d| d * scale);
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            let n = v.dims[a];
            (0..hd[a])
                .map(|j| {
                    let p = ((j as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                    let i0 = p.floor() as usize;
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, p - i0 as f64)
                })
                .collect()
        })
        .collect();
    let mut out = Volume::from_fn(v.channels, hd, |c, x, y, z| {
        let (x0, x1, fx) = taps[0][x];
        let (y0, y1, fy) = taps[1][y];
        let (z0, z1, fz) = taps[2][z];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let plane = |xi| {
            lerp(
                lerp(v.get(c, xi, y0, z0), v.get(c, xi, y0, z1), fz),
                lerp(v.get(c, xi, y1, z0), v.get(c, xi, y1, z1), fz),
                fy,
            )
        };
        lerp(plane(x0), plane(x1), fx)
    });
    out.spacing = v.spacing.map(|s| s / scale as f64);
    out.name = v.name.clone();
    out
}

/// `true` where the max over channels exceeds `eps`.
pub fn foreground_mask(v: &Volume, eps: f64) -> Vec<bool> {
    let n = v.voxels();
    (0..n)
        .map(|i| (0..v.channels).any(|c| v.data[c * n + i] > eps))
        .collect()
}

/// Concentric LR crops (coarsest first) and the HR target of the innermost.
#[derive(Clone, Debug)]
pub struct NestedPatch {
    pub lr_contexts: Vec<Volume>,
    pub hr_target: Volume,
    pub center: [usize; 3],
}

impl NestedPatch {
    /// Extracts the patch at `center` of the LR volume. Context extents are
    /// given coarsest first.
    pub fn extract(
        lr: &Volume,
        hr: Option<&Volume>,
        extents: &[usize],
        scale: usize,
        center: [usize; 3],
        padding: bool,
    ) -> Result<NestedPatch> {
        let lr_contexts = extents
            .iter()
            .map(|&e| lr.crop_centered(center, e, padding))
            .collect::<Result<Vec<_>>>()?;
        let inner = *extents.last().expect("at least one level");
        let hr_target = match hr {
            Some(hr) => {
                if hr.dims != lr.dims.map(|d| d * scale) {
                    return Err(Error::Shape(format!(
                        "HR extent {:?} is not {scale}x LR extent {:?}",
                        hr.dims, lr.dims
                    )));
                }
                let origin = center.map(|c| ((c - inner / 2) * scale) as isize);
                hr.crop(origin, [inner * scale; 3], false)?
            }
            None => Volume::zeros(lr.channels, [inner * scale; 3]),
        };
        Ok(NestedPatch {
            lr_contexts,
            hr_target,
            center,
        })
    }
}

/// Range `[lo, hi)` of valid centers per axis. Without padding the outermost
/// context must fit; with padding only the innermost (prediction) crop must.
pub fn center_range(dims: [usize; 3], extents: &[usize], padding: bool) -> Result<[(usize, usize); 3]> {
    let governing = if padding {
        *extents.last().expect("at least one level")
    } else {
        extents[0]
    };
    let mut out = [(0, 0); 3];
    for a in 0..3 {
        if dims[a] < governing || (dims[a] == governing && governing == 0) {
            return Err(Error::Geometry(format!(
                "volume extent {} on axis {a} is smaller than the context {governing}{}",
                dims[a],
                if padding { "" } else { " (padding disabled)" }
            )));
        }
        let lo = governing / 2;
        let hi = dims[a] - governing / 2;
        out[a] = (lo, hi.max(lo + 1));
    }
    Ok(out)
}

/// Uniformly samples a center and extracts the nested patch.
pub fn sample_nested<R: Rng>(
    lr: &Volume,
    hr: &Volume,
    cfg: &ModelConfig,
    padding: bool,
    rng: &mut R,
) -> Result<NestedPatch> {
    let extents: Vec<usize> = cfg.active_levels().iter().map(|l| l.context).collect();
    let range = center_range(lr.dims, &extents, padding)?;
    let center = range.map(|(lo, hi)| rng.gen_range(lo..hi));
    NestedPatch::extract(lr, Some(hr), &extents, cfg.scale, center, padding)
}
