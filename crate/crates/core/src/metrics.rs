//! Slice-wise image quality metrics.
//!
//! All metrics assume intensities in `[0, 1]` (data range 1). Volumes are
//! scored slice by slice along the last axis.

use crate::volume::{Volume, FOREGROUND_EPS};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Slices whose ground-truth foreground fraction is below this are skipped.
pub const MIN_FOREGROUND_FRACTION: f64 = 0.25;

/// A 2-D image, row-major `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Slice {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "slice size");
        Self { rows, cols, data }
    }

    /// Slice `z` of channel `c` of a volume, indexed `[x, y]`.
    pub fn from_volume(v: &Volume, c: usize, z: usize) -> Self {
        let [x, y, _] = v.dims();
        let data = (0..x)
            .flat_map(|i| (0..y).map(move |j| (i, j)))
            .map(|(i, j)| v.get(c, i, j, z))
            .collect();
        Self::new(x, y, data)
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "metric inputs differ in size");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

/// `RMSE / RMS(reference)`; zero when both are identical.
pub fn nrmse(reference: &[f64], test: &[f64]) -> f64 {
    let m = mse(reference, test);
    if m == 0.0 {
        return 0.0;
    }
    let rms = (reference.iter().map(|v| v * v).sum::<f64>() / reference.len() as f64).sqrt();
    m.sqrt() / rms
}

/// Summed-area table with a zero border row and column.
fn integral(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let w = cols + 1;
    let mut s = vec![0.0; (rows + 1) * w];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += f(r * cols + c);
            s[(r + 1) * w + c + 1] = s[r * w + c + 1] + acc;
        }
    }
    s
}

fn box_sum(s: &[f64], cols: usize, r: usize, c: usize, k: usize) -> f64 {
    let w = cols + 1;
    s[(r + k) * w + c + k] - s[r * w + c + k] - s[(r + k) * w + c] + s[r * w + c]
}

/// Mean SSIM over all valid 7x7 windows with uniform weights and sample
/// (co)variances. Slices smaller than the window are scored as one window
/// spanning the whole slice.
pub fn ssim(a: &Slice, b: &Slice) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "SSIM inputs differ in size");
    let k = SSIM_WINDOW.min(a.rows).min(a.cols);
    let (x, y) = (&a.data, &b.data);
    let sx = integral(a.rows, a.cols, |i| x[i]);
    let sy = integral(a.rows, a.cols, |i| y[i]);
    let sxx = integral(a.rows, a.cols, |i| x[i] * x[i]);
    let syy = integral(a.rows, a.cols, |i| y[i] * y[i]);
    let sxy = integral(a.rows, a.cols, |i| x[i] * y[i]);
    let n = (k * k) as f64;
    let cov_norm = n / (n - 1.0).max(1.0);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=a.rows - k {
        for c in 0..=a.cols - k {
            let mx = box_sum(&sx, a.cols, r, c, k) / n;
            let my = box_sum(&sy, a.cols, r, c, k) / n;
            let vx = cov_norm * (box_sum(&sxx, a.cols, r, c, k) / n - mx * mx);
            let vy = cov_norm * (box_sum(&syy, a.cols, r, c, k) / n - my * my);
            let vxy = cov_norm * (box_sum(&sxy, a.cols, r, c, k) / n - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub slices_used: usize,
}

/// Averages slice metrics over slices (along the last axis) whose ground-truth
/// foreground fraction reaches `min_fraction`. `None` when no slice qualifies.
pub fn volume_metrics(gt: &Volume, pred: &Volume, min_fraction: f64) -> Option<VolumeMetrics> {
    assert_eq!((gt.channels(), gt.dims()), (pred.channels(), pred.dims()), "volume metric shapes");
    let [_, _, nz] = gt.dims();
    let (mut p, mut s, mut e, mut used) = (0.0, 0.0, 0.0, 0usize);
    for z in 0..nz {
        let slices: Vec<(Slice, Slice)> = (0..gt.channels())
            .map(|c| (Slice::from_volume(gt, c, z), Slice::from_volume(pred, c, z)))
            .collect();
        let px = slices[0].0.data.len();
        let fg = (0..px)
            .filter(|&i| slices.iter().any(|(g, _)| g.data[i] > FOREGROUND_EPS))
            .count();
        if (fg as f64) < min_fraction * px as f64 {
            continue;
        }
        let nc = slices.len() as f64;
        for (g, q) in &slices {
            p += psnr(&g.data, &q.data) / nc;
            s += ssim(g, q) / nc;
            e += nrmse(&g.data, &q.data) / nc;
        }
        used += 1;
    }
    (used > 0).then(|| VolumeMetrics {
        psnr: p / used as f64,
        ssim: s / used as f64,
        nrmse: e / used as f64,
        slices_used: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_pair_hand_case() {
        let a = vec![0.5; 64];
        let b = vec![0.75; 64];
        assert!((mse(&a, &b) - 0.0625).abs() < 1e-15);
        assert!((psnr(&a, &b) - 10.0 * 16f64.log10()).abs() < 1e-12);
        assert!((psnr(&a, &b) - 12.0412).abs() < 1e-3);
    }

    #[test]
    fn identical_slices_are_perfect() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let s = Slice::new(10, 10, data.clone());
        assert_eq!(psnr(&data, &data), PSNR_CAP);
        assert_eq!(nrmse(&data, &data), 0.0);
        assert!((ssim(&s, &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_foreground_skips_volume() {
        let v = Volume::zeros(1, [8, 8, 8]);
        assert!(volume_metrics(&v, &v, MIN_FOREGROUND_FRACTION).is_none());
    }
}
