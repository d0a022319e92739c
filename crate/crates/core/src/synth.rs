//! Synthetic HR volumes with multi-scale structure, used in place of MRI/CT
//! corpora for desk-scale runs.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    /// Nested ellipsoids of varying intensity on a zero background.
    Ellipsoid,
    /// Sum of random plane waves with integer frequency at most `cutoff`.
    Noise,
    /// Thin gyroid sheets modulated by a smooth field, like trabecular bone.
    Trabecular,
}

impl FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoid" => Ok(Generator::Ellipsoid),
            "noise" => Ok(Generator::Noise),
            "trabecular" => Ok(Generator::Trabecular),
            other => Err(Error::UnknownGenerator(other.to_string())),
        }
    }
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Ellipsoid => "ellipsoid",
            Generator::Noise => "noise",
            Generator::Trabecular => "trabecular",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub generator: Generator,
    pub count: usize,
    pub edge: usize,
    pub seed: u64,
    /// Highest integer frequency (cycles per volume) of the noise generator.
    pub cutoff: usize,
}

impl SynthSpec {
    pub fn new(generator: Generator, count: usize, edge: usize, seed: u64) -> Self {
        Self {
            generator,
            count,
            edge,
            seed,
            cutoff: (edge / 8).max(1),
        }
    }
}

/// Generates `spec.count` normalized volumes. Volume `i` depends only on
/// `(generator, edge, seed, i)`.
pub fn make_corpus(spec: &SynthSpec) -> Result<Vec<Volume>> {
    if spec.edge < 4 {
        return Err(Error::Data(format!("edge {} too small for a synthetic volume", spec.edge)));
    }
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut v = match spec.generator {
                Generator::Ellipsoid => ellipsoid_phantom(spec.edge, &mut rng).0,
                Generator::Noise => band_limited_noise(spec.edge, spec.cutoff, &mut rng),
                Generator::Trabecular => trabecular(spec.edge, &mut rng),
            };
            v.quantize_f32();
            v.with_name(format!("{}_{i:03}", spec.generator.name()))
        })
        .collect())
}

/// Semi-axes and center of an axis-aligned ellipsoid, in voxel units.
#[derive(Clone, Copy, Debug)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
}

impl Ellipsoid {
    /// Membership of the voxel center `(x, y, z)`.
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.level(x, y, z) <= 1.0
    }

    fn level(&self, x: usize, y: usize, z: usize) -> f64 {
        let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum()
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.axes.iter().product::<f64>()
    }
}

/// Brain-like phantom: an outer ellipsoid shell, an inner tissue ellipsoid,
/// and a few small bright inclusions, all inside the outer boundary. Returns
/// the volume and its outer boundary.
pub fn ellipsoid_phantom<R: Rng>(edge: usize, rng: &mut R) -> (Volume, Ellipsoid) {
    let e = edge as f64;
    let outer = Ellipsoid {
        center: [e / 2.0; 3].map(|c| c + rng.gen_range(-0.03..0.03) * e),
        axes: [0; 3].map(|_| rng.gen_range(0.30..0.42) * e),
    };
    let inner = Ellipsoid {
        center: outer.center,
        axes: outer.axes.map(|a| a * rng.gen_range(0.6..0.8)),
    };
    let inclusions: Vec<(Ellipsoid, f64)> = (0..6)
        .map(|_| {
            let r = rng.gen_range(0.04..0.10) * e;
            let dir: [f64; 3] = [0; 3].map(|_| rng.gen_range(-0.5..0.5));
            let center = [0, 1, 2].map(|a| outer.center[a] + dir[a] * inner.axes[a]);
            (
                Ellipsoid {
                    center,
                    axes: [r, r * rng.gen_range(0.6..1.4), r * rng.gen_range(0.6..1.4)],
                },
                rng.gen_range(0.85..1.0),
            )
        })
        .collect();
    let (shell, tissue) = (rng.gen_range(0.3..0.45), rng.gen_range(0.55..0.7));
    let phase = rng.gen_range(0.0..2.0 * PI);
    let vol = Volume::from_fn(1, [edge; 3], |_, x, y, z| {
        if !outer.contains(x, y, z) {
            return 0.0;
        }
        if let Some((_, v)) = inclusions.iter().find(|(el, _)| el.contains(x, y, z)) {
            return *v;
        }
        let base = if inner.contains(x, y, z) { tissue } else { shell };
        // gentle texture so the interior is not piecewise constant
        let t = (2.0 * PI * 3.0 * x as f64 / e + phase).sin() * (2.0 * PI * 2.0 * y as f64 / e).cos();
        base + 0.05 * t * (2.0 * PI * 2.5 * z as f64 / e + phase).sin()
    });
    // Values already live in (0, 1]; background stays exactly zero.
    (vol, outer)
}

/// Random plane waves `sum a_k cos(2 pi k.x / N + phi_k)` with integer
/// frequency vectors of infinity-norm at most `cutoff`, min-max normalized.
/// Periodic on the grid, so its DFT vanishes above the cutoff.
pub fn band_limited_noise<R: Rng>(edge: usize, cutoff: usize, rng: &mut R) -> Volume {
    let c = cutoff as i64;
    let waves: Vec<([f64; 3], f64, f64)> = (0..48)
        .map(|_| {
            let k = [0; 3].map(|_| rng.gen_range(-c..=c) as f64);
            let norm = (k.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1.0);
            (k, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0) / norm)
        })
        .collect();
    let n = edge as f64;
    let mut v = Volume::from_fn(1, [edge; 3], |_, x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        waves
            .iter()
            .map(|(k, phi, a)| a * (2.0 * PI * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) / n + phi).cos())
            .sum()
    });
    v.normalize();
    v
}

/// Gyroid sheet structure whose period and thickness drift smoothly over the
/// volume, giving structure at several scales.
pub fn trabecular<R: Rng>(edge: usize, rng: &mut R) -> Volume {
    let e = edge as f64;
    let period = rng.gen_range(10.0..14.0);
    let phase: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.0..2.0 * PI));
    let warp = band_limited_noise(edge, 2, rng);
    let density = band_limited_noise(edge, 1, rng);
    let mut v = Volume::from_fn(1, [edge; 3], |_, x, y, z| {
        let w = warp.get(0, x, y, z) - 0.5;
        let f = 2.0 * PI / (period * (1.0 + 0.3 * w));
        let (px, py, pz) = (
            f * x as f64 + phase[0],
            f * y as f64 + phase[1],
            f * z as f64 + phase[2],
        );
        let g = px.sin() * py.cos() + py.sin() * pz.cos() + pz.sin() * px.cos();
        let thickness = 0.25 + 0.35 * density.get(0, x, y, z);
        let sheet = 1.0 / (1.0 + ((g.abs() - thickness) / 0.08).exp());
        let r = (((x as f64 - e / 2.0).powi(2) + (y as f64 - e / 2.0).powi(2)) / (e * e)).sqrt();
        sheet * (1.0 - 0.4 * r)
    });
    v.normalize();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_generator_is_rejected() {
        assert!(matches!("voronoi".parse::<Generator>(), Err(Error::UnknownGenerator(_))));
    }

    #[test]
    fn volumes_are_normalized_and_distinct() {
        for g in [Generator::Ellipsoid, Generator::Noise, Generator::Trabecular] {
            let vols = make_corpus(&SynthSpec::new(g, 2, 16, 1)).unwrap();
            for v in &vols {
                let (lo, hi) = v.min_max();
                assert!(lo >= 0.0 && hi <= 1.0 && hi > lo, "{g:?}");
            }
            assert_ne!(vols[0].data(), vols[1].data());
        }
    }
}
