//! On-disk layout under the data root:
//!
//! ```text
//! <root>/<dataset>/hr/<volume>.mtvvol
//! <root>/<dataset>/lr_x<s>/<volume>.mtvvol
//! <root>/runs/<run>/{config.cfg, ckpt_*.mtvckpt, last.mtvckpt, loss.csv, ...}
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtvnet::trainer::RunDir;
use mtvnet::Volume;

pub const VOLUME_EXT: &str = "mtvvol";

#[derive(Clone, Debug)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn dataset(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn hr_dir(&self, name: &str) -> PathBuf {
        self.dataset(name).join("hr")
    }

    pub fn lr_dir(&self, name: &str, scale: usize) -> PathBuf {
        self.dataset(name).join(format!("lr_x{scale}"))
    }

    pub fn run(&self, name: &str) -> RunDir {
        RunDir {
            root: self.root.join("runs").join(name),
        }
    }

    /// Scales with a stored LR directory for `name`, ascending.
    pub fn lr_scales(&self, name: &str) -> Vec<usize> {
        let mut out: Vec<usize> = std::fs::read_dir(self.dataset(name))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str()?.strip_prefix("lr_x")?.parse().ok())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Volume files of a directory, sorted by name.
pub fn volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == VOLUME_EXT))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dir(dir: &Path) -> Result<Vec<Volume>> {
    let files = volume_files(dir)?;
    if files.is_empty() {
        bail!("no .{VOLUME_EXT} volumes in {}", dir.display());
    }
    files.iter().map(|p| Ok(Volume::load(p)?)).collect()
}

/// HR/LR pairs matched by file name.
pub fn load_pairs(hr_dir: &Path, lr_dir: &Path) -> Result<Vec<(Volume, Volume)>> {
    let files = volume_files(hr_dir)?;
    if files.is_empty() {
        bail!("no .{VOLUME_EXT} volumes in {}", hr_dir.display());
    }
    files
        .iter()
        .map(|hr| {
            let lr = lr_dir.join(hr.file_name().expect("file path"));
            if !lr.exists() {
                bail!("{} has no LR counterpart at {}", hr.display(), lr.display());
            }
            Ok((Volume::load(hr)?, Volume::load(&lr)?))
        })
        .collect()
}
