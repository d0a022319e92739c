//! Model, training and data configuration.
//!
//! Configurations are stored as flat `key = value` text, one entry per line,
//! `#` starting a comment. Every key has a default, so a file only needs the
//! entries it changes. [`ExperimentConfig::to_text`] writes the canonical
//! form with every key, which parses back to an identical value.
//!
//! | key | meaning |
//! |-----|---------|
//! | `model.levels` | number of network levels `N` |
//! | `model.level.<i>.patch_size` | tokenizer patch edge for level `i` (0 = coarsest) |
//! | `model.level.<i>.context` | LR context edge in voxels |
//! | `model.level.<i>.blocks` | DCHAT blocks in the level's group |
//! | `model.level.<i>.layers` | SVHAT layers per block |
//! | `model.window` | attention window edge `M` in tokens |
//! | `model.cat_size` | carrier-token edge `c` per window |
//! | `model.embed_dim` / `model.skip_dim` | `C_emb` / `C_skip` |
//! | `model.in_channels`, `model.scale`, `model.heads`, `model.mlp_ratio` | |
//! | `model.use_cyclic_shift`, `model.use_cat`, `model.use_multicontext` | ablation switches |
//! | `model.attention` | `dot` or `cosine` |
//! | `model.fusion` | `add` or `concat` (cross-level shallow feature fusion) |
//! | `model.max_cats` | cap on carrier tokens per level for full CAT attention |
//! | `train.batch_size`, `train.lr`, `train.beta1`, `train.beta2` | |
//! | `train.milestones` | comma-separated iterations where the rate halves |
//! | `train.total_iters`, `train.loss`, `train.seed` | |
//! | `train.checkpoint_every`, `train.grad_clip` | `grad_clip = none` disables clipping |
//! | `data.blur`, `data.blur_sigma`, `data.padding` | degradation and sampling |

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Fractions of the full schedule at which the learning rate halves
/// (50k/70k/85k/95k of 100k iterations).
pub const MILESTONE_FRACTIONS: [f64; 4] = [0.50, 0.70, 0.85, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub patch_size: usize,
    /// Edge of the cubic LR context fed to this level, in voxels.
    pub context: usize,
    pub blocks: usize,
    pub layers: usize,
}

impl LevelSpec {
    pub fn token_edge(&self) -> usize {
        self.context / self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Features {
    pub use_cyclic_shift: bool,
    pub use_cat: bool,
    pub use_multicontext: bool,
}

impl Features {
    pub const ALL: Features = Features {
        use_cyclic_shift: true,
        use_cat: true,
        use_multicontext: true,
    };

    /// The four ablation rows, in table order: SW-MSA, MSA w. CAT,
    /// SW-MSA w. CAT, full model.
    pub fn ablation_rows() -> [(&'static str, Features); 4] {
        let f = |s, c, m| Features {
            use_cyclic_shift: s,
            use_cat: c,
            use_multicontext: m,
        };
        [
            ("SW-MSA", f(true, false, false)),
            ("MSA w. CAT", f(false, true, false)),
            ("SW-MSA w. CAT", f(true, true, false)),
            ("MTVNet", f(true, true, true)),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// `softmax(q k^T / sqrt(d))`
    Dot,
    /// Cosine similarity with a learnable per-head temperature.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Add,
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Coarsest level first; the last level is the prediction level.
    pub levels: Vec<LevelSpec>,
    pub window: usize,
    pub cat_size: usize,
    pub embed_dim: usize,
    pub skip_dim: usize,
    pub in_channels: usize,
    pub scale: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub features: Features,
    pub attention: AttentionKind,
    pub fusion: FusionMode,
    pub max_cats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub milestones: Vec<usize>,
    pub total_iters: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub blur: bool,
    /// Gaussian sigma in HR voxels; `None` means `scale / 2`.
    pub blur_sigma: Option<f64>,
    /// Reflect-pad contexts that leave the volume instead of rejecting them.
    pub padding: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Token bookkeeping for one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCounts {
    pub token_edge: usize,
    pub n_ites: usize,
    pub n_windows: usize,
    pub n_cats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Single level, small enough to train on a laptop CPU.
    Desk,
    L1,
    L2,
    L3,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "l1" => Ok(Preset::L1),
            "l2" => Ok(Preset::L2),
            "l3" => Ok(Preset::L3),
            _ => Err(Error::InvalidConfig(format!("unknown preset '{s}'"))),
        }
    }
}

fn level(patch_size: usize, context: usize, blocks: usize, layers: usize) -> LevelSpec {
    LevelSpec {
        patch_size,
        context,
        blocks,
        layers,
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: vec![level(2, 32, 3, 6)],
            window: 8,
            cat_size: 4,
            embed_dim: 128,
            skip_dim: 64,
            in_channels: 1,
            scale: 4,
            heads: 4,
            mlp_ratio: 2.0,
            features: Features::ALL,
            attention: AttentionKind::Dot,
            fusion: FusionMode::Add,
            max_cats: 4096,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            lr: 2e-4,
            betas: (0.9, 0.999),
            milestones: vec![50_000, 70_000, 85_000, 95_000],
            total_iters: 100_000,
            loss: LossKind::L1,
            seed: 0,
            checkpoint_every: 5_000,
            grad_clip: None,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            blur: true,
            blur_sigma: None,
            padding: true,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::L1)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        };
        match preset {
            Preset::L1 => {}
            Preset::L2 => cfg.model.levels = vec![level(4, 64, 2, 6), level(2, 32, 3, 6)],
            Preset::L3 => {
                cfg.model.levels = vec![level(8, 128, 1, 6), level(4, 64, 2, 6), level(2, 32, 3, 6)]
            }
            Preset::Desk => {
                cfg.model = ModelConfig {
                    levels: vec![level(2, 16, 1, 2)],
                    window: 4,
                    cat_size: 2,
                    embed_dim: 32,
                    skip_dim: 16,
                    scale: 2,
                    ..ModelConfig::default()
                };
                cfg.train = TrainConfig {
                    batch_size: 1,
                    lr: 3e-3,
                    checkpoint_every: 500,
                    ..TrainConfig::default()
                }
                .with_total_iters(2000);
            }
        }
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        Self::from_entries(&entries, &[])
    }

    /// Parses `text`, then applies `key=value` overrides, then validates.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut extra = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override '{o}' is not key=value")))?;
            extra.push((0, k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_entries(&entries, &extra)
    }

    fn from_entries(entries: &[Entry], overrides: &[Entry]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        // Level count first so per-level keys can land anywhere in the file.
        let all: Vec<&Entry> = entries.iter().chain(overrides).collect();
        if let Some((line, _, v)) = all.iter().rev().find(|(_, k, _)| k == "model.levels") {
            let n: usize = parse_value(*line, "model.levels", v)?;
            if n == 0 || n > 3 {
                return Err(Error::InvalidConfig(format!("model.levels must be 1..=3, got {n}")));
            }
            let template = cfg.model.levels.last().cloned().unwrap();
            cfg.model.levels = vec![template; n];
        }
        for (line, key, value) in all {
            cfg.set(*line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.levels" => {}
            "model.window" => m.window = parse_value(line, key, v)?,
            "model.cat_size" => m.cat_size = parse_value(line, key, v)?,
            "model.embed_dim" => m.embed_dim = parse_value(line, key, v)?,
            "model.skip_dim" => m.skip_dim = parse_value(line, key, v)?,
            "model.in_channels" => m.in_channels = parse_value(line, key, v)?,
            "model.scale" => m.scale = parse_value(line, key, v)?,
            "model.heads" => m.heads = parse_value(line, key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse_value(line, key, v)?,
            "model.use_cyclic_shift" => m.features.use_cyclic_shift = parse_bool(line, key, v)?,
            "model.use_cat" => m.features.use_cat = parse_bool(line, key, v)?,
            "model.use_multicontext" => m.features.use_multicontext = parse_bool(line, key, v)?,
            "model.attention" => {
                m.attention = match v {
                    "dot" => AttentionKind::Dot,
                    "cosine" => AttentionKind::Cosine,
                    _ => return Err(bad(line, key, v)),
                }
            }
            "model.fusion" => {
                m.fusion = match v {
                    "add" => FusionMode::Add,
                    "concat" => FusionMode::Concat,
                    _ => return Err(bad(line, key, v)),
                }
            }
            "model.max_cats" => m.max_cats = parse_value(line, key, v)?,
            "train.batch_size" => t.batch_size = parse_value(line, key, v)?,
            "train.lr" => t.lr = parse_value(line, key, v)?,
            "train.beta1" => t.betas.0 = parse_value(line, key, v)?,
            "train.beta2" => t.betas.1 = parse_value(line, key, v)?,
            "train.milestones" => {
                t.milestones = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| parse_value(line, key, s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "train.total_iters" => t.total_iters = parse_value(line, key, v)?,
            "train.loss" => {
                t.loss = match v {
                    "l1" => LossKind::L1,
                    _ => return Err(bad(line, key, v)),
                }
            }
            "train.seed" => t.seed = parse_value(line, key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_value(line, key, v)?,
            "train.grad_clip" => {
                t.grad_clip = if v == "none" { None } else { Some(parse_value(line, key, v)?) }
            }
            "data.blur" => d.blur = parse_bool(line, key, v)?,
            "data.blur_sigma" => {
                d.blur_sigma = if v == "auto" { None } else { Some(parse_value(line, key, v)?) }
            }
            "data.padding" => d.padding = parse_bool(line, key, v)?,
            _ => {
                let Some(rest) = key.strip_prefix("model.level.") else {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key '{key}'"),
                    });
                };
                let (idx, field) = rest.split_once('.').ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("malformed level key '{key}'"),
                })?;
                let idx: usize = parse_value(line, key, idx)?;
                let n = m.levels.len();
                let lvl = m.levels.get_mut(idx).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("level index {idx} out of range for {n} levels"),
                })?;
                match field {
                    "patch_size" => lvl.patch_size = parse_value(line, key, v)?,
                    "context" => lvl.context = parse_value(line, key, v)?,
                    "blocks" => lvl.blocks = parse_value(line, key, v)?,
                    "layers" => lvl.layers = parse_value(line, key, v)?,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("unknown level field '{field}'"),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text form with every key present.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let _ = writeln!(s, "model.levels = {}", m.levels.len());
        for (i, l) in m.levels.iter().enumerate() {
            let _ = writeln!(s, "model.level.{i}.patch_size = {}", l.patch_size);
            let _ = writeln!(s, "model.level.{i}.context = {}", l.context);
            let _ = writeln!(s, "model.level.{i}.blocks = {}", l.blocks);
            let _ = writeln!(s, "model.level.{i}.layers = {}", l.layers);
        }
        let _ = writeln!(s, "model.window = {}", m.window);
        let _ = writeln!(s, "model.cat_size = {}", m.cat_size);
        let _ = writeln!(s, "model.embed_dim = {}", m.embed_dim);
        let _ = writeln!(s, "model.skip_dim = {}", m.skip_dim);
        let _ = writeln!(s, "model.in_channels = {}", m.in_channels);
        let _ = writeln!(s, "model.scale = {}", m.scale);
        let _ = writeln!(s, "model.heads = {}", m.heads);
        let _ = writeln!(s, "model.mlp_ratio = {:?}", m.mlp_ratio);
        let _ = writeln!(s, "model.use_cyclic_shift = {}", m.features.use_cyclic_shift);
        let _ = writeln!(s, "model.use_cat = {}", m.features.use_cat);
        let _ = writeln!(s, "model.use_multicontext = {}", m.features.use_multicontext);
        let attention = match m.attention {
            AttentionKind::Dot => "dot",
            AttentionKind::Cosine => "cosine",
        };
        let _ = writeln!(s, "model.attention = {attention}");
        let fusion = match m.fusion {
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
        };
        let _ = writeln!(s, "model.fusion = {fusion}");
        let _ = writeln!(s, "model.max_cats = {}", m.max_cats);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.lr = {:?}", t.lr);
        let _ = writeln!(s, "train.beta1 = {:?}", t.betas.0);
        let _ = writeln!(s, "train.beta2 = {:?}", t.betas.1);
        let ms: Vec<String> = t.milestones.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(s, "train.milestones = {}", ms.join(","));
        let _ = writeln!(s, "train.total_iters = {}", t.total_iters);
        let _ = writeln!(s, "train.loss = l1");
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.checkpoint_every = {}", t.checkpoint_every);
        match t.grad_clip {
            Some(c) => writeln!(s, "train.grad_clip = {c:?}"),
            None => writeln!(s, "train.grad_clip = none"),
        }
        .unwrap();
        let _ = writeln!(s, "data.blur = {}", d.blur);
        match d.blur_sigma {
            Some(v) => writeln!(s, "data.blur_sigma = {v:?}"),
            None => writeln!(s, "data.blur_sigma = auto"),
        }
        .unwrap();
        let _ = writeln!(s, "data.padding = {}", d.padding);
        s
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.levels.is_empty() || self.levels.len() > 3 {
            return err(format!("level count must be 1..=3, got {}", self.levels.len()));
        }
        if self.window == 0 {
            return err("window size M must be positive".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.patch_size == 0 || l.context == 0 || l.blocks == 0 || l.layers == 0 {
                return err(format!("level {i}: patch size, context, blocks and layers must be positive"));
            }
            if l.blocks > 3 {
                return err(format!("level {i}: DCHAT group depth must be 1..=3, got {}", l.blocks));
            }
            if l.context % l.patch_size != 0 {
                return err(format!(
                    "level {i}: context {} not divisible by patch size {}",
                    l.context, l.patch_size
                ));
            }
            if l.token_edge() % self.window != 0 {
                return err(format!(
                    "level {i}: token grid edge {} not divisible by window size {}",
                    l.token_edge(),
                    self.window
                ));
            }
            if l.context < 3 {
                return err(format!("level {i}: context must be at least 3 voxels"));
            }
        }
        for (i, pair) in self.levels.windows(2).enumerate() {
            let (outer, inner) = (&pair[0], &pair[1]);
            if outer.context <= inner.context || (outer.context - inner.context) % 2 != 0 {
                return err(format!(
                    "levels {i} and {}: contexts {} and {} are not concentric (coarser must be larger, difference even)",
                    i + 1,
                    outer.context,
                    inner.context
                ));
            }
        }
        if self.features.use_multicontext && self.levels.len() > 1 {
            let edge = self.levels[0].token_edge();
            if self.levels.iter().any(|l| l.token_edge() != edge) {
                return err("cross-level attention needs equal token-grid edges on every level".into());
            }
        }
        if self.features.use_cyclic_shift {
            if self.window % 2 != 0 {
                return err(format!("cyclic shift needs an even window size, got M={}", self.window));
            }
            if self.features.use_cat && self.cat_size % 2 != 0 {
                return err(format!("cyclic shift needs an even CAT size, got c={}", self.cat_size));
            }
        }
        if self.features.use_cat {
            if self.cat_size == 0 || self.window / self.cat_size < 1 {
                return err(format!("floor(M/c) must be >= 1 (M={}, c={})", self.window, self.cat_size));
            }
            if self.window % self.cat_size != 0 {
                return err(format!(
                    "window size {} must be a multiple of the CAT size {} so CAT blocks align with windows",
                    self.window, self.cat_size
                ));
            }
            let per_level = self.token_counts();
            if let Some(tc) = per_level.iter().find(|tc| tc.n_cats > self.max_cats) {
                return err(format!(
                    "{} carrier tokens exceed max_cats = {}",
                    tc.n_cats, self.max_cats
                ));
            }
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(format!(
                "embedding dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim % 2 != 0 {
            return err("embedding dim must be even (channels are halved before upsampling)".into());
        }
        if self.skip_dim == 0 || self.in_channels == 0 {
            return err("skip_dim and in_channels must be positive".into());
        }
        if self.scale == 0 || self.scale > 4 {
            return err(format!("scale must be 1..=4, got {}", self.scale));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return err("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Levels that actually run; only the prediction level without
    /// multi-context input.
    pub fn active_levels(&self) -> &[LevelSpec] {
        if self.features.use_multicontext {
            &self.levels
        } else {
            &self.levels[self.levels.len() - 1..]
        }
    }

    pub fn finest(&self) -> &LevelSpec {
        self.levels.last().expect("validated config has levels")
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Kernel and stride of the carrier-token initialization, `floor(M/c)`.
    pub fn cat_stride(&self) -> usize {
        self.window / self.cat_size
    }

    /// Edge of the SR output patch.
    pub fn output_edge(&self) -> usize {
        self.scale * self.finest().context
    }

    /// Upsampling stages of the pixel-shuffle head (x4 runs as two x2).
    pub fn shuffle_factors(&self) -> Vec<usize> {
        match self.scale {
            1 => Vec::new(),
            4 => vec![2, 2],
            s => vec![s],
        }
    }

    /// Per-level token counts, coarsest first, for all configured levels.
    pub fn token_counts(&self) -> Vec<TokenCounts> {
        self.levels
            .iter()
            .map(|l| derive_token_counts(l, self.window, self.cat_size))
            .collect()
    }
}

/// `n_ites = (ctx/p)^3`, `n_windows = (ctx/(p M))^3`, `n_cats = n_windows c^3`.
pub fn derive_token_counts(level: &LevelSpec, window: usize, cat_size: usize) -> TokenCounts {
    let edge = level.token_edge();
    let wpe = edge / window;
    let n_windows = wpe.pow(3);
    TokenCounts {
        token_edge: edge,
        n_ites: edge.pow(3),
        n_windows,
        n_cats: n_windows * cat_size.pow(3),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return err("batch size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return err("learning rate must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return err("ADAM betas must lie in [0, 1)".into());
        }
        if self.total_iters == 0 {
            return err("total_iters must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return err("milestones must be strictly increasing".into());
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_iters) {
            return err("milestones must be smaller than total_iters".into());
        }
        if self.checkpoint_every == 0 {
            return err("checkpoint_every must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return err("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Same schedule shape over a different run length.
    pub fn with_total_iters(mut self, total: usize) -> Self {
        self.milestones = scaled_milestones(total);
        self.total_iters = total;
        self
    }

    /// Learning rate after `iteration` completed steps.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.lr * 0.5f64.powi(passed as i32)
    }
}

/// Milestones at 50/70/85/95 % of `total` (dropping duplicates for tiny runs).
pub fn scaled_milestones(total: usize) -> Vec<usize> {
    let mut ms: Vec<usize> = MILESTONE_FRACTIONS
        .iter()
        .map(|f| ((total as f64) * f).round() as usize)
        .filter(|&m| m > 0 && m < total)
        .collect();
    ms.dedup();
    ms
}

type Entry = (usize, String, String);

fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected 'key = value', got '{content}'"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty key".into(),
            });
        }
        if let Some((first, _, _)) = out.iter().find(|(_, key, _)| key == k) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key '{k}' (first on line {first})"),
            });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn bad(line: usize, key: &str, v: &str) -> Error {
    Error::Parse {
        line,
        msg: format!("invalid value '{v}' for {key}"),
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, key, v))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(line, key, v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_two_level_preset_is_valid() {
        let cfg = ExperimentConfig::preset(Preset::L2);
        cfg.validate().unwrap();
        let m = &cfg.model;
        assert_eq!(m.levels[0], level(4, 64, 2, 6));
        assert_eq!(m.levels[1], level(2, 32, 3, 6));
        assert_eq!((m.window, m.cat_size, m.embed_dim, m.skip_dim), (8, 4, 128, 64));
    }

    #[test]
    fn odd_cat_size_is_rejected_under_cyclic_shift() {
        let mut m = ExperimentConfig::preset(Preset::L2).model;
        m.cat_size = 3;
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("even CAT size"), "{e}");

        let mut m = ModelConfig {
            window: 6,
            cat_size: 3,
            levels: vec![level(2, 24, 1, 1)],
            ..ModelConfig::default()
        };
        m.features.use_cyclic_shift = false;
        m.validate().unwrap();
        m.features.use_cyclic_shift = true;
        assert!(m.validate().is_err());
    }

    #[test]
    fn desk_preset_is_valid() {
        let cfg = ExperimentConfig::preset(Preset::Desk);
        cfg.validate().unwrap();
        let l = cfg.model.finest();
        assert_eq!(l.token_edge(), 8);
        assert_eq!(l.token_edge() % cfg.model.window, 0);
    }

    #[test]
    fn token_counts_for_presets() {
        let l3 = ExperimentConfig::preset(Preset::L3).model;
        let tc = l3.token_counts();
        assert_eq!(
            tc[0],
            TokenCounts {
                token_edge: 16,
                n_ites: 4096,
                n_windows: 8,
                n_cats: 512
            }
        );
        assert!(tc.iter().all(|t| t.n_ites == 4096));
        let desk = derive_token_counts(&level(2, 16, 1, 1), 4, 2);
        assert_eq!((desk.n_ites, desk.n_windows, desk.n_cats), (512, 8, 64));
    }

    #[test]
    fn parse_rejects_unknown_keys_and_duplicates() {
        assert!(matches!(
            ExperimentConfig::parse("model.bogus = 1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("model.window = 8\nmodel.window = 4"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(ExperimentConfig::parse("model.window = eight").is_err());
    }

    #[test]
    fn defaults_fill_unspecified_keys() {
        let cfg = ExperimentConfig::parse("# only the seed\ntrain.seed = 42\n").unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.model, ExperimentConfig::preset(Preset::L1).model);
    }

    #[test]
    fn overrides_take_precedence() {
        let text = ExperimentConfig::preset(Preset::Desk).to_text();
        let cfg =
            ExperimentConfig::parse_with_overrides(&text, &["train.seed=9".into(), "model.use_cat = false".into()])
                .unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert!(!cfg.model.features.use_cat);
    }

    #[test]
    fn invalid_geometry_names_the_constraint() {
        let mut m = ExperimentConfig::preset(Preset::Desk).model;
        m.levels[0].context = 18;
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("not divisible by window size"), "{e}");
        m.levels[0].context = 15;
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("not divisible by patch size"), "{e}");
    }

    #[test]
    fn milestones_must_increase_and_precede_the_end() {
        let mut t = TrainConfig::default();
        t.milestones = vec![10, 10];
        assert!(t.validate().is_err());
        t.milestones = vec![10, 100_000];
        assert!(t.validate().is_err());
    }

    #[test]
    fn paper_schedule_halves_at_fifty_thousand() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(49_999), 2e-4);
        assert_eq!(t.lr_at(50_001), 1e-4);
        assert_eq!(t.lr_at(99_999), 2e-4 / 16.0);
    }

    #[test]
    fn scaled_schedule_keeps_fractions() {
        assert_eq!(scaled_milestones(100_000), vec![50_000, 70_000, 85_000, 95_000]);
        assert_eq!(scaled_milestones(2000), vec![1000, 1400, 1700, 1900]);
        for total in [200usize, 1000, 2000, 20_000] {
            let ms = scaled_milestones(total);
            for (m, f) in ms.iter().zip(MILESTONE_FRACTIONS) {
                assert!(((*m as f64) / total as f64 - f).abs() <= 0.5 / total as f64);
            }
        }
    }
}
