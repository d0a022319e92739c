//! Attribution maps (integrated gradients from a blurred baseline), the
//! diffusion index, and the token / activation memory profiler.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use mtv_autograd::{Graph, GraphStats, Tensor, Var};

use crate::config::{derive_token_counts, FusionMode, ModelConfig, TokenCounts};
use crate::error::{Error, Result};
use crate::metrics::Slice;
use crate::model::{analytic_param_count, forward, Mtvnet};
use crate::svhat::LayerDims;
use crate::tokenizer::center_crop_tensor;
use crate::volume::{gaussian_blur, write_atomic, Volume};

pub const DEFAULT_LAM_SIGMA: f64 = 4.0;
pub const MIN_LAM_STEPS: usize = 8;

/// A model whose SR output can be differentiated with respect to its LR
/// input contexts.
pub trait Attributable {
    /// Context extents, coarsest first; all centred on the same voxel.
    fn context_extents(&self) -> Vec<usize>;
    fn scale(&self) -> usize;
    /// Records the forward pass on `g`; returns `[1, C, E, E, E]`.
    fn build(&self, g: &mut Graph, contexts: &[Var]) -> Result<Var>;
}

impl Attributable for Mtvnet {
    fn context_extents(&self) -> Vec<usize> {
        Mtvnet::context_extents(self)
    }

    fn scale(&self) -> usize {
        self.cfg.scale
    }

    fn build(&self, g: &mut Graph, contexts: &[Var]) -> Result<Var> {
        let p = self.params.bind(g, false);
        forward(g, &p, &self.cfg, contexts)
    }
}

/// Cuboid of SR output voxels whose summed intensity is attributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionBox {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl PredictionBox {
    pub fn centered(output_edge: usize, size: usize) -> Self {
        let o = output_edge.saturating_sub(size) / 2;
        Self {
            origin: [o; 3],
            size: [size.min(output_edge); 3],
        }
    }

    fn mask(&self, channels: usize, edge: usize) -> Result<Tensor> {
        for a in 0..3 {
            if self.size[a] == 0 || self.origin[a] + self.size[a] > edge {
                return Err(Error::Geometry(format!(
                    "prediction box {:?}+{:?} outside output extent {edge}",
                    self.origin, self.size
                )));
            }
        }
        let inside = |v: usize, a: usize| v >= self.origin[a] && v < self.origin[a] + self.size[a];
        Ok(Tensor::from_fn(&[1, channels, edge, edge, edge], |i| {
            let z = i % edge;
            let y = (i / edge) % edge;
            let x = (i / (edge * edge)) % edge;
            if inside(x, 0) && inside(y, 1) && inside(z, 2) {
                1.0
            } else {
                0.0
            }
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LamOptions {
    pub steps: usize,
    pub baseline_sigma: f64,
}

impl Default for LamOptions {
    fn default() -> Self {
        Self {
            steps: 64,
            baseline_sigma: DEFAULT_LAM_SIGMA,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LamMap {
    /// `|(I - baseline) * mean gradient|`, summed over channels.
    pub attribution: Volume,
    /// The same product before taking magnitudes.
    pub signed: Volume,
    pub prediction_box: PredictionBox,
    /// Box footprint in LR region coordinates: origin and size.
    pub lr_box: ([usize; 3], [usize; 3]),
    pub di: f64,
    /// Mean of `attribution` over the box's slice range along the last axis.
    pub slice_average: Slice,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl LamMap {
    pub fn signed_total(&self) -> f64 {
        self.signed.data().iter().sum()
    }

    /// Relative gap between the signed attribution total and `F(I) - F(b)`.
    pub fn completeness_error(&self) -> f64 {
        let delta = self.f_input - self.f_baseline;
        (self.signed_total() - delta).abs() / delta.abs().max(f64::MIN_POSITIVE)
    }
}

fn eval_box<M: Attributable + ?Sized>(
    model: &M,
    input: &Tensor,
    extents: &[usize],
    bx: &PredictionBox,
    with_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let e0 = extents[0];
    let mut g = Graph::new();
    let mut leaves = Vec::with_capacity(extents.len());
    for &e in extents {
        let t = if e == e0 {
            input.clone()
        } else {
            center_crop_tensor(input, e)?
        };
        leaves.push(if with_grad { g.leaf(t) } else { g.constant(t) });
    }
    let out = model.build(&mut g, &leaves)?;
    let shape = g.shape(out).to_vec();
    if shape.len() != 5 || shape[0] != 1 || shape[2] != shape[3] || shape[3] != shape[4] {
        return Err(Error::Shape(format!("attribution needs a [1, C, E, E, E] output, got {shape:?}")));
    }
    let mask = bx.mask(shape[1], shape[2])?;
    let f = g.dot_const(out, mask);
    let value = g.value(f).item();
    if !with_grad {
        return Ok((value, None));
    }
    let grads = g.backward(f);
    let mut total = Tensor::zeros(input.shape());
    let c = input.dim(1);
    for (&e, &leaf) in extents.iter().zip(&leaves) {
        let Some(gr) = grads.get(leaf) else { continue };
        let off = (e0 - e) / 2;
        for ch in 0..c {
            for x in 0..e {
                for y in 0..e {
                    let src = ((ch * e + x) * e + y) * e;
                    let dst = ((ch * e0 + x + off) * e0 + y + off) * e0 + off;
                    for z in 0..e {
                        total.data_mut()[dst + z] += gr.data()[src + z];
                    }
                }
            }
        }
    }
    Ok((value, Some(total)))
}

/// Integrated-gradient attribution of `F = sum of SR output over box` with
/// respect to the LR `region` (the outermost context), along the straight
/// path from a Gaussian-blurred baseline, using the right Riemann sum over
/// `alpha = k / K`.
pub fn lam_3d<M: Attributable + ?Sized>(
    model: &M,
    region: &Volume,
    bx: PredictionBox,
    opts: &LamOptions,
) -> Result<LamMap> {
    if opts.steps < MIN_LAM_STEPS {
        return Err(Error::InvalidConfig(format!(
            "LAM needs at least {MIN_LAM_STEPS} path steps, got {}",
            opts.steps
        )));
    }
    let extents = model.context_extents();
    let e0 = extents[0];
    if region.dims() != [e0; 3] {
        return Err(Error::Shape(format!(
            "LAM region {:?} does not match the outermost context {e0}",
            region.dims()
        )));
    }
    let baseline = gaussian_blur(region, opts.baseline_sigma);
    let input = region.to_tensor();
    let base = baseline.to_tensor();
    let diff = input.zip_map(&base, |a, b| a - b);
    let mut grad_sum = Tensor::zeros(input.shape());
    let mut f_input = 0.0;
    for k in 1..=opts.steps {
        let alpha = k as f64 / opts.steps as f64;
        let point = base.zip_map(&diff, |b, d| b + alpha * d);
        let (f, grad) = eval_box(model, &point, &extents, &bx, true)?;
        grad_sum.axpy(1.0, &grad.expect("gradient requested"));
        if k == opts.steps {
            f_input = f;
        }
    }
    let (f_baseline, _) = eval_box(model, &base, &extents, &bx, false)?;
    let inv_k = 1.0 / opts.steps as f64;
    let c = region.channels();
    let n = e0.pow(3);
    let mut signed = vec![0.0; n];
    let mut magnitude = vec![0.0; n];
    for ch in 0..c {
        for i in 0..n {
            let v = diff.data()[ch * n + i] * grad_sum.data()[ch * n + i] * inv_k;
            signed[i] += v;
            magnitude[i] += v.abs();
        }
    }
    if magnitude.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("LAM attribution".into()));
    }
    let attribution = Volume::new(1, [e0; 3], magnitude)?;
    let signed = Volume::new(1, [e0; 3], signed)?;
    let s = model.scale();
    let inner = *extents.last().expect("at least one level");
    let off = (e0 - inner) / 2;
    let lo = bx.origin.map(|o| off + o / s);
    let hi: Vec<usize> = (0..3).map(|a| off + (bx.origin[a] + bx.size[a]).div_ceil(s)).collect();
    let size = [0, 1, 2].map(|a| hi[a] - lo[a]);
    let di = diffusion_index(attribution.data())?;
    let mut avg = vec![0.0; e0 * e0];
    for x in 0..e0 {
        for y in 0..e0 {
            let sum: f64 = (lo[2]..hi[2]).map(|z| attribution.get(0, x, y, z)).sum();
            avg[x * e0 + y] = sum / size[2] as f64;
        }
    }
    Ok(LamMap {
        attribution,
        signed,
        prediction_box: bx,
        lr_box: (lo, size),
        di,
        slice_average: Slice::new(e0, e0, avg),
        f_input,
        f_baseline,
    })
}

/// `100 (1 - Gini)` of a nonnegative attribution. An all-zero map has no
/// involved voxels and scores 0.
pub fn diffusion_index(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Ok(0.0);
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Data(format!("diffusion index needs nonnegative finite values, got {v}")));
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // mean-absolute-difference Gini via ranks of the sorted sample
    let ranked: f64 = sorted.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    let gini = 2.0 * ranked / (n * total) - (n + 1.0) / n;
    Ok((100.0 * (1.0 - gini)).clamp(0.0, 100.0))
}

/// Activation and attention-probability element counts for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationCount {
    pub activations: usize,
    pub saved: usize,
}

impl ActivationCount {
    fn add(&mut self, other: ActivationCount) {
        self.activations += other.activations;
        self.saved += other.saved;
    }
}

struct Counter<'a> {
    d: &'a LayerDims,
    acc: ActivationCount,
}

impl Counter<'_> {
    fn act(&mut self, n: usize) {
        self.acc.activations += n;
    }

    /// Linear with bias: product plus bias add.
    fn linear(&mut self, rows: usize, out: usize) {
        self.act(2 * rows * out);
    }

    fn mlp(&mut self, rows: usize) {
        self.linear(rows, self.d.hidden);
        self.act(rows * self.d.hidden);
        self.linear(rows, self.d.embed);
    }

    /// q/k/v/proj projections and the fused attention over `groups`
    /// independent `nq x nk` problems.
    fn mha(&mut self, groups: usize, nq: usize, nk: usize) {
        let c = self.d.embed;
        let (rq, rk) = (groups * nq, groups * nk);
        self.linear(rq, c);
        self.linear(rk, c);
        self.linear(rk, c);
        if self.d.attention == crate::config::AttentionKind::Cosine {
            self.act(rq * c + rk * c);
        }
        self.act(rq * c);
        self.acc.saved += groups * self.d.heads * nq * nk;
        self.linear(rq, c);
    }
}

/// Per-level element counts of the forward pass, op by op.
fn level_activations(cfg: &ModelConfig, level: usize, batch: usize) -> ActivationCount {
    let d = LayerDims::from_config(cfg);
    let lvl = &cfg.active_levels()[level];
    let mut k = Counter { d: &d, acc: ActivationCount::default() };
    let c = cfg.embed_dim;
    let b = batch;
    let vol = b * c * lvl.context.pow(3);
    let tc = derive_token_counts(lvl, cfg.window, cfg.cat_size);
    let n = b * tc.n_ites;
    let nw = b * tc.n_windows;
    let t = cfg.window.pow(3);
    let cats = d.cat.map(|ce| ce.pow(3));
    let nc = cats.map_or(0, |c3| tc.n_windows * c3);
    let bnc = b * nc;
    let l = t + cats.unwrap_or(0);

    k.act(2 * vol); // SFE conv + bias
    if level > 0 {
        k.act(vol); // crop of the coarser features
        match cfg.fusion {
            FusionMode::Add => k.act(vol),
            FusionMode::Concat => k.act(2 * vol + 2 * vol),
        }
    }
    k.act(vol); // patch gather
    k.linear(n, c);
    if cats.is_some() {
        k.act(n * c); // token block gather
        k.linear(bnc, c);
        k.act(bnc * c + nc * c + bnc * c + bnc * c); // reshape, pos reshape, bias, reshape
    }
    let has_cross = level > 0;
    for _block in 0..lvl.blocks {
        for layer in 0..lvl.layers {
            if has_cross && layer == 0 {
                k.mlp(n);
                k.act(2 * n * c); // partition q and kv
                k.mha(nw, t, t);
                k.act(2 * n * c); // reverse and norm
                if cats.is_some() {
                    k.mlp(bnc);
                    k.mha(b, nc, nc);
                    k.act(bnc * c); // norm
                }
                k.act(n * c + bnc * c); // fuse adds
            }
            if cats.is_some() {
                k.act(bnc * c); // norm1
                k.mha(b, nc, nc);
                k.act(3 * bnc * c); // gamma1, add, norm2
                k.mlp(bnc);
                k.act(2 * bnc * c); // gamma2, add
            }
            let rows = nw * l;
            k.act(n * c); // partition ITEs
            if cats.is_some() {
                k.act(bnc * c + rows * c); // partition CATs, concat
            }
            k.act(d.heads * l * l); // bias gather
            k.mha(nw, l, l);
            k.act(2 * rows * c); // norm1, add
            k.mlp(rows);
            k.act(2 * rows * c); // norm2, add
            if cats.is_some() {
                k.act(n * c + bnc * c); // narrows
                k.act(n * c + bnc * c); // reverses
            } else {
                k.act(n * c);
            }
            k.linear(n, d.skip);
            k.act(n * d.skip);
            if cats.is_some() {
                k.linear(bnc, d.skip);
                k.act(bnc * d.skip);
            }
        }
        let dense = c + lvl.layers * d.skip;
        k.act(n * dense);
        k.linear(n, c);
        k.act(n * c);
        if cats.is_some() {
            k.act(bnc * dense);
            k.linear(bnc, c);
            k.act(bnc * c);
        }
    }
    k.acc
}

fn head_activations(cfg: &ModelConfig, batch: usize) -> usize {
    let c = cfg.embed_dim;
    let e = cfg.finest().context;
    let vol = batch * c * e.pow(3);
    // deconv linear + bias, gather, pre1 + bias, leaky, pre2 + bias, skip add
    let mut n = 2 * vol + vol + 2 * vol + vol + 2 * vol + vol;
    n += 2 * batch * (c / 2) * e.pow(3); // halve + bias
    let mut edge = e;
    for s in cfg.shuffle_factors() {
        let pre = batch * (c / 2) * s.pow(3) * edge.pow(3);
        n += 2 * pre + pre + pre; // conv + bias, shuffle, leaky
        edge *= s;
    }
    n + 2 * batch * cfg.in_channels * edge.pow(3)
}

/// Elements created by one forward pass, derived from the layer arithmetic.
pub fn analytic_activations(cfg: &ModelConfig, batch: usize) -> ActivationCount {
    let mut total = ActivationCount::default();
    for level in 0..cfg.active_levels().len() {
        total.add(level_activations(cfg, level, batch));
    }
    total.activations += head_activations(cfg, batch);
    total
}

/// Parameter and input elements held as graph leaves.
pub fn analytic_leaf_elements(cfg: &ModelConfig, batch: usize) -> usize {
    let inputs: usize = cfg
        .active_levels()
        .iter()
        .map(|l| batch * cfg.in_channels * l.context.pow(3))
        .sum();
    analytic_param_count(cfg) + inputs
}

/// Runs one forward pass and reports what the graph allocated.
pub fn measure_forward(model: &Mtvnet, batch: usize) -> Result<(GraphStats, usize)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let ctx: Vec<Var> = model
        .context_extents()
        .iter()
        .map(|&e| g.constant(Tensor::full(&[batch, model.cfg.in_channels, e, e, e], 0.5)))
        .collect();
    forward(&mut g, &p, &model.cfg, &ctx)?;
    Ok((g.stats(), g.peak_bytes()))
}

/// Rescales level contexts so the outermost active context equals
/// `resolution`, keeping patch sizes, window and depths.
pub fn config_at_resolution(cfg: &ModelConfig, resolution: usize) -> Result<ModelConfig> {
    let outer = cfg.active_levels()[0].context;
    let mut out = cfg.clone();
    let first_active = cfg.levels.len() - cfg.active_levels().len();
    for lvl in out.levels.iter_mut().skip(first_active) {
        let scaled = lvl.context * resolution;
        if scaled % outer != 0 {
            return Err(Error::Geometry(format!(
                "context {} does not scale to resolution {resolution}",
                lvl.context
            )));
        }
        lvl.context = scaled / outer;
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub label: String,
    pub resolution: usize,
    pub extents: Vec<usize>,
    pub tokens: Vec<TokenCounts>,
    pub params: usize,
    pub analytic: ActivationCount,
    pub leaf_elements: usize,
    /// Peak bytes recorded by the graph, when measured.
    pub measured_peak: Option<usize>,
    pub measured: Option<GraphStats>,
    /// Why the geometry is invalid at this resolution.
    pub invalid: Option<String>,
}

impl ProfileRow {
    pub fn is_valid(&self) -> bool {
        self.invalid.is_none()
    }

    pub fn ites_per_level(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.n_ites).collect()
    }

    pub fn analytic_bytes(&self) -> usize {
        (self.analytic.activations + self.analytic.saved + self.leaf_elements) * std::mem::size_of::<f64>()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryProfile {
    pub rows: Vec<ProfileRow>,
}

/// Options for [`profile_memory`].
#[derive(Clone, Copy, Debug)]
pub struct ProfileOptions {
    pub batch: usize,
    /// Measure rows whose analytic footprint is at most this many bytes.
    pub measure_up_to: Option<usize>,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            batch: 1,
            measure_up_to: None,
            seed: 0,
        }
    }
}

pub fn profile_memory(configs: &[(String, ModelConfig)], resolutions: &[usize], opts: &ProfileOptions) -> MemoryProfile {
    let mut rows = Vec::new();
    for (label, base) in configs {
        for &r in resolutions {
            let mut row = ProfileRow {
                label: label.clone(),
                resolution: r,
                extents: Vec::new(),
                tokens: Vec::new(),
                params: 0,
                analytic: ActivationCount::default(),
                leaf_elements: 0,
                measured_peak: None,
                measured: None,
                invalid: None,
            };
            match config_at_resolution(base, r) {
                Err(e) => row.invalid = Some(e.to_string()),
                Ok(cfg) => {
                    row.extents = cfg.active_levels().iter().map(|l| l.context).collect();
                    row.tokens = cfg
                        .active_levels()
                        .iter()
                        .map(|l| derive_token_counts(l, cfg.window, cfg.cat_size))
                        .collect();
                    row.params = analytic_param_count(&cfg);
                    row.analytic = analytic_activations(&cfg, opts.batch);
                    row.leaf_elements = analytic_leaf_elements(&cfg, opts.batch);
                    if opts.measure_up_to.is_some_and(|cap| row.analytic_bytes() <= cap) {
                        match Mtvnet::new(cfg, opts.seed).and_then(|m| measure_forward(&m, opts.batch)) {
                            Ok((stats, peak)) => {
                                row.measured = Some(stats);
                                row.measured_peak = Some(peak);
                            }
                            Err(e) => row.invalid = Some(e.to_string()),
                        }
                    }
                }
            }
            rows.push(row);
        }
    }
    MemoryProfile { rows }
}

impl MemoryProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "config,resolution,valid,extents,ites_per_level,cats_per_level,windows_per_level,params,\
             activation_elements,saved_elements,analytic_bytes,measured_activation_elements,measured_peak_bytes,note\n",
        );
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        for r in &self.rows {
            let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
            let (act, saved, bytes) = if r.is_valid() {
                (
                    r.analytic.activations.to_string(),
                    r.analytic.saved.to_string(),
                    r.analytic_bytes().to_string(),
                )
            } else {
                Default::default()
            };
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.label,
                r.resolution,
                r.is_valid(),
                join(&r.extents),
                join(&r.ites_per_level()),
                join(&r.tokens.iter().map(|t| t.n_cats).collect::<Vec<_>>()),
                join(&r.tokens.iter().map(|t| t.n_windows).collect::<Vec<_>>()),
                if r.is_valid() { r.params.to_string() } else { String::new() },
                act,
                saved,
                bytes,
                opt(r.measured.map(|m| m.activation_elements)),
                opt(r.measured_peak),
                r.invalid.as_deref().unwrap_or("").replace(',', ";"),
            )
            .unwrap();
        }
        s
    }

    /// Log-scale line plot of analytic bytes against resolution, one colour
    /// per configuration. Invalid rows leave gaps.
    pub fn render_plot(&self) -> RgbImage {
        let (w, h, pad) = (640u32, 400u32, 40i64);
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let valid: Vec<&ProfileRow> = self.rows.iter().filter(|r| r.is_valid()).collect();
        let axis = Rgb([0, 0, 0]);
        draw_line(&mut img, (pad, h as i64 - pad), (w as i64 - pad, h as i64 - pad), axis);
        draw_line(&mut img, (pad, pad), (pad, h as i64 - pad), axis);
        if valid.is_empty() {
            return img;
        }
        let xs: Vec<f64> = valid.iter().map(|r| r.resolution as f64).collect();
        let ys: Vec<f64> = valid.iter().map(|r| (r.analytic_bytes() as f64).log2()).collect();
        let (x0, x1) = min_max(&xs);
        let (y0, y1) = min_max(&ys);
        let px = |x: f64| pad + ((x - x0) / (x1 - x0).max(1e-9) * (w as i64 - 2 * pad) as f64) as i64;
        let py = |y: f64| h as i64 - pad - ((y - y0) / (y1 - y0).max(1e-9) * (h as i64 - 2 * pad) as f64) as i64;
        let palette = [
            Rgb([31, 119, 180]),
            Rgb([255, 127, 14]),
            Rgb([44, 160, 44]),
            Rgb([214, 39, 40]),
            Rgb([148, 103, 189]),
        ];
        let mut labels: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
        for (li, label) in labels.iter().enumerate() {
            let color = palette[li % palette.len()];
            let mut prev: Option<(i64, i64)> = None;
            for r in self.rows.iter().filter(|r| r.label == *label) {
                if !r.is_valid() {
                    prev = None;
                    continue;
                }
                let pt = (px(r.resolution as f64), py((r.analytic_bytes() as f64).log2()));
                draw_marker(&mut img, pt, color);
                if let Some(q) = prev {
                    draw_line(&mut img, q, pt, color);
                }
                prev = Some(pt);
            }
        }
        img
    }

    pub fn save_plot(&self, path: &Path) -> Result<()> {
        save_png(&self.render_plot(), path)
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

fn put(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, (x, y), c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_marker(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    for dx in -2..=2 {
        for dy in -2..=2 {
            put(img, (x + dx, y + dy), c);
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Heat map of the slice-averaged attribution, upscaled by `zoom`, with the
/// prediction box footprint outlined in red.
pub fn render_lam_heatmap(map: &LamMap, zoom: u32) -> RgbImage {
    let s = &map.slice_average;
    let zoom = zoom.max(1);
    let max = s.data.iter().cloned().fold(0.0, f64::max);
    let mut img = RgbImage::new(s.cols as u32 * zoom, s.rows as u32 * zoom);
    for (px, py, pixel) in img.enumerate_pixels_mut() {
        let (r, c) = ((py / zoom) as usize, (px / zoom) as usize);
        let v = if max > 0.0 { s.data[r * s.cols + c] / max } else { 0.0 };
        *pixel = heat(v);
    }
    let (o, sz) = map.lr_box;
    let red = Rgb([255, 0, 0]);
    let (r0, c0) = (o[0] as i64 * zoom as i64, o[1] as i64 * zoom as i64);
    let (r1, c1) = (
        (o[0] + sz[0]) as i64 * zoom as i64 - 1,
        (o[1] + sz[1]) as i64 * zoom as i64 - 1,
    );
    draw_line(&mut img, (c0, r0), (c1, r0), red);
    draw_line(&mut img, (c0, r1), (c1, r1), red);
    draw_line(&mut img, (c0, r0), (c0, r1), red);
    draw_line(&mut img, (c1, r0), (c1, r1), red);
    img
}

pub fn save_lam_heatmap(map: &LamMap, zoom: u32, path: &Path) -> Result<()> {
    save_png(&render_lam_heatmap(map, zoom), path)
}

/// Black to white through blue, in the style of a "hot" colormap's inverse
/// so the red box stays visible.
fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (2.0 * v - 1.0).clamp(0.0, 1.0)) as u8;
    let g = (255.0 * v) as u8;
    let b = (255.0 * (2.0 * v).min(1.0)) as u8;
    Rgb([r, g, b])
}

/// Slice-averaged attribution as CSV rows `x,y,value`.
pub fn lam_csv(map: &LamMap) -> String {
    let s = &map.slice_average;
    let mut out = String::from("x,y,attribution\n");
    for r in 0..s.rows {
        for c in 0..s.cols {
            writeln!(out, "{r},{c},{:e}", s.data[r * s.cols + c]).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Preset};

    #[test]
    fn di_hand_cases() {
        assert_eq!(diffusion_index(&[0.0; 10]).unwrap(), 0.0);
        assert!((diffusion_index(&[2.0; 10]).unwrap() - 100.0).abs() < 1e-12);
        assert!(diffusion_index(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn analytic_activations_match_graph_on_desk() {
        let cfg = ExperimentConfig::preset(Preset::Desk).model;
        let m = Mtvnet::new(cfg.clone(), 0).unwrap();
        let (stats, _) = measure_forward(&m, 1).unwrap();
        let a = analytic_activations(&cfg, 1);
        assert_eq!(a.activations, stats.activation_elements);
        assert_eq!(a.saved, stats.saved_elements);
        assert_eq!(analytic_leaf_elements(&cfg, 1), stats.leaf_elements);
    }

    #[test]
    fn analytic_activations_match_graph_on_variants() {
        use crate::config::{AttentionKind, LevelSpec};
        let base = ExperimentConfig::preset(Preset::Desk).model;
        let two = ModelConfig {
            levels: vec![
                LevelSpec { patch_size: 4, context: 32, blocks: 1, layers: 2 },
                LevelSpec { patch_size: 2, context: 16, blocks: 2, layers: 1 },
            ],
            ..base.clone()
        };
        let mut variants = vec![base.clone(), two.clone()];
        let mut v = two.clone();
        v.fusion = FusionMode::Concat;
        v.attention = AttentionKind::Cosine;
        variants.push(v);
        let mut v = two.clone();
        v.features.use_cat = false;
        v.scale = 4;
        variants.push(v);
        let mut v = two;
        v.features.use_multicontext = false;
        v.features.use_cyclic_shift = false;
        variants.push(v);
        for cfg in variants {
            let m = Mtvnet::new(cfg.clone(), 0).unwrap();
            let (stats, _) = measure_forward(&m, 2).unwrap();
            let a = analytic_activations(&cfg, 2);
            assert_eq!((a.activations, a.saved), (stats.activation_elements, stats.saved_elements), "{cfg:?}");
            assert_eq!(analytic_leaf_elements(&cfg, 2), stats.leaf_elements);
        }
    }
}
