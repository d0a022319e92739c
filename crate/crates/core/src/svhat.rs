//! The SVHAT layer: cross-level fusion, full carrier-token attention and
//! joint shifted-window attention over image and carrier tokens.

use mtv_autograd::{AttentionSpec, Graph, Var};
use rand::Rng;

use crate::config::{AttentionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{linear_count, mlp_count, Bound, Init};
use crate::tokenizer::LevelPlan;

/// Initial value of the channel-wise residual scales of CAT attention.
pub const GAMMA_INIT: f64 = 1e-2;
/// Initial logit multiplier for cosine attention.
const COSINE_SCALE_INIT: f64 = 10.0;
const COSINE_EPS: f64 = 1e-6;

/// Layer hyperparameters shared by every SVHAT layer of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDims {
    pub embed: usize,
    pub hidden: usize,
    pub heads: usize,
    pub window: usize,
    /// CAT edge per window; `None` disables carrier tokens.
    pub cat: Option<usize>,
    pub skip: usize,
    pub attention: AttentionKind,
}

impl LayerDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            embed: cfg.embed_dim,
            hidden: cfg.hidden_dim(),
            heads: cfg.heads,
            window: cfg.window,
            cat: cfg.features.use_cat.then_some(cfg.cat_size),
            skip: cfg.skip_dim,
            attention: cfg.attention,
        }
    }

    fn rel_table(&self) -> usize {
        (2 * self.window - 1).pow(3)
    }
}

/// Token streams of one level: ITEs `[B, N, C]` and optional CATs `[B, N_cat, C]`.
#[derive(Clone, Copy, Debug)]
pub struct SvhatState {
    pub ites: Var,
    pub cats: Option<Var>,
}

/// Multi-head attention block with its own q/k/v/output projections.
fn init_mha<R: Rng>(init: &mut Init<R>, name: &str, d: &LayerDims) {
    for proj in ["q", "k", "v", "proj"] {
        init.linear(&format!("{name}.{proj}"), d.embed, d.embed);
    }
    if d.attention == AttentionKind::Cosine {
        init.constant(&format!("{name}.logit_scale"), &[d.heads], COSINE_SCALE_INIT);
    }
}

fn mha_count(d: &LayerDims) -> usize {
    4 * linear_count(d.embed, d.embed) + if d.attention == AttentionKind::Cosine { d.heads } else { 0 }
}

/// `proj(attention(q(x_q), k(x_kv), v(x_kv)))` over groups of tokens.
#[allow(clippy::too_many_arguments)]
fn mha(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    d: &LayerDims,
    xq: Var,
    xkv: Var,
    bias: Option<Var>,
    spec: AttentionSpec,
) -> Var {
    let mut q = p.linear(g, &format!("{name}.q"), xq);
    let mut k = p.linear(g, &format!("{name}.k"), xkv);
    let v = p.linear(g, &format!("{name}.v"), xkv);
    let mut spec = spec;
    let head_scale = match d.attention {
        AttentionKind::Dot => {
            spec.scale = 1.0 / ((d.embed / d.heads) as f64).sqrt();
            None
        }
        AttentionKind::Cosine => {
            q = g.head_l2_normalize(q, d.heads, COSINE_EPS);
            k = g.head_l2_normalize(k, d.heads, COSINE_EPS);
            spec.scale = 1.0;
            Some(p.var(&format!("{name}.logit_scale")))
        }
    };
    let o = g.attention(q, k, v, bias, head_scale, &spec);
    p.linear(g, &format!("{name}.proj"), o)
}

pub fn init_svhat<R: Rng>(init: &mut Init<R>, prefix: &str, d: &LayerDims, cross: bool) {
    if cross {
        init.mlp(&format!("{prefix}.cross_ite.mlp"), d.embed, d.hidden, d.embed);
        init_mha(init, &format!("{prefix}.cross_ite.attn"), d);
        init.layer_norm(&format!("{prefix}.cross_ite.norm"), d.embed);
        if d.cat.is_some() {
            init.mlp(&format!("{prefix}.cross_cat.mlp"), d.embed, d.hidden, d.embed);
            init_mha(init, &format!("{prefix}.cross_cat.attn"), d);
            init.layer_norm(&format!("{prefix}.cross_cat.norm"), d.embed);
        }
    }
    if d.cat.is_some() {
        init.layer_norm(&format!("{prefix}.cat.norm1"), d.embed);
        init_mha(init, &format!("{prefix}.cat.attn"), d);
        init.constant(&format!("{prefix}.cat.gamma1"), &[d.embed], GAMMA_INIT);
        init.layer_norm(&format!("{prefix}.cat.norm2"), d.embed);
        init.mlp(&format!("{prefix}.cat.mlp"), d.embed, d.hidden, d.embed);
        init.constant(&format!("{prefix}.cat.gamma2"), &[d.embed], GAMMA_INIT);
    }
    init_mha(init, &format!("{prefix}.win.attn"), d);
    init.normal(&format!("{prefix}.win.rel_bias"), &[d.heads, d.rel_table()], 0.02);
    init.layer_norm(&format!("{prefix}.win.norm1"), d.embed);
    init.mlp(&format!("{prefix}.win.mlp"), d.embed, d.hidden, d.embed);
    init.layer_norm(&format!("{prefix}.win.norm2"), d.embed);
}

/// Scalar count of [`init_svhat`]'s parameters.
pub fn svhat_param_count(d: &LayerDims, cross: bool) -> usize {
    let ln = 2 * d.embed;
    let mlp = mlp_count(d.embed, d.hidden, d.embed);
    let mut n = 0;
    if cross {
        n += mlp + mha_count(d) + ln;
        if d.cat.is_some() {
            n += mlp + mha_count(d) + ln;
        }
    }
    if d.cat.is_some() {
        n += 2 * ln + mha_count(d) + mlp + 2 * d.embed;
    }
    n + mha_count(d) + d.heads * d.rel_table() + 2 * ln + mlp
}

/// Full attention among the carrier tokens with pre-normalized, channel-wise
/// scaled residuals: `x^ = x + g1 MSA(LN(x))`, `x' = x^ + g2 MLP(LN(x^))`.
pub fn cat_attention(g: &mut Graph, p: &Bound, prefix: &str, d: &LayerDims, cats: Var) -> Var {
    let h = p.layer_norm(g, &format!("{prefix}.norm1"), cats);
    let a = mha(g, p, &format!("{prefix}.attn"), d, h, h, None, AttentionSpec::new(d.heads, 1.0));
    let a = g.mul_channel(a, p.var(&format!("{prefix}.gamma1")));
    let x = g.add(cats, a);
    let h = p.layer_norm(g, &format!("{prefix}.norm2"), x);
    let m = p.mlp(g, &format!("{prefix}.mlp"), h);
    let m = g.mul_channel(m, p.var(&format!("{prefix}.gamma2")));
    g.add(x, m)
}

/// Joint windowed attention over `[ITEs, CATs]` per window with post-norm
/// residuals `x^ = x + LN(SW-MSA(x))`, `x' = x^ + LN(MLP(x^))`. When
/// `shifted`, both grids are co-rolled before partitioning (and back after)
/// and wrapped pairs are masked.
pub fn joint_window_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    d: &LayerDims,
    plan: &LevelPlan,
    ites: Var,
    cats: Option<Var>,
    shifted: bool,
) -> Result<(Var, Option<Var>)> {
    if cats.is_some() != plan.cat.is_some() {
        return Err(Error::Shape("carrier tokens do not match the level plan".into()));
    }
    let n_ite = plan.window.pow(3);
    let xi = plan.partition_ites(g, ites, shifted);
    let x = match cats {
        Some(c) => {
            let xc = plan.partition_cats(g, c, shifted);
            g.concat(&[xi, xc], 1)
        }
        None => xi,
    };
    let table = p.var(&format!("{prefix}.rel_bias"));
    let l = plan.seq_len();
    let bias = g.gather(table, plan.bias_index.clone(), 1, &[d.heads, l, l]);
    let mut spec = AttentionSpec::new(d.heads, 1.0);
    if shifted {
        spec = spec.with_masks(plan.shift_masks.clone());
    }
    let a = mha(g, p, &format!("{prefix}.attn"), d, x, x, Some(bias), spec);
    let a = p.layer_norm(g, &format!("{prefix}.norm1"), a);
    let x = g.add(x, a);
    let m = p.mlp(g, &format!("{prefix}.mlp"), x);
    let m = p.layer_norm(g, &format!("{prefix}.norm2"), m);
    let x = g.add(x, m);
    if cats.is_none() {
        return Ok((plan.reverse_ites(g, x, shifted), None));
    }
    let xi = g.narrow(x, 1, 0, n_ite);
    let xc = g.narrow(x, 1, n_ite, l - n_ite);
    Ok((plan.reverse_ites(g, xi, shifted), Some(plan.reverse_cats(g, xc, shifted))))
}

/// `LN(MCA(cur, MLP(prev)))` over all carrier tokens of each sample.
pub fn cross_attend_cats(g: &mut Graph, p: &Bound, prefix: &str, d: &LayerDims, cur: Var, prev: Var) -> Result<Var> {
    let (cs, ps) = (g.shape(cur).to_vec(), g.shape(prev).to_vec());
    if cs[0] != ps[0] || cs[2] != ps[2] {
        return Err(Error::Shape(format!("CAT cross-attention between {cs:?} and {ps:?}")));
    }
    let kv = p.mlp(g, &format!("{prefix}.mlp"), prev);
    let a = mha(g, p, &format!("{prefix}.attn"), d, cur, kv, None, AttentionSpec::new(d.heads, 1.0));
    Ok(p.layer_norm(g, &format!("{prefix}.norm"), a))
}

/// `LN(W-MCA(cur, MLP(prev)))`: window `w` of the current level attends to
/// window `w` of the previous level (both grids have the same edge).
pub fn cross_attend_ites(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    d: &LayerDims,
    plan: &LevelPlan,
    cur: Var,
    prev: Var,
) -> Result<Var> {
    if g.shape(cur) != g.shape(prev) {
        return Err(Error::Geometry(format!(
            "no window correspondence between token grids {:?} and {:?}",
            g.shape(cur),
            g.shape(prev)
        )));
    }
    let kv = p.mlp(g, &format!("{prefix}.mlp"), prev);
    let q = plan.partition_ites(g, cur, false);
    let kv = plan.partition_ites(g, kv, false);
    let a = mha(g, p, &format!("{prefix}.attn"), d, q, kv, None, AttentionSpec::new(d.heads, 1.0));
    let a = plan.reverse_ites(g, a, false);
    Ok(p.layer_norm(g, &format!("{prefix}.norm"), a))
}

/// Residual fusion of cross terms into both streams.
pub fn fuse_cross(g: &mut Graph, bar: SvhatState, cross_ites: Var, cross_cats: Option<Var>) -> Result<SvhatState> {
    if g.shape(bar.ites) != g.shape(cross_ites) {
        return Err(Error::Shape("ITE cross term shape mismatch".into()));
    }
    let ites = g.add(bar.ites, cross_ites);
    let cats = match (bar.cats, cross_cats) {
        (Some(c), Some(x)) => {
            if g.shape(c) != g.shape(x) {
                return Err(Error::Shape("CAT cross term shape mismatch".into()));
            }
            Some(g.add(c, x))
        }
        (c, None) => c,
        (None, Some(_)) => return Err(Error::Shape("CAT cross term without CAT stream".into())),
    };
    Ok(SvhatState { ites, cats })
}

/// One SVHAT layer: optional cross-level fusion, CAT attention, then joint
/// window attention. `cross` carries the previous level's final tokens and
/// must be present exactly when the layer was built with cross parameters.
pub fn svhat_forward(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    d: &LayerDims,
    plan: &LevelPlan,
    state: SvhatState,
    cross: Option<&SvhatState>,
    shifted: bool,
) -> Result<SvhatState> {
    let has_cross = p.try_var(&format!("{prefix}.cross_ite.norm.weight")).is_some();
    let mut state = state;
    match (has_cross, cross) {
        (true, Some(prev)) => {
            let xi = cross_attend_ites(g, p, &format!("{prefix}.cross_ite"), d, plan, state.ites, prev.ites)?;
            let xc = match (state.cats, prev.cats) {
                (Some(c), Some(pc)) => Some(cross_attend_cats(g, p, &format!("{prefix}.cross_cat"), d, c, pc)?),
                _ => None,
            };
            state = fuse_cross(g, state, xi, xc)?;
        }
        (false, None) => {}
        (true, None) => return Err(Error::Shape(format!("{prefix}: cross-level inputs required"))),
        (false, Some(_)) => return Err(Error::Shape(format!("{prefix}: layer has no cross-level branch"))),
    }
    let cats = state
        .cats
        .map(|c| cat_attention(g, p, &format!("{prefix}.cat"), d, c));
    let (ites, cats) = joint_window_attention(g, p, &format!("{prefix}.win"), d, plan, state.ites, cats, shifted)?;
    Ok(SvhatState { ites, cats })
}
