//! Model setups shared by the gradient suite and the acceptance run.

use super::*;
use mtv_autograd::gradcheck::GradCheck;
use mtvnet::config::{ExperimentConfig, LevelSpec, ModelConfig, Preset};
use mtvnet::dchat::{dchat_block, init_dchat_block};
use mtvnet::model::{forward, init_params};
use mtvnet::svhat::{joint_window_attention, svhat_forward, SvhatState};
use mtvnet::tokenizer::LevelPlan;

pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Gradients below this are structurally zero (an attention key bias shifts
/// every logit of a query equally); such groups are judged on absolute error.
pub const ZERO_SCALE: f64 = 1e-6;

pub fn grad_group_ok(r: &GradCheck) -> bool {
    r.checked > 0
        && if r.scale < ZERO_SCALE {
            r.max_abs_err < GRAD_TOLERANCE * ZERO_SCALE
        } else {
            r.rel_err < GRAD_TOLERANCE
        }
}

/// Max abs difference between joint window attention and the gathered-
/// neighbourhood oracle on random inputs.
pub fn check_window_geometry(window: usize, cat: Option<usize>, token_edge: usize, shifted: bool) -> f64 {
    let d = dims(8, 2, window, cat);
    let store = random_svhat("l", &d, false, 11);
    let plan = LevelPlan::new(1, token_edge, window, cat, d.heads).unwrap();
    let ites = random_tokens(1, token_edge.pow(3), 8, 5);
    let cats = cat.map(|_| random_tokens(1, plan.n_cats(), 8, 6));

    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let iv = g.constant(ites.clone());
    let cv = cats.clone().map(|t| g.constant(t));
    let (oi, oc) = joint_window_attention(&mut g, &p, "l.win", &d, &plan, iv, cv, shifted).unwrap();

    let (ei, ec) = window_attention_oracle(
        &store,
        "l.win",
        d.heads,
        window,
        token_edge,
        &ites,
        cats.as_ref().zip(cat),
        shifted,
    );
    let mut diff = g.value(oi).max_abs_diff(&ei);
    if let (Some(oc), Some(ec)) = (oc, ec) {
        diff = diff.max(g.value(oc).max_abs_diff(&ec));
    }
    diff
}

fn level_inputs() -> [(&'static str, Tensor); 4] {
    [
        ("ites", random_tokens(1, 64, 8, 1)),
        ("cats", random_tokens(1, 8, 8, 2)),
        ("prev_ites", random_tokens(1, 64, 8, 3)),
        ("prev_cats", random_tokens(1, 8, 8, 4)),
    ]
}

/// One SVHAT layer with carriers, a cross-level branch and shifted windows.
pub fn svhat_gradcheck() -> Vec<GradCheck> {
    let d = dims(8, 2, 4, Some(2));
    let store = random_svhat("l", &d, true, 21);
    let plan = LevelPlan::new(1, 4, 4, Some(2), 2).unwrap();
    gradcheck_params(&store, &level_inputs(), 4, |g, p, x| {
        let state = SvhatState { ites: x[0], cats: Some(x[1]) };
        let prev = SvhatState { ites: x[2], cats: Some(x[3]) };
        let out = svhat_forward(g, p, "l", &d, &plan, state, Some(&prev), true).unwrap();
        let a = weighted_sum(g, out.ites, 7);
        let b = weighted_sum(g, out.cats.unwrap(), 8);
        g.add(a, b)
    })
}

/// A two-layer dense block (second layer shifted) with a cross-level branch.
pub fn dchat_gradcheck() -> Vec<GradCheck> {
    let d = dims(8, 2, 4, Some(2));
    let mut store = ParamStore::new();
    init_dchat_block(&mut Init::new(&mut store, &mut rng(5)), "b", &d, 2, true);
    randomize(&mut store, 6);
    let plan = LevelPlan::new(1, 4, 4, Some(2), 2).unwrap();
    gradcheck_params(&store, &level_inputs(), 3, |g, p, x| {
        let state = SvhatState { ites: x[0], cats: Some(x[1]) };
        let prev = SvhatState { ites: x[2], cats: Some(x[3]) };
        let out = dchat_block(g, p, "b", &d, &plan, state, Some(&prev), 2, true).unwrap();
        let a = weighted_sum(g, out.ites, 7);
        let b = weighted_sum(g, out.cats.unwrap(), 8);
        g.add(a, b)
    })
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        levels: vec![
            LevelSpec { patch_size: 2, context: 8, blocks: 1, layers: 2 },
            LevelSpec { patch_size: 1, context: 4, blocks: 1, layers: 2 },
        ],
        window: 4,
        cat_size: 2,
        embed_dim: 8,
        skip_dim: 4,
        heads: 2,
        scale: 2,
        ..ExperimentConfig::preset(Preset::Desk).model
    }
}

/// The full two-level network, input contexts to SR output.
pub fn micro_network_gradcheck() -> Vec<GradCheck> {
    let cfg = micro_config();
    cfg.validate().unwrap();
    let mut store = init_params(&cfg, &mut rng(9)).unwrap();
    // move zero-initialized biases off zero so their paths are exercised
    let mut r = rng(10);
    for (_, t) in store.iter_mut() {
        let n = normal_tensor(t.shape(), 0.05, &mut r);
        *t = t.zip_map(&n, |a, b| a + b);
    }
    let extra = [
        ("context0", normal_tensor(&[1, 1, 8, 8, 8], 0.5, &mut r)),
        ("context1", normal_tensor(&[1, 1, 4, 4, 4], 0.5, &mut r)),
    ];
    gradcheck_params(&store, &extra, 2, |g, p, x| {
        let y = forward(g, p, &cfg, x).unwrap();
        weighted_sum(g, y, 3)
    })
}
