//! Independent reference implementations shared by the integration tests.
//! Everything here works from original token coordinates and plain loops,
//! without the library's index maps.

#![allow(dead_code)]

pub mod scenarios;
pub mod surrogates;

use mtv_autograd::{Graph, Tensor, Var};
use mtvnet::config::AttentionKind;
use mtvnet::nn::{normal_tensor, Init, ParamStore};
use mtvnet::svhat::{init_svhat, LayerDims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dims(embed: usize, heads: usize, window: usize, cat: Option<usize>) -> LayerDims {
    LayerDims {
        embed,
        hidden: 2 * embed,
        heads,
        window,
        cat,
        skip: embed / 2,
        attention: AttentionKind::Dot,
    }
}

/// SVHAT parameters with every tensor randomized, so the oracle comparison
/// exercises biases, norms and gates rather than their neutral init values.
pub fn random_svhat(prefix: &str, d: &LayerDims, cross: bool, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    init_svhat(&mut Init::new(&mut store, &mut r), prefix, d, cross);
    randomize(&mut store, seed + 1);
    store
}

pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in store.iter_mut() {
        let std = if name.ends_with("rel_bias") { 0.5 } else { 0.3 };
        let noise = normal_tensor(t.shape(), std, &mut r);
        let base = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name.ends_with("norm.weight") {
            1.0
        } else {
            0.0
        };
        *t = noise.map(|v| v + base);
    }
}

fn lin3(c: [usize; 3], e: usize) -> usize {
    (c[0] * e + c[1]) * e + c[2]
}

fn coords(i: usize, e: usize) -> [usize; 3] {
    [i / (e * e), (i / e) % e, i % e]
}

/// Segment of original coordinate `u` along one axis: windows of edge `win`
/// after a roll by `shift`, with the window that wraps split at the border.
fn segment(u: usize, win: usize, shift: usize) -> usize {
    if u < shift {
        0
    } else {
        1 + (u - shift) / win
    }
}

fn row(t: &Tensor, b: usize, i: usize) -> &[f64] {
    let (n, c) = (t.dim(1), t.dim(2));
    &t.data()[(b * n + i) * c..(b * n + i + 1) * c]
}

fn linear(x: &[f64], store: &ParamStore, name: &str) -> Vec<f64> {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    let (fin, fout) = (w.dim(0), w.dim(1));
    (0..fout)
        .map(|o| b.data()[o] + (0..fin).map(|i| x[i] * w.data()[i * fout + o]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], store: &ParamStore, name: &str) -> Vec<f64> {
    let g = store.get(&format!("{name}.weight")).unwrap().data();
    let b = store.get(&format!("{name}.bias")).unwrap().data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

fn mlp(x: &[f64], store: &ParamStore, name: &str) -> Vec<f64> {
    let h: Vec<f64> = linear(x, store, &format!("{name}.fc1")).into_iter().map(gelu).collect();
    linear(&h, store, &format!("{name}.fc2"))
}

struct Token {
    value: Vec<f64>,
    /// ITE grid coordinates, or `None` for a carrier token.
    ite: Option<[usize; 3]>,
    seg: [usize; 3],
}

/// Brute-force joint window attention: every query attends to the ITEs and
/// CATs sharing its non-wrapped neighbourhood, found from original
/// coordinates; ITE pairs add the relative position bias looked up from the
/// raw table. Followed by the layer's norms, MLP and residuals, per token.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_oracle(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    window: usize,
    token_edge: usize,
    ites: &Tensor,
    cats: Option<(&Tensor, usize)>,
    shifted: bool,
) -> (Tensor, Option<Tensor>) {
    let (batch, n, c) = (ites.dim(0), ites.dim(1), ites.dim(2));
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let table = store.get(&format!("{prefix}.rel_bias")).unwrap();
    let r = 2 * window - 1;
    let ite_shift = if shifted { window / 2 } else { 0 };
    let mut out_i = vec![0.0; ites.numel()];
    let mut out_c = cats.map(|(t, _)| vec![0.0; t.numel()]);
    for b in 0..batch {
        let mut toks: Vec<Token> = (0..n)
            .map(|i| {
                let u = coords(i, token_edge);
                Token {
                    value: row(ites, b, i).to_vec(),
                    ite: Some(u),
                    seg: u.map(|v| segment(v, window, ite_shift)),
                }
            })
            .collect();
        if let Some((ct, ce)) = cats {
            let cat_edge = token_edge / window * ce;
            let cs = if shifted { ce / 2 } else { 0 };
            for j in 0..ct.dim(1) {
                let v = coords(j, cat_edge);
                toks.push(Token {
                    value: row(ct, b, j).to_vec(),
                    ite: None,
                    seg: v.map(|x| segment(x, ce, cs)),
                });
            }
        }
        let q: Vec<Vec<f64>> = toks.iter().map(|t| linear(&t.value, store, &format!("{prefix}.attn.q"))).collect();
        let k: Vec<Vec<f64>> = toks.iter().map(|t| linear(&t.value, store, &format!("{prefix}.attn.k"))).collect();
        let v: Vec<Vec<f64>> = toks.iter().map(|t| linear(&t.value, store, &format!("{prefix}.attn.v"))).collect();
        for (qi, tq) in toks.iter().enumerate() {
            let keys: Vec<usize> = (0..toks.len()).filter(|&j| toks[j].seg == tq.seg).collect();
            let mut att = vec![0.0; c];
            for h in 0..heads {
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let dot: f64 = (h * dh..(h + 1) * dh).map(|e| q[qi][e] * k[j][e]).sum();
                        let bias = match (tq.ite, toks[j].ite) {
                            (Some(a), Some(bb)) => {
                                let rel = [0, 1, 2].map(|x| a[x] + window - 1 - bb[x]);
                                table.data()[h * r.pow(3) + lin3(rel, r)]
                            }
                            _ => 0.0,
                        };
                        dot * scale + bias
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for (wi, &j) in w.iter().zip(&keys) {
                    for e in h * dh..(h + 1) * dh {
                        att[e] += wi / z * v[j][e];
                    }
                }
            }
            let a = linear(&att, store, &format!("{prefix}.attn.proj"));
            let a = layer_norm(&a, store, &format!("{prefix}.norm1"));
            let x: Vec<f64> = tq.value.iter().zip(&a).map(|(p, q)| p + q).collect();
            let m = mlp(&x, store, &format!("{prefix}.mlp"));
            let m = layer_norm(&m, store, &format!("{prefix}.norm2"));
            let y: Vec<f64> = x.iter().zip(&m).map(|(p, q)| p + q).collect();
            if qi < n {
                out_i[(b * n + qi) * c..(b * n + qi + 1) * c].copy_from_slice(&y);
            } else {
                let nc = cats.unwrap().0.dim(1);
                let j = qi - n;
                out_c.as_mut().unwrap()[(b * nc + j) * c..(b * nc + j + 1) * c].copy_from_slice(&y);
            }
        }
    }
    (
        Tensor::new(ites.shape(), out_i),
        out_c.map(|d| Tensor::new(cats.unwrap().0.shape(), d)),
    )
}

/// Direct 3-D convolution with zero padding `k / 2`, stride `stride`,
/// `weight: [Cout, Cin, k, k, k]`, `pad` voxels of zero padding.
pub fn conv3d_naive(x: &Tensor, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let (b, cin, e) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, k) = (w.dim(0), w.dim(2));
    let o = (e + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * cout * o * o * o];
    for bi in 0..b {
        for co in 0..cout {
            for ox in 0..o {
                for oy in 0..o {
                    for oz in 0..o {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for dx in 0..k {
                                for dy in 0..k {
                                    for dz in 0..k {
                                        let ix = (ox * stride + dx) as isize - pad as isize;
                                        let iy = (oy * stride + dy) as isize - pad as isize;
                                        let iz = (oz * stride + dz) as isize - pad as isize;
                                        let inside = |v: isize| v >= 0 && (v as usize) < e;
                                        if !(inside(ix) && inside(iy) && inside(iz)) {
                                            continue;
                                        }
                                        let xi = (((bi * cin + ci) * e + ix as usize) * e + iy as usize) * e + iz as usize;
                                        let wi = (((co * cin + ci) * k + dx) * k + dy) * k + dz;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out[(((bi * cout + co) * o + ox) * o + oy) * o + oz] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, cout, o, o, o], out)
}

pub fn naive_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]).powi(2);
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

pub fn naive_nrmse(reference: &[f64], test: &[f64]) -> f64 {
    let n = reference.len() as f64;
    let rmse = (reference.iter().zip(test).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    if rmse == 0.0 {
        return 0.0;
    }
    rmse / (reference.iter().map(|a| a * a).sum::<f64>() / n).sqrt()
}

/// Two-pass window statistics over every valid 7x7 window.
pub fn naive_ssim(rows: usize, cols: usize, a: &[f64], b: &[f64]) -> f64 {
    let w = 7.min(rows).min(cols);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for r0 in 0..=rows - w {
        for c0 in 0..=cols - w {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    xs.push(a[r * cols + c]);
                    ys.push(b[r * cols + c]);
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let denom = (n - 1.0).max(1.0);
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / denom;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / denom;
            let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / denom;
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

/// Random token tensors for a level: `[B, N, C]` ITEs and `[B, N_cat, C]` CATs.
pub fn random_tokens(batch: usize, n: usize, c: usize, seed: u64) -> Tensor {
    normal_tensor(&[batch, n, c], 1.0, &mut rng(seed))
}

/// Mean of an output, to turn any network into a scalar for gradient checks.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = normal_tensor(&shape, 1.0, &mut rng(seed));
    g.dot_const(x, w)
}

/// Finite-difference check of every parameter tensor of `store` plus the
/// extra inputs, each reported under its own name.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    extra: &[(&str, Tensor)],
    limit: usize,
    build: F,
) -> Vec<mtv_autograd::gradcheck::GradCheck>
where
    F: Fn(&mut Graph, &mtvnet::nn::Bound, &[Var]) -> Var,
{
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    inputs.extend(extra.iter().map(|(_, t)| t.clone()));
    let np = names.len();
    let mut reports = mtv_autograd::gradcheck::check_gradients(&inputs, 1e-4, limit, |g, vars| {
        let map = names.iter().cloned().zip(vars[..np].iter().copied()).collect();
        let bound = mtvnet::nn::Bound::from_vars(map);
        build(g, &bound, &vars[np..])
    });
    for (i, r) in reports.iter_mut().enumerate() {
        r.name = if i < np { names[i].clone() } else { extra[i - np].0.to_string() };
    }
    reports
}

pub fn worst(reports: &[mtv_autograd::gradcheck::GradCheck]) -> &mtv_autograd::gradcheck::GradCheck {
    reports
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("at least one group")
}
