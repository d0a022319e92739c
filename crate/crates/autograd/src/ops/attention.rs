use std::sync::Arc;

use crate::gemm::{gemm, MatMut, MatRef};
use crate::{Graph, Tensor, Var};

/// Boolean admissibility matrix, row-major `[n_query, n_key]`. `None` means
/// every pair is admissible.
pub type PairMask = Option<Arc<[bool]>>;

/// Static configuration of a fused multi-head attention call.
#[derive(Clone, Default)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Multiplier applied to `q . k` before bias and masking.
    pub scale: f64,
    /// Per-group masks; group `g` uses `masks[g % masks.len()]`.
    pub masks: Option<Arc<[PairMask]>>,
}

impl AttentionSpec {
    pub fn new(heads: usize, scale: f64) -> Self {
        Self {
            heads,
            scale,
            masks: None,
        }
    }

    pub fn with_masks(mut self, masks: Arc<[PairMask]>) -> Self {
        self.masks = Some(masks);
        self
    }

    fn mask_for(&self, group: usize) -> Option<&[bool]> {
        let masks = self.masks.as_ref()?;
        masks[group % masks.len()].as_deref()
    }
}

struct Dims {
    groups: usize,
    nq: usize,
    nk: usize,
    c: usize,
    d: usize,
    heads: usize,
}

impl Graph {
    /// Fused multi-head attention `softmax(scale * s_h * q k^T + bias_h) v`.
    ///
    /// `q: [G, Nq, C]`, `k, v: [G, Nk, C]` with heads occupying contiguous
    /// channel slices of width `C / heads`. `bias: [H, Nq, Nk]` is shared by
    /// all groups; `head_scale: [H]` is an optional learnable per-head logit
    /// multiplier `s_h`. Inadmissible pairs get a `-inf` logit.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        head_scale: Option<Var>,
        spec: &AttentionSpec,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.ndim(), 3, "attention q must be [G, Nq, C]");
        let dims = Dims {
            groups: qv.dim(0),
            nq: qv.dim(1),
            nk: kv.dim(1),
            c: qv.dim(2),
            d: qv.dim(2) / spec.heads,
            heads: spec.heads,
        };
        assert_eq!(dims.c % spec.heads, 0, "channels not divisible by heads");
        assert_eq!(kv.shape(), vv.shape(), "k and v shapes differ");
        assert_eq!(kv.dim(0), dims.groups);
        assert_eq!(kv.dim(2), dims.c);
        let bias_t = bias.map(|b| self.value(b).clone());
        if let Some(b) = &bias_t {
            assert_eq!(b.shape(), &[dims.heads, dims.nq, dims.nk], "attention bias shape");
        }
        let hs: Vec<f64> = match head_scale {
            Some(s) => {
                let s = self.value(s);
                assert_eq!(s.numel(), dims.heads, "head scale length");
                s.data().to_vec()
            }
            None => vec![1.0; dims.heads],
        };
        if let Some(m) = &spec.masks {
            for mask in m.iter().flatten() {
                assert_eq!(mask.len(), dims.nq * dims.nk, "mask shape");
            }
        }

        let Dims { groups, nq, nk, c, d, heads } = dims;
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut out = vec![0.0; groups * nq * c];
        for g in 0..groups {
            let mask = spec.mask_for(g);
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * nq * nk..(g * heads + h + 1) * nq * nk];
                gemm(
                    spec.scale * hs[h],
                    MatRef::strided(qv.data(), g * nq * c + h * d, nq, d, c, 1),
                    MatRef::strided(kv.data(), g * nk * c + h * d, nk, d, c, 1).t(),
                    0.0,
                    MatMut::dense(p, nq, nk),
                );
                if let Some(b) = &bias_t {
                    let bh = &b.data()[h * nq * nk..(h + 1) * nq * nk];
                    p.iter_mut().zip(bh).for_each(|(x, &y)| *x += y);
                }
                if let Some(mask) = mask {
                    p.iter_mut()
                        .zip(mask)
                        .filter(|(_, &ok)| !ok)
                        .for_each(|(x, _)| *x = f64::NEG_INFINITY);
                }
                for row in p.chunks_mut(nk) {
                    softmax_in_place(row);
                }
                gemm(
                    1.0,
                    MatRef::dense(p, nq, nk),
                    MatRef::strided(vv.data(), g * nk * c + h * d, nk, d, c, 1),
                    0.0,
                    MatMut::strided(&mut out, g * nq * c + h * d, nq, d, c, 1),
                );
            }
        }

        let mut parents = vec![q, k, v];
        let bias_pos = bias.map(|b| {
            parents.push(b);
            parents.len() - 1
        });
        let scale_pos = head_scale.map(|s| {
            parents.push(s);
            parents.len() - 1
        });
        self.note_saved(probs.len());
        let spec = spec.clone();
        self.push_op(
            Tensor::new(&[groups, nq, c], out),
            &parents,
            Box::new(move |grad, inp, _, need| {
                let (qv, kv, vv) = (inp[0], inp[1], inp[2]);
                let hs: Vec<f64> = match scale_pos {
                    Some(i) => inp[i].data().to_vec(),
                    None => vec![1.0; heads],
                };
                let mut dq = vec![0.0; groups * nq * c];
                let mut dk = vec![0.0; groups * nk * c];
                let mut dv = vec![0.0; groups * nk * c];
                let mut dbias = vec![0.0; heads * nq * nk];
                let mut dhs = vec![0.0; heads];
                let mut dp = vec![0.0; nq * nk];
                let mut raw = vec![0.0; nq * nk];
                for g in 0..groups {
                    for h in 0..heads {
                        let p = &probs[(g * heads + h) * nq * nk..(g * heads + h + 1) * nq * nk];
                        let go = MatRef::strided(grad.data(), g * nq * c + h * d, nq, d, c, 1);
                        let qh = MatRef::strided(qv.data(), g * nq * c + h * d, nq, d, c, 1);
                        let kh = MatRef::strided(kv.data(), g * nk * c + h * d, nk, d, c, 1);
                        let vh = MatRef::strided(vv.data(), g * nk * c + h * d, nk, d, c, 1);
                        // dV = P^T dO
                        gemm(
                            1.0,
                            MatRef::dense(p, nq, nk).t(),
                            go,
                            1.0,
                            MatMut::strided(&mut dv, g * nk * c + h * d, nk, d, c, 1),
                        );
                        // dP = dO V^T
                        gemm(1.0, go, vh.t(), 0.0, MatMut::dense(&mut dp, nq, nk));
                        // dS = P * (dP - rowsum(dP * P))
                        for (prow, drow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                                *dv_ = pv * (*dv_ - dot);
                            }
                        }
                        if bias_pos.is_some() {
                            dbias[h * nq * nk..(h + 1) * nq * nk]
                                .iter_mut()
                                .zip(&dp)
                                .for_each(|(a, &b)| *a += b);
                        }
                        if scale_pos.is_some() {
                            gemm(1.0, qh, kh.t(), 0.0, MatMut::dense(&mut raw, nq, nk));
                            dhs[h] += spec.scale
                                * raw.iter().zip(&dp).map(|(a, b)| a * b).sum::<f64>();
                        }
                        let eff = spec.scale * hs[h];
                        gemm(
                            eff,
                            MatRef::dense(&dp, nq, nk),
                            kh,
                            1.0,
                            MatMut::strided(&mut dq, g * nq * c + h * d, nq, d, c, 1),
                        );
                        gemm(
                            eff,
                            MatRef::dense(&dp, nq, nk).t(),
                            qh,
                            1.0,
                            MatMut::strided(&mut dk, g * nk * c + h * d, nk, d, c, 1),
                        );
                    }
                }
                let mut grads = vec![
                    need[0].then(|| Tensor::new(qv.shape(), dq)),
                    need[1].then(|| Tensor::new(kv.shape(), dk)),
                    need[2].then(|| Tensor::new(vv.shape(), dv)),
                ];
                if let Some(i) = bias_pos {
                    grads.push(need[i].then(|| Tensor::new(inp[i].shape(), dbias)));
                }
                if let Some(i) = scale_pos {
                    grads.push(need[i].then(|| Tensor::new(inp[i].shape(), dhs)));
                }
                grads
            }),
        )
    }
}

/// Numerically stable softmax; entries at `-inf` become exactly zero.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
