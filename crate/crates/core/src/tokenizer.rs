//! Shallow features, patch embedding, carrier-token initialization, window
//! partitioning, cyclic shifts and shift masks.
//!
//! Layout conventions:
//! * feature volumes are channel-first `[B, C, X, Y, Z]`, `z` fastest;
//! * token sequences are `[B, N, C]` with tokens in lexicographic `(x, y, z)`
//!   order over the grid, `z` fastest;
//! * windowed sequences are `[B * nW, T, C]`, windows in lexicographic order
//!   of window coordinates and tokens lexicographic within a window. Group
//!   `g` holds window `g % nW` of batch element `g / nW`.

use std::sync::Arc;

use mtv_autograd::{gather_tensor, Graph, PairMask, Tensor, Var, GATHER_ZERO};

use crate::error::{Error, Result};
use crate::nn::Bound;

#[inline]
fn lin(p: [usize; 3], e: usize) -> usize {
    (p[0] * e + p[1]) * e + p[2]
}

#[inline]
fn unlin(i: usize, e: usize) -> [usize; 3] {
    [i / (e * e), (i / e) % e, i % e]
}

/// Index map of a cyclic roll on a cubic grid of edge `edge`: output position
/// `q` reads source `(q + shift) mod edge` on every axis, so the source at
/// `(shift, shift, shift)` lands at the origin.
pub fn roll_index(edge: usize, shift: usize) -> Vec<usize> {
    (0..edge.pow(3))
        .map(|i| {
            let q = unlin(i, edge);
            lin(q.map(|v| (v + shift) % edge), edge)
        })
        .collect()
}

/// Source grid index for every `(window, token)` slot of a partition of a
/// grid of edge `edge` into windows of edge `win`, after rolling by `shift`.
pub fn partition_index(edge: usize, win: usize, shift: usize) -> Vec<usize> {
    let nw = edge / win;
    let mut out = Vec::with_capacity(edge.pow(3));
    for w in 0..nw.pow(3) {
        let wc = unlin(w, nw);
        for t in 0..win.pow(3) {
            let o = unlin(t, win);
            let q = [0, 1, 2].map(|a| wc[a] * win + o[a]);
            out.push(lin(q.map(|v| (v + shift) % edge), edge));
        }
    }
    out
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Repeats a per-sample index over a batch of `batch` samples of `n` blocks.
pub fn batched(index: &[usize], n: usize, batch: usize) -> Arc<[usize]> {
    (0..batch)
        .flat_map(|b| index.iter().map(move |&i| if i == GATHER_ZERO { i } else { b * n + i }))
        .collect()
}

/// Window coordinates and in-window offset of a token.
pub fn locate(coord: [usize; 3], win: usize) -> ([usize; 3], [usize; 3]) {
    (coord.map(|c| c / win), coord.map(|c| c % win))
}

fn check_windowable(edge: usize, win: usize) -> Result<()> {
    if win == 0 || edge % win != 0 {
        return Err(Error::Geometry(format!("grid edge {edge} not divisible by window edge {win}")));
    }
    Ok(())
}

fn grid_edge(t: &Tensor) -> Result<usize> {
    if t.ndim() != 3 {
        return Err(Error::Shape(format!("token tensor must be [B, N, C], got {:?}", t.shape())));
    }
    let n = t.dim(1);
    let e = (n as f64).cbrt().round() as usize;
    if e.pow(3) != n {
        return Err(Error::Shape(format!("{n} tokens do not form a cubic grid")));
    }
    Ok(e)
}

/// `[B, N, C]` grid to `[B * nW, win^3, C]` windows.
pub fn window_partition(t: &Tensor, win: usize) -> Result<Tensor> {
    let e = grid_edge(t)?;
    check_windowable(e, win)?;
    let (b, n, c) = (t.dim(0), t.dim(1), t.dim(2));
    let idx = batched(&partition_index(e, win, 0), n, b);
    Ok(gather_tensor(t, &idx, c, &[b * (e / win).pow(3), win.pow(3), c]))
}

/// Inverse of [`window_partition`] for a grid of edge `edge`.
pub fn window_reverse(t: &Tensor, edge: usize) -> Result<Tensor> {
    let win = (t.dim(1) as f64).cbrt().round() as usize;
    check_windowable(edge, win)?;
    let nw = (edge / win).pow(3);
    if t.ndim() != 3 || t.dim(0) % nw != 0 || win.pow(3) != t.dim(1) {
        return Err(Error::Shape(format!("{:?} is not a window set of a {edge}^3 grid", t.shape())));
    }
    let (b, n, c) = (t.dim(0) / nw, edge.pow(3), t.dim(2));
    let idx = batched(&invert(&partition_index(edge, win, 0)), n, b);
    Ok(gather_tensor(t, &idx, c, &[b, n, c]))
}

/// Rolls a `[B, N, C]` grid by `shift` on all three axes.
pub fn cyclic_shift(t: &Tensor, shift: usize) -> Result<Tensor> {
    let e = grid_edge(t)?;
    let idx = batched(&roll_index(e, shift % e), t.dim(1), t.dim(0));
    Ok(gather_tensor(t, &idx, t.dim(2), t.shape()))
}

pub fn cyclic_unshift(t: &Tensor, shift: usize) -> Result<Tensor> {
    let e = grid_edge(t)?;
    cyclic_shift(t, e - shift % e)
}

/// Co-shifts the ITE grid by `floor(M/2)` and the CAT grid by `floor(c/2)`.
pub fn co_shift(ites: &Tensor, cats: &Tensor, m: usize, c: usize) -> Result<(Tensor, Tensor)> {
    Ok((cyclic_shift(ites, m / 2)?, cyclic_shift(cats, c / 2)?))
}

pub fn co_unshift(ites: &Tensor, cats: &Tensor, m: usize, c: usize) -> Result<(Tensor, Tensor)> {
    Ok((cyclic_unshift(ites, m / 2)?, cyclic_unshift(cats, c / 2)?))
}

/// Region triple of every token of window `w` (`nw` windows per edge, window
/// edge `win`). After rolling by `floor(win/2)`, tokens of the last window
/// along an axis with offset `>= win - floor(win/2)` came around the wrap and
/// form region 1 on that axis.
fn window_regions(w: [usize; 3], nw: usize, win: usize, shifted: bool) -> Vec<[u8; 3]> {
    let cut = win - win / 2;
    (0..win.pow(3))
        .map(|t| {
            let o = unlin(t, win);
            [0, 1, 2].map(|a| (shifted && w[a] == nw - 1 && o[a] >= cut) as u8)
        })
        .collect()
}

/// Pair-admissibility masks over the joint `[ITEs, CATs]` window sequence,
/// one per window in lexicographic order. Unshifted geometry (and windows not
/// touching the wrap) get `None`, meaning all pairs are admissible.
pub fn build_shift_masks(token_edge: usize, m: usize, cat: Option<usize>, shifted: bool) -> Result<Vec<PairMask>> {
    check_windowable(token_edge, m)?;
    let nw = token_edge / m;
    let mut out = Vec::with_capacity(nw.pow(3));
    for w in 0..nw.pow(3) {
        let wc = unlin(w, nw);
        let mut regions = window_regions(wc, nw, m, shifted);
        if let Some(c) = cat {
            regions.extend(window_regions(wc, nw, c, shifted));
        }
        if regions.iter().all(|r| *r == regions[0]) {
            out.push(None);
            continue;
        }
        let l = regions.len();
        let mut mask = vec![false; l * l];
        for i in 0..l {
            for j in 0..l {
                mask[i * l + j] = regions[i] == regions[j];
            }
        }
        out.push(Some(mask.into()));
    }
    Ok(out)
}

/// Expands an optional mask to an explicit boolean matrix.
pub fn mask_matrix(mask: &PairMask, len: usize) -> Vec<bool> {
    match mask {
        Some(m) => m.to_vec(),
        None => vec![true; len * len],
    }
}

/// Mask as text, one row per line, `1` admissible and `0` masked.
pub fn mask_to_text(mask: &PairMask, len: usize) -> String {
    let m = mask_matrix(mask, len);
    let mut s = String::with_capacity(len * (len + 1));
    for row in m.chunks(len) {
        s.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
        s.push('\n');
    }
    s
}

/// Gather index turning a `[H, (2M-1)^3]` table into a `[H, L, L]` bias over
/// the joint window sequence (`L = M^3 + n_cat`). Only ITE-ITE pairs get a
/// learned term; pairs involving CATs read zero.
pub fn relative_bias_index(m: usize, n_cat: usize, heads: usize) -> Arc<[usize]> {
    let t = m.pow(3);
    let l = t + n_cat;
    let r = 2 * m - 1;
    let table = r.pow(3);
    let mut idx = Vec::with_capacity(heads * l * l);
    for h in 0..heads {
        for i in 0..l {
            for j in 0..l {
                if i < t && j < t {
                    let (a, b) = (unlin(i, m), unlin(j, m));
                    let rel = [0, 1, 2].map(|k| a[k] + m - 1 - b[k]);
                    idx.push(h * table + (rel[0] * r + rel[1]) * r + rel[2]);
                } else {
                    idx.push(GATHER_ZERO);
                }
            }
        }
    }
    idx.into()
}

/// Token and window bookkeeping of one level for a given batch size, with
/// the gather indices the attention layers need.
#[derive(Clone, Debug)]
pub struct LevelPlan {
    pub batch: usize,
    pub token_edge: usize,
    pub window: usize,
    pub windows_per_edge: usize,
    /// CAT edge per window, when carrier tokens are enabled.
    pub cat: Option<usize>,
    pub heads: usize,
    /// `(partition, reverse)` indices for the ITE grid, unshifted then shifted.
    pub ite_index: [(Arc<[usize]>, Arc<[usize]>); 2],
    pub cat_index: Option<[(Arc<[usize]>, Arc<[usize]>); 2]>,
    pub shift_masks: Arc<[PairMask]>,
    pub bias_index: Arc<[usize]>,
}

impl LevelPlan {
    pub fn new(batch: usize, token_edge: usize, window: usize, cat: Option<usize>, heads: usize) -> Result<Self> {
        check_windowable(token_edge, window)?;
        let nw = token_edge / window;
        let make = |edge: usize, win: usize, shift: usize| {
            let p = partition_index(edge, win, shift);
            let n = edge.pow(3);
            (batched(&p, n, batch), batched(&invert(&p), n, batch))
        };
        let ite_index = [make(token_edge, window, 0), make(token_edge, window, window / 2)];
        let cat_index = cat.map(|c| {
            let g = nw * c;
            [make(g, c, 0), make(g, c, c / 2)]
        });
        let shift_masks = build_shift_masks(token_edge, window, cat, true)?.into();
        let n_cat = cat.map_or(0, |c| c.pow(3));
        Ok(Self {
            batch,
            token_edge,
            window,
            windows_per_edge: nw,
            cat,
            heads,
            ite_index,
            cat_index,
            shift_masks,
            bias_index: relative_bias_index(window, n_cat, heads),
        })
    }

    pub fn n_windows(&self) -> usize {
        self.windows_per_edge.pow(3)
    }

    pub fn n_ites(&self) -> usize {
        self.token_edge.pow(3)
    }

    pub fn cat_edge(&self) -> Option<usize> {
        self.cat.map(|c| c * self.windows_per_edge)
    }

    pub fn n_cats(&self) -> usize {
        self.cat.map_or(0, |c| c.pow(3) * self.n_windows())
    }

    /// Joint window sequence length `M^3 + c^3`.
    pub fn seq_len(&self) -> usize {
        self.window.pow(3) + self.cat.map_or(0, |c| c.pow(3))
    }

    pub fn partition_ites(&self, g: &mut Graph, x: Var, shifted: bool) -> Var {
        let c = g.shape(x)[2];
        let idx = self.ite_index[shifted as usize].0.clone();
        g.gather(x, idx, c, &[self.batch * self.n_windows(), self.window.pow(3), c])
    }

    pub fn reverse_ites(&self, g: &mut Graph, x: Var, shifted: bool) -> Var {
        let c = g.shape(x)[2];
        let idx = self.ite_index[shifted as usize].1.clone();
        g.gather(x, idx, c, &[self.batch, self.n_ites(), c])
    }

    pub fn partition_cats(&self, g: &mut Graph, x: Var, shifted: bool) -> Var {
        let c = g.shape(x)[2];
        let cat = self.cat.expect("carrier tokens enabled");
        let idx = self.cat_index.as_ref().expect("carrier tokens enabled")[shifted as usize].0.clone();
        g.gather(x, idx, c, &[self.batch * self.n_windows(), cat.pow(3), c])
    }

    pub fn reverse_cats(&self, g: &mut Graph, x: Var, shifted: bool) -> Var {
        let c = g.shape(x)[2];
        let idx = self.cat_index.as_ref().expect("carrier tokens enabled")[shifted as usize].1.clone();
        g.gather(x, idx, c, &[self.batch, self.n_cats(), c])
    }
}

/// Shallow feature extraction: one unit-stride 3x3x3 convolution.
pub fn sfe(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 5 || s[2..].iter().any(|&d| d < 3) {
        return Err(Error::Shape(format!("SFE input must be [B, C, >=3, >=3, >=3], got {s:?}")));
    }
    Ok(p.conv(g, name, x))
}

/// Element index of the central `next^3` crop of a `[B, C, e, e, e]` volume.
pub fn center_crop_index(batch: usize, channels: usize, edge: usize, next: usize) -> Result<Vec<usize>> {
    if next >= edge || (edge - next) % 2 != 0 {
        return Err(Error::Geometry(format!(
            "cannot center-crop extent {next} from {edge} (need smaller, equal parity)"
        )));
    }
    let off = (edge - next) / 2;
    let mut idx = Vec::with_capacity(batch * channels * next.pow(3));
    for bc in 0..batch * channels {
        for x in 0..next {
            for y in 0..next {
                let row = ((bc * edge + x + off) * edge + y + off) * edge + off;
                idx.extend(row..row + next);
            }
        }
    }
    Ok(idx)
}

fn cube_edge(shape: &[usize]) -> Result<usize> {
    if shape.len() != 5 || shape[2] != shape[3] || shape[3] != shape[4] {
        return Err(Error::Shape(format!("expected a cubic [B, C, e, e, e] volume, got {shape:?}")));
    }
    Ok(shape[2])
}

/// Central `next^3` crop of a feature volume, passed to the next level.
pub fn crop_and_pass(g: &mut Graph, f: Var, next: usize) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let e = cube_edge(&s)?;
    let idx = center_crop_index(s[0], s[1], e, next)?;
    Ok(g.gather(f, idx.into(), 1, &[s[0], s[1], next, next, next]))
}

pub fn center_crop_tensor(t: &Tensor, next: usize) -> Result<Tensor> {
    let e = cube_edge(t.shape())?;
    let idx = center_crop_index(t.dim(0), t.dim(1), e, next)?;
    Ok(gather_tensor(t, &idx, 1, &[t.dim(0), t.dim(1), next, next, next]))
}

/// For every token of a `[B, C, e, e, e]` volume cut into `p^3` patches, the
/// element indices of its patch in `(channel, dx, dy, dz)` order. Output is
/// laid out `[B, N, C * p^3]`.
pub fn patch_index(batch: usize, channels: usize, edge: usize, p: usize) -> Vec<usize> {
    let te = edge / p;
    let mut idx = Vec::with_capacity(batch * channels * edge.pow(3));
    for b in 0..batch {
        for t in 0..te.pow(3) {
            let tc = unlin(t, te);
            for c in 0..channels {
                for dx in 0..p {
                    for dy in 0..p {
                        for dz in 0..p {
                            let v = [tc[0] * p + dx, tc[1] * p + dy, tc[2] * p + dz];
                            idx.push((b * channels + c) * edge.pow(3) + lin(v, edge));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Patch embedding: a `p^3` kernel, stride `p` convolution, realized as a
/// patch gather followed by a linear map `[C * p^3] -> [C_emb]`.
pub fn embed_patches(g: &mut Graph, params: &Bound, name: &str, f: Var, p: usize) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let e = cube_edge(&s)?;
    if p == 0 || e % p != 0 {
        return Err(Error::Geometry(format!("feature extent {e} not divisible by patch size {p}")));
    }
    let n = (e / p).pow(3);
    let idx = patch_index(s[0], s[1], e, p);
    let patches = g.gather(f, idx.into(), 1, &[s[0], n, s[1] * p.pow(3)]);
    Ok(params.linear(g, name, patches))
}

/// For a token grid of edge `edge`, token indices of each `k^3` block in
/// `(dx, dy, dz)` order, blocks lexicographic. Used for carrier-token init.
pub fn token_block_index(edge: usize, k: usize) -> Vec<usize> {
    let ge = edge / k;
    let mut idx = Vec::with_capacity(edge.pow(3));
    for u in 0..ge.pow(3) {
        let uc = unlin(u, ge);
        for o in 0..k.pow(3) {
            let oc = unlin(o, k);
            idx.push(lin([0, 1, 2].map(|a| uc[a] * k + oc[a]), edge));
        }
    }
    idx
}

/// Carrier-token initialization: kernel = stride = `floor(M/c)` convolution
/// over the token grid, plus a learned absolute embedding per CAT position.
/// `tokens: [B, N, C]` -> `[B, N_cat, C]`.
pub fn init_cats(g: &mut Graph, params: &Bound, name: &str, tokens: Var, token_edge: usize, stride: usize) -> Result<Var> {
    if stride == 0 || token_edge % stride != 0 {
        return Err(Error::Geometry(format!(
            "token edge {token_edge} not divisible by CAT stride {stride}"
        )));
    }
    let s = g.shape(tokens).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let ge = token_edge / stride;
    let ncat = ge.pow(3);
    let idx = batched(&token_block_index(token_edge, stride), n, b);
    let blocks = g.gather(tokens, idx, c, &[b, ncat, stride.pow(3) * c]);
    let cats = params.linear(g, name, blocks);
    let flat = g.reshape(cats, &[b, ncat * c]);
    let pos = params.var(&format!("{name}.pos"));
    let pos_flat = g.reshape(pos, &[ncat * c]);
    let with_pos = g.add_bias(flat, pos_flat);
    Ok(g.reshape(with_pos, &[b, ncat, c]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_location_example() {
        let (w, o) = locate([9, 2, 15], 8);
        assert_eq!(w, [1, 0, 1]);
        assert_eq!(o, [1, 2, 7]);
        // the same token sits at slot (window 5, token 1*64+2*8+7) of the partition
        let p = partition_index(16, 8, 0);
        let slot = 5 * 512 + (64 + 16 + 7);
        assert_eq!(p[slot], lin([9, 2, 15], 16));
    }

    #[test]
    fn roll_moves_shift_source_to_origin() {
        let r = roll_index(16, 4);
        assert_eq!(r[0], lin([4, 4, 4], 16));
        assert_eq!(r[lin([12, 12, 12], 16)], 0);
    }

    #[test]
    fn unshifted_masks_are_all_true() {
        let masks = build_shift_masks(8, 4, Some(2), false).unwrap();
        assert_eq!(masks.len(), 8);
        assert!(masks.iter().all(Option::is_none));
    }

    #[test]
    fn shifted_masks_are_symmetric_and_reflexive() {
        let masks = build_shift_masks(8, 4, Some(2), true).unwrap();
        // window (0,0,0) never touches the wrap
        assert!(masks[0].is_none());
        for m in &masks {
            let l = 72;
            let mm = mask_matrix(m, l);
            for i in 0..l {
                assert!(mm[i * l + i]);
                for j in 0..l {
                    assert_eq!(mm[i * l + j], mm[j * l + i]);
                }
            }
        }
    }

    #[test]
    fn corner_window_mask_counts_match_region_enumeration() {
        // M = 4, c = 2: the last window along every axis splits into 8 regions
        // of 2^3 ITEs and 1 CAT each, so each region holds 9 tokens.
        let masks = build_shift_masks(8, 4, Some(2), true).unwrap();
        let corner = mask_matrix(&masks[7], 72);
        assert_eq!(corner.iter().filter(|&&b| b).count(), 8 * 9 * 9);
        let text = mask_to_text(&masks[7], 72);
        assert_eq!(text.lines().count(), 72);
    }

    #[test]
    fn relative_bias_index_is_symmetric_in_offsets() {
        let idx = relative_bias_index(2, 1, 1);
        let l = 9;
        // pair (i, i) hits the zero-offset entry for every ITE
        let centre = (1 * 3 + 1) * 3 + 1;
        for i in 0..8 {
            assert_eq!(idx[i * l + i], centre);
        }
        assert_eq!(idx[8 * l], GATHER_ZERO);
    }

    #[test]
    fn crop_offsets_are_central() {
        let idx = center_crop_index(1, 1, 8, 4).unwrap();
        assert_eq!(idx[0], lin([2, 2, 2], 8));
        assert!(center_crop_index(1, 1, 8, 3).is_err());
        assert!(center_crop_index(1, 1, 8, 8).is_err());
    }
}
