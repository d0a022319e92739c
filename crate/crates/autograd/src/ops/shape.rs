use std::sync::Arc;

use crate::{Graph, Tensor, Var};

/// Index value producing a zero block in [`Graph::gather`].
pub const GATHER_ZERO: usize = usize::MAX;

/// Applies a block gather to a plain tensor: output block `i` is input block
/// `index[i]` (or zeros for [`GATHER_ZERO`]).
pub fn gather_tensor(x: &Tensor, index: &[usize], block: usize, out_shape: &[usize]) -> Tensor {
    assert_eq!(x.numel() % block, 0, "block size must divide input");
    assert_eq!(
        out_shape.iter().product::<usize>(),
        index.len() * block,
        "gather output shape mismatch"
    );
    let src = x.data();
    let mut out = vec![0.0; index.len() * block];
    for (dst, &i) in out.chunks_mut(block).zip(index) {
        if i != GATHER_ZERO {
            dst.copy_from_slice(&src[i * block..(i + 1) * block]);
        }
    }
    Tensor::new(out_shape, out)
}

fn scatter_add(g: &Tensor, index: &[usize], block: usize, in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (src, &i) in g.data().chunks(block).zip(index) {
        if i != GATHER_ZERO {
            for (a, &b) in d[i * block..(i + 1) * block].iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    dx
}

impl Graph {
    /// Block gather; the backward pass scatter-adds, so repeated indices are
    /// allowed.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, block: usize, out_shape: &[usize]) -> Var {
        let value = gather_tensor(self.value(x), &index, block, out_shape);
        let in_shape = self.shape(x).to_vec();
        self.push_op(
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(scatter_add(g, &index, block, &in_shape))]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push_op(
            value,
            &[x],
            Box::new(|g, inp, _, _| vec![Some(g.clone().reshape(inp[0].shape()))]),
        )
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (a, (&p, &q)) in s.iter().zip(&first).enumerate() {
                assert!(a == axis || p == q, "concat shape mismatch on axis {a}");
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let lens_c = lens.clone();
        self.push_op(
            Tensor::new(&shape, out),
            xs,
            Box::new(move |g, inp, _, need| {
                let mut grads: Vec<Vec<f64>> = lens_c
                    .iter()
                    .zip(need)
                    .map(|(&l, &n)| if n { Vec::with_capacity(outer * l * inner) } else { Vec::new() })
                    .collect();
                let gd = g.data();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, &len) in lens_c.iter().enumerate() {
                        let span = len * inner;
                        if need[k] {
                            grads[k].extend_from_slice(&gd[pos..pos + span]);
                        }
                        pos += span;
                    }
                }
                grads
                    .into_iter()
                    .zip(inp)
                    .zip(need)
                    .map(|((d, t), &n)| n.then(|| Tensor::new(t.shape(), d)))
                    .collect()
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let index: Arc<[usize]> = (0..outer)
            .flat_map(|o| (start..start + len).map(move |i| o * n + i))
            .collect();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.gather(x, index, inner.max(1), &out_shape)
    }
}
