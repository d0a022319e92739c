use crate::gemm::{gemm, MatMut, MatRef};
use crate::{Graph, Tensor, Var};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    x: usize,
    y: usize,
    z: usize,
    k: usize,
}

impl Geometry {
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    fn voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

/// Unfolds one sample `[Cin, X, Y, Z]` into `[Cin*k^3, X*Y*Z]` with zero
/// padding so the output keeps the input's spatial size.
fn im2col(src: &[f64], geo: Geometry, cols: &mut [f64]) {
    let Geometry { cin, x, y, z, k } = geo;
    let pad = geo.pad();
    let p = geo.voxels();
    let mut row = 0;
    for ci in 0..cin {
        let chan = &src[ci * p..(ci + 1) * p];
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (ox, oy, oz) = (dx as isize - pad, dy as isize - pad, dz as isize - pad);
                    for ix in 0..x {
                        let sx = ix as isize + ox;
                        for iy in 0..y {
                            let sy = iy as isize + oy;
                            let d = &mut dst[(ix * y + iy) * z..(ix * y + iy + 1) * z];
                            if sx < 0 || sx >= x as isize || sy < 0 || sy >= y as isize {
                                d.fill(0.0);
                                continue;
                            }
                            let base = (sx as usize * y + sy as usize) * z;
                            for (iz, v) in d.iter_mut().enumerate() {
                                let sz = iz as isize + oz;
                                *v = if sz < 0 || sz >= z as isize {
                                    0.0
                                } else {
                                    chan[base + sz as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a sample.
fn col2im(cols: &[f64], geo: Geometry, dst: &mut [f64]) {
    let Geometry { cin, x, y, z, k } = geo;
    let pad = geo.pad();
    let p = geo.voxels();
    let mut row = 0;
    for ci in 0..cin {
        let chan = &mut dst[ci * p..(ci + 1) * p];
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    let src = &cols[row * p..(row + 1) * p];
                    let (ox, oy, oz) = (dx as isize - pad, dy as isize - pad, dz as isize - pad);
                    for ix in 0..x {
                        let sx = ix as isize + ox;
                        if sx < 0 || sx >= x as isize {
                            continue;
                        }
                        for iy in 0..y {
                            let sy = iy as isize + oy;
                            if sy < 0 || sy >= y as isize {
                                continue;
                            }
                            let base = (sx as usize * y + sy as usize) * z;
                            let s = &src[(ix * y + iy) * z..(ix * y + iy + 1) * z];
                            for (iz, &v) in s.iter().enumerate() {
                                let sz = iz as isize + oz;
                                if sz >= 0 && sz < z as isize {
                                    chan[base + sz as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Graph {
    /// Unit-stride "same" 3-D cross-correlation.
    ///
    /// `x: [B, Cin, X, Y, Z]`, `w: [Cout, Cin, k, k, k]` with odd `k`,
    /// `b: [Cout]`. Zero padding of `(k - 1) / 2` on every side.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ndim(), 5, "conv3d input must be [B, C, X, Y, Z]");
        assert_eq!(wv.ndim(), 5, "conv3d weight must be [Cout, Cin, k, k, k]");
        let k = wv.dim(2);
        assert!(k % 2 == 1 && wv.dim(3) == k && wv.dim(4) == k, "conv3d kernel must be odd and cubic");
        assert_eq!(wv.dim(1), xv.dim(1), "conv3d channel mismatch");
        let batch = xv.dim(0);
        let cout = wv.dim(0);
        let geo = Geometry {
            cin: xv.dim(1),
            x: xv.dim(2),
            y: xv.dim(3),
            z: xv.dim(4),
            k,
        };
        let (p, rows) = (geo.voxels(), geo.rows());
        let mut out = vec![0.0; batch * cout * p];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * p] };
        for bi in 0..batch {
            let sample = &xv.data()[bi * geo.cin * p..(bi + 1) * geo.cin * p];
            let colv: &[f64] = if k == 1 {
                sample
            } else {
                im2col(sample, geo, &mut cols);
                &cols
            };
            gemm(
                1.0,
                MatRef::dense(wv.data(), cout, rows),
                MatRef::dense(colv, rows, p),
                0.0,
                MatMut::strided(&mut out, bi * cout * p, cout, p, p, 1),
            );
        }
        let out_shape = [batch, cout, geo.x, geo.y, geo.z];
        let y = self.push_op(
            Tensor::new(&out_shape, out),
            &[x, w],
            Box::new(move |g, inp, _, need| {
                let (xv, wv) = (inp[0], inp[1]);
                let mut dx = need[0].then(|| Tensor::zeros(xv.shape()));
                let mut dw = need[1].then(|| vec![0.0; cout * rows]);
                let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * p] };
                let mut dcols = vec![0.0; rows * p];
                for bi in 0..batch {
                    let gout = MatRef::strided(g.data(), bi * cout * p, cout, p, p, 1);
                    let sample = &xv.data()[bi * geo.cin * p..(bi + 1) * geo.cin * p];
                    if let Some(dw) = dw.as_mut() {
                        let colv: &[f64] = if k == 1 {
                            sample
                        } else {
                            im2col(sample, geo, &mut cols);
                            &cols
                        };
                        gemm(
                            1.0,
                            gout,
                            MatRef::dense(colv, rows, p).t(),
                            1.0,
                            MatMut::dense(dw, cout, rows),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx.data_mut()[bi * geo.cin * p..(bi + 1) * geo.cin * p];
                        if k == 1 {
                            gemm(
                                1.0,
                                MatRef::dense(wv.data(), cout, rows).t(),
                                gout,
                                0.0,
                                MatMut::dense(dst, rows, p),
                            );
                        } else {
                            gemm(
                                1.0,
                                MatRef::dense(wv.data(), cout, rows).t(),
                                gout,
                                0.0,
                                MatMut::dense(&mut dcols, rows, p),
                            );
                            col2im(&dcols, geo, dst);
                        }
                    }
                }
                vec![dx, dw.map(|d| Tensor::new(wv.shape(), d))]
            }),
        );
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => y,
        }
    }

    /// Adds a per-channel bias to a channel-first `[B, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let c = xv.dim(1);
        assert_eq!(self.value(bias).numel(), c, "channel bias length");
        let inner = xv.numel() / (xv.dim(0) * c);
        let mut out = xv.clone();
        let bv = self.value(bias).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push_op(
            out,
            &[x, bias],
            Box::new(move |g, inp, _, need| {
                let db = need[1].then(|| {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    Tensor::new(inp[1].shape(), db)
                });
                vec![Some(g.clone()), db]
            }),
        )
    }
}
