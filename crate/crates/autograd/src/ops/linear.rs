use crate::gemm::{gemm, MatMut, MatRef};
use crate::{Graph, Tensor, Var};

impl Graph {
    /// `x @ w (+ b)` over the last axis. `x: [.., in]`, `w: [in, out]`,
    /// `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 2, "linear weight must be 2-D");
        let (fin, fout) = (wv.dim(0), wv.dim(1));
        assert_eq!(xv.last_dim(), fin, "linear input width {} != {fin}", xv.last_dim());
        let rows = xv.numel() / fin;
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = fout;
        let mut out = vec![0.0; rows * fout];
        gemm(
            1.0,
            MatRef::dense(xv.data(), rows, fin),
            MatRef::dense(wv.data(), fin, fout),
            0.0,
            MatMut::dense(&mut out, rows, fout),
        );
        let value = Tensor::new(&out_shape, out);
        let y = self.push_op(
            value,
            &[x, w],
            Box::new(move |g, inp, _, need| {
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; rows * fin];
                    gemm(
                        1.0,
                        MatRef::dense(g.data(), rows, fout),
                        MatRef::dense(inp[1].data(), fin, fout).t(),
                        0.0,
                        MatMut::dense(&mut dx, rows, fin),
                    );
                    Tensor::new(inp[0].shape(), dx)
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![0.0; fin * fout];
                    gemm(
                        1.0,
                        MatRef::dense(inp[0].data(), rows, fin).t(),
                        MatRef::dense(g.data(), rows, fout),
                        0.0,
                        MatMut::dense(&mut dw, fin, fout),
                    );
                    Tensor::new(&[fin, fout], dw)
                });
                vec![dx, dw]
            }),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Batched matrix product `[g, m, k] @ [g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.ndim() == 3 && bv.ndim() == 3, "bmm needs 3-D operands");
        let (gs, m, k) = (av.dim(0), av.dim(1), av.dim(2));
        let n = bv.dim(2);
        assert_eq!(bv.dim(0), gs);
        assert_eq!(bv.dim(1), k);
        let mut out = vec![0.0; gs * m * n];
        for i in 0..gs {
            gemm(
                1.0,
                MatRef::strided(av.data(), i * m * k, m, k, k, 1),
                MatRef::strided(bv.data(), i * k * n, k, n, n, 1),
                0.0,
                MatMut::strided(&mut out, i * m * n, m, n, n, 1),
            );
        }
        self.push_op(
            Tensor::new(&[gs, m, n], out),
            &[a, b],
            Box::new(move |g, inp, _, need| {
                let da = need[0].then(|| {
                    let mut da = vec![0.0; gs * m * k];
                    for i in 0..gs {
                        gemm(
                            1.0,
                            MatRef::strided(g.data(), i * m * n, m, n, n, 1),
                            MatRef::strided(inp[1].data(), i * k * n, k, n, n, 1).t(),
                            0.0,
                            MatMut::strided(&mut da, i * m * k, m, k, k, 1),
                        );
                    }
                    Tensor::new(&[gs, m, k], da)
                });
                let db = need[1].then(|| {
                    let mut db = vec![0.0; gs * k * n];
                    for i in 0..gs {
                        gemm(
                            1.0,
                            MatRef::strided(inp[0].data(), i * m * k, m, k, k, 1).t(),
                            MatRef::strided(g.data(), i * m * n, m, n, n, 1),
                            0.0,
                            MatMut::strided(&mut db, i * k * n, k, n, n, 1),
                        );
                    }
                    Tensor::new(&[gs, k, n], db)
                });
                vec![da, db]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        assert_eq!(self.value(gamma).numel(), c);
        assert_eq!(self.value(beta).numel(), c);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let (mean, rstd) = moments(row, eps);
            for ((v, &g), &b) in row.iter_mut().zip(&gv).zip(&bv) {
                *v = (*v - mean) * rstd * g + b;
            }
        }
        self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, inp, _, need| {
                let (xv, gamma) = (inp[0], inp[1].data());
                let mut dx = need[0].then(|| Tensor::zeros(xv.shape()));
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (r, (xrow, grow)) in xv.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let (mean, rstd) = moments(xrow, eps);
                    for j in 0..c {
                        xhat[j] = (xrow[j] - mean) * rstd;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gamma[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let drow = &mut dx.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                vec![
                    dx,
                    need[1].then(|| Tensor::new(inp[1].shape(), dgamma)),
                    need[2].then(|| Tensor::new(inp[2].shape(), dbeta)),
                ]
            }),
        )
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
