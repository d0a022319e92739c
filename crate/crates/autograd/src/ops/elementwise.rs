use crate::{Graph, Tensor, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn rows_of(t: &Tensor) -> (usize, usize) {
    let c = t.last_dim();
    (t.numel() / c.max(1), c)
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(
            value,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(
            value,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(
            value,
            &[a, b],
            Box::new(|g, inp, _, need| {
                vec![
                    need[0].then(|| g.zip_map(inp[1], |g, y| g * y)),
                    need[1].then(|| g.zip_map(inp[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        self.push_op(value, &[a], Box::new(move |g, _, _, _| vec![Some(g.map(|x| k * x))]))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.numel(), xv.last_dim(), "bias length must match last axis");
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(bv.numel()) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push_op(
            value,
            &[x, bias],
            Box::new(|g, inp, _, need| {
                let db = need[1].then(|| {
                    let c = inp[1].numel();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::new(inp[1].shape(), db)
                });
                vec![Some(g.clone()), db]
            }),
        )
    }

    /// Multiplies by a vector along the last axis (channel-wise scaling).
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(scale);
        assert_eq!(sv.numel(), xv.last_dim(), "scale length must match last axis");
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(sv.numel()) {
            for (o, &s) in row.iter_mut().zip(sv.data()) {
                *o *= s;
            }
        }
        self.push_op(
            value,
            &[x, scale],
            Box::new(|g, inp, _, need| {
                let c = inp[1].numel();
                let dx = need[0].then(|| {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(c) {
                        for (o, &s) in row.iter_mut().zip(inp[1].data()) {
                            *o *= s;
                        }
                    }
                    dx
                });
                let ds = need[1].then(|| {
                    let mut ds = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks(c).zip(inp[0].data().chunks(c)) {
                        for ((d, &gv), &xv) in ds.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                    Tensor::new(inp[1].shape(), ds)
                });
                vec![dx, ds]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push_op(
            value,
            &[x],
            Box::new(|g, inp, _, _| {
                let d = inp[0].map(|x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                vec![Some(g.zip_map(&d, |g, d| g * d))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push_op(
            value,
            &[x],
            Box::new(move |g, inp, _, _| {
                vec![Some(g.zip_map(inp[0], |g, x| if x >= 0.0 { g } else { slope * g }))]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push_op(
            value,
            &[x],
            Box::new(|g, _, out, _| vec![Some(g.zip_map(out, |g, y| g * y))]),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(
            value,
            &[x],
            Box::new(|g, inp, _, _| vec![Some(Tensor::full(inp[0].shape(), g.item()))]),
        )
    }

    /// `sum(x * weights)` for a fixed weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "dot_const shape mismatch");
        let value = Tensor::scalar(xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum());
        self.push_op(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let s = g.item();
                vec![Some(weights.map(|w| s * w))]
            }),
        )
    }

    /// Mean absolute difference between `pred` and a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "l1_loss shape mismatch");
        let n = p.numel() as f64;
        let value = Tensor::scalar(
            p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        );
        self.push_op(
            value,
            &[pred, target],
            Box::new(move |g, inp, _, need| {
                let s = g.item() / n;
                let dp = inp[0].zip_map(inp[1], |a, b| s * sign(a - b));
                let dt = need[1].then(|| dp.map(|x| -x));
                vec![need[0].then_some(dp), dt]
            }),
        )
    }

    /// L2-normalizes each head's slice of the last axis.
    pub fn head_l2_normalize(&mut self, x: Var, heads: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let (_, c) = rows_of(xv);
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let d = c / heads;
        let mut value = xv.clone();
        for seg in value.data_mut().chunks_mut(d) {
            let norm = seg.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            seg.iter_mut().for_each(|v| *v /= norm);
        }
        self.push_op(
            value,
            &[x],
            Box::new(move |g, inp, out, _| {
                let mut dx = g.clone();
                for ((dseg, xseg), yseg) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(inp[0].data().chunks(d))
                    .zip(out.data().chunks(d))
                {
                    let norm = xseg.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= eps {
                        dseg.iter_mut().for_each(|v| *v /= eps);
                        continue;
                    }
                    let dot: f64 = dseg.iter().zip(yseg).map(|(a, b)| a * b).sum();
                    for (dv, &y) in dseg.iter_mut().zip(yseg) {
                        *dv = (*dv - dot * y) / norm;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
