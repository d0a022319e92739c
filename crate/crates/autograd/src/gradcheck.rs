//! Central finite-difference checks for analytic gradients.

use crate::{Graph, Tensor, Var};

/// Outcome of checking one input (or parameter group).
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over
    /// the checked entries of the group.
    pub rel_err: f64,
    /// Largest checked gradient magnitude; zero flags a dead path.
    pub scale: f64,
}

impl GradCheck {
    pub fn from_pairs(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let max_abs_err = analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = analytic
            .iter()
            .chain(numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let rel_err = if scale > 0.0 { max_abs_err / scale } else { 0.0 };
        Self {
            name: name.into(),
            checked: analytic.len(),
            max_abs_err,
            rel_err,
            scale,
        }
    }
}

/// Picks up to `limit` evenly spaced element indices of a tensor of `n`
/// elements (all of them when `n <= limit`).
pub fn sample_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..limit).map(|i| i * n / limit + (n / limit) / 2).collect();
    idx.dedup();
    idx
}

/// Compares the gradient of a scalar function built by `f` against central
/// differences with step `h`, for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, limit: usize, f: F) -> Vec<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic_full = grads.get(*var).unwrap_or(&zero);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for e in sample_indices(inputs[i].numel(), limit) {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[e] = orig;
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push(analytic_full.data()[e]);
        }
        reports.push(GradCheck::from_pairs(format!("input{i}"), &analytic, &numeric));
    }
    reports
}
