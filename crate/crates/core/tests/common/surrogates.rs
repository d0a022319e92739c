//! Small models with known attributions.

use mtv_autograd::{Graph, Tensor, Var};
use mtvnet::analysis::Attributable;
use mtvnet::error::Result;

/// `F = w * x` voxelwise on a single context.
pub struct Linear {
    pub edge: usize,
    pub w: Tensor,
}

impl Attributable for Linear {
    fn context_extents(&self) -> Vec<usize> {
        vec![self.edge]
    }
    fn scale(&self) -> usize {
        1
    }
    fn build(&self, g: &mut Graph, contexts: &[Var]) -> Result<Var> {
        let w = g.constant(self.w.clone());
        Ok(g.mul(contexts[0], w))
    }
}

/// Smooth nonlinear surrogate: `gelu(w * x)`.
pub struct Smooth(pub Linear);

impl Attributable for Smooth {
    fn context_extents(&self) -> Vec<usize> {
        self.0.context_extents()
    }
    fn scale(&self) -> usize {
        1
    }
    fn build(&self, g: &mut Graph, contexts: &[Var]) -> Result<Var> {
        let y = self.0.build(g, contexts)?;
        Ok(g.gelu(y))
    }
}

/// Ignores its input entirely.
pub struct Constant {
    pub edge: usize,
}

impl Attributable for Constant {
    fn context_extents(&self) -> Vec<usize> {
        vec![self.edge]
    }
    fn scale(&self) -> usize {
        2
    }
    fn build(&self, g: &mut Graph, _: &[Var]) -> Result<Var> {
        let e = 2 * self.edge;
        Ok(g.constant(Tensor::full(&[1, 1, e, e, e], 0.7)))
    }
}

/// Returns the inner context unchanged.
pub struct IdentityCrop {
    pub outer: usize,
    pub inner: usize,
}

impl Attributable for IdentityCrop {
    fn context_extents(&self) -> Vec<usize> {
        vec![self.outer, self.inner]
    }
    fn scale(&self) -> usize {
        1
    }
    fn build(&self, _: &mut Graph, contexts: &[Var]) -> Result<Var> {
        Ok(contexts[1])
    }
}
