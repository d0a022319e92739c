mod attention;
mod conv;
mod elementwise;
mod linear;
mod shape;

pub use attention::{softmax_in_place, AttentionSpec, PairMask};
pub use shape::{gather_tensor, GATHER_ZERO};
