//! B-spline bases and Kolmogorov–Arnold layers.
//!
//! Each edge carries `φ(x) = w_b·SiLU(x) + w_s·Σ_j ω_j·B_j(x)`; a layer sums
//! its incoming edges per output node and a network composes layers. The
//! spline branch (`w_s`, `ω`) can be owned by the layer or injected per call.

mod grid;
mod layer;
mod ops;

pub use grid::SplineGrid;
pub use layer::{squash_to_grid, InjectedLayer, KanInit, KanLayer, KanNetwork, SplineParams};
pub use ops::{basis_eval, edge_activation, kan_layer};
