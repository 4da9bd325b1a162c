//! Continuous relaxation of the two-level space.
//!
//! Cell edges mix all eight operators with softmax weights α shared by every
//! cell; trellis nodes mix incoming cell outputs with the outgoing-move
//! probabilities β of their sources. [`DiscreteNet`] is the single-path,
//! single-operator network that the relaxation collapses to when α and β
//! are one-hot.

mod arch;
mod check;
mod discrete;
mod layers;
mod supernet;

pub use arch::{
    alpha_entropy, alpha_group, beta_entropy, beta_flat_index, entropy, normalize_alpha,
    normalize_beta, num_alpha_groups, source_feasible, AlphaLogits, AlphaProbs, ArchSnapshot,
    BetaLogits, BetaMask, BetaProbs,
};
pub use check::supernet_gradient_check;
pub use discrete::DiscreteNet;
pub use layers::{atrous_rate, EdgeWeights, Fwd, NormMode};
pub use supernet::{
    cell_forward, mixed_operator, MixedCell, NetConfig, SuperNet, SuperNetOutput, ARCH_INIT_SCALE,
};
