//! Differentiable max-product belief propagation on 4-connected pixel grids.
//!
//! The crate provides sweep BP (horizontal then vertical dynamic programming
//! with a softmax readout) together with its exact backward pass, SGM, the
//! dual methods TRW-T and TBCA, marginal losses and a plain gradient-descent
//! trainer, a coarse-to-fine pyramid, census-based stereo/flow unaries, and
//! brute-force oracles used to validate all of the above.

pub mod chain_dp;
pub mod error;
pub mod grid_model;
pub mod inference;
pub mod io;
pub mod learning;
pub mod matching;
pub mod oracle;
pub mod pipeline;
pub mod pyramid;
pub mod suites;
pub mod synth;

pub use error::{Error, Result};
pub use grid_model::{
    apply_temperature, eval_pairwise, weights_from_edges, weights_from_image, ArgmaxRecord, BeliefVolume, CompatMatrix,
    Direction, GradBundle, GridShape, JumpParams, MessageField, PairwiseGrad, PairwiseSpec, Plane, Temperature,
    UnaryVolume, Volume,
};
pub use inference::{read_beliefs, sgm, sweep_bp_backward, sweep_bp_forward, tbca, trw_t, wta};
