//! Hand-rolled numerical core: flat parameter storage, a fixed MLP with
//! analytic backprop, Adam, and a finite-difference gradient checker.
//!
//! There is deliberately no autodiff graph here. The layer set is small
//! enough (linear, SiLU/Tanh, concatenation, sinusoidal timestep features)
//! that writing the backward passes by hand keeps gradient provenance
//! auditable, and the checker in [`gradcheck`] holds them to 1e-5.

mod adam;
mod gradcheck;
mod mlp;
mod params;

pub use adam::{adam_step, AdamState};
pub use gradcheck::grad_check;
pub use mlp::{timestep_embedding, Activation, MlpCache, MlpNet, MlpStack, StackCache};
pub use params::{checksum, Layout, LayoutBuilder, ParamVector, TensorDesc};
