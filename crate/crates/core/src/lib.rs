//! Poisoning toolkit for secure dataset release.
//!
//! Crafts small `l_inf`-bounded perturbations of an image training set so that
//! networks trained from scratch on the released data generalize poorly. The
//! perturbations are optimized to align the training gradient of the perturbed
//! data with the gradient of a reverse cross-entropy loss on the clean data.
//!
//! Modules, bottom up:
//! - [`data`]: datasets, subsets, perturbation application and persistence.
//! - [`nn`]: desk-scale classifiers with first- and second-order gradients.
//! - [`objectives`]: losses, alignment objectives, baselines and regularizers.
//! - [`crafting`]: the restart/augment/signed-Adam/project crafting loop.
//! - [`victim`]: from-scratch training, defenses and evaluation.
//! - [`verify`]: finite-difference checks and the online-equivalence verifier.
//! - [`pipeline`]: config-driven experiment stages behind the `poisoncraft` binary.

pub mod crafting;
pub mod data;
pub mod error;
pub mod hash;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod real;
pub mod verify;
pub mod victim;

pub use error::{Error, Result};
