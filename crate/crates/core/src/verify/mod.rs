//! Numerical verification: finite-difference gradient checks and the test of
//! when online (detached-denominator) crafting moves each pixel the same way
//! as joint crafting.
//!
//! For a crafting state with summed gradient `G`, target `T` and a pixel of
//! sample `j`, the joint objective `1 - cos(T, G)` has pixel derivative
//! `-(beta - gamma)` while the detached objective has `-beta`, where
//! `beta = d<T, g_j> / (|T||G|)` and `gamma = cos(T, G) d|G| / |G|`. Signed
//! updates agree whenever `|gamma| < |beta|`, which follows from
//! `|d|G|| < |d<T/|T|, g_j>|`. All pixel derivatives here are central
//! differences at 64-bit, independent of the second-order path in `nn`.

pub mod construct;
mod fd;
mod proposition;

pub use fd::{check_input_gradient, finite_diff_check, relative_error, CheckObjective, InputField, Precision, ScalarField};
pub use proposition::{
    exhaustive_probes, proposition_check, random_probes, sign, verify_crafting_run, verify_state, OrganicProbing,
    PixelRecord, PropositionProbe, PropositionReport, PropositionSummary, Tally, TrajectoryTally, DEFAULT_STEP,
    GAMMA_SLACK, SIGN_ZERO,
};

#[cfg(test)]
mod tests;
