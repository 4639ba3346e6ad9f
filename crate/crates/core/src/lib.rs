//! Proportionally fair bandwidth-sharing networks with phase-type job sizes.
//!
//! The crate is organised bottom-up:
//!
//! * [`phase`] and [`network`] hold the static model: phase-type job-size
//!   laws, the link-route matrix, capacities and all derived loads.
//! * [`alloc`] solves the proportional-fairness utility maximisation and
//!   its boundary extension.
//! * [`fluid`] integrates the critical fluid model and evaluates its
//!   entropy-like Lyapunov function.
//! * [`manifold`] builds the invariant-manifold geometry and the discrete
//!   Skorokhod (dynamic complementarity) solver.
//! * [`sim`] is an event-driven simulator of the phase-level Markov chain.
//! * [`diffusion`] computes the heavy-traffic limit parameters, checks the
//!   product-form condition and compares the product-form approximation
//!   against simulation.

// `!(x > 0.0)` is used on purpose so that NaN fails input checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod diffusion;
pub mod error;
pub mod fluid;
pub mod linalg;
pub mod manifold;
pub mod network;
pub mod phase;
pub mod sim;
pub mod stats;

pub use alloc::{extend_phi, phase_split, solve_pf, verify_kkt, Allocation, KktReport, PfOptions, PhiExtension};
pub use diffusion::{
    approx_steady_state, check_product_form, covariance_free_process, product_form_rates,
    reflection_matrix, simulate_srbm, validate_heavy_traffic, DiffusionParams, HtReport, HtOptions,
    ProductFormApprox, SrbmOptions,
};
pub use error::{Error, Result};
pub use fluid::{integrate_fluid, lyapunov, lyapunov_derivative_bound, rearrangement_bound, FluidConfig, FluidTrajectory};
pub use manifold::{ManifoldGeometry, WorkloadDecomposition};
pub use network::{validate_network, ClassSystem, Network, NetworkSpec, StateVector, ValidationReport};
pub use phase::PhaseTypeDist;
pub use sim::{build_ht_instance, scaled_paths, simulate, SimConfig, SimResult};

pub use nalgebra::{DMatrix, DVector};
