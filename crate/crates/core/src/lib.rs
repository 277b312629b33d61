//! Stochastic bidomain equations on rectangles: the nonlocal bidomain
//! operator, ionic models with condition certificates, Q-Wiener noise,
//! a spectral integrator and Monte-Carlo checks of the small-noise,
//! tail, stationary and time-average estimates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the mode-by-mode formulas.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod ionic;
pub mod mesh;
pub mod noise;
pub mod operator;
pub mod sim;

pub use error::{Error, Result};
pub use experiments::{
    invariant_support, mc_estimate, small_noise_deviation, stationary_coupling, tail_probability, Estimate,
    ExperimentReport, McConfig, SimInputs, StationarySettings, Verdict,
};
pub use ionic::{check_model, ConditionReport, IonicModel, SampleBox};
pub use mesh::{inner_product_h, make_grid, mean_zero_project, norm_l4, norm_v_sq, Field, Grid};
pub use noise::{check_summability, make_spectrum, DecayRule, NoiseSpectrum, SummabilityReport};
pub use operator::{
    assemble_elliptic, bilinear_form, build_operator, compose_bidomain, estimate_constants, semigroup_apply,
    BidomainOperator, Conductivity, ConductivitySpec, EllipticOperator, OperatorConstants,
};
pub use sim::{
    simulate, simulate_coupled, simulate_transformed, EnergyLedger, LedgerRow, Scheme, SimConfig, Source, State,
    TrajectoryRecord,
};
