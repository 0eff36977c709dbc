//! Age-of-information scheduling for multi-device status-update systems.
//!
//! The crate builds the exact Markov decision process of `K` devices that
//! send multi-packet status updates over unreliable channels, at most `M` at a
//! time, and solves it three ways:
//!
//! * [`exact`]: relative value iteration on the joint state space, with policy
//!   extraction, threshold maps and structural checks;
//! * [`decomp`]: per-device value functions under a randomized base policy,
//!   combined into a one-step improved policy that scales linearly in `K`;
//! * [`oracle`]: brute-force policy enumeration for tiny instances.
//!
//! [`sim`] evaluates any policy by seeded Monte Carlo and [`experiment`]
//! drives the `aoi-sched` command-line tool.

pub mod decomp;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod export;
pub mod fleet;
pub mod markov;
pub mod model;
pub mod oracle;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    DeviceAction, DeviceModel, DeviceParams, DeviceState, ModelVariant, SystemAction, SystemConfig, SystemModel,
    SystemState, TransitionDistribution,
};

/// Two J-values closer than this are treated as tied; the earlier action in
/// canonical order wins.
pub const TIE_EPS: f64 = 1e-9;
