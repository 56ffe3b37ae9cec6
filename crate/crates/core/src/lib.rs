//! Learning symmetric, low-energy locomotion controllers for articulated
//! characters.
//!
//! The crate is organised bottom-up:
//!
//! - [`charmodel`]: character descriptions and their left/right mirror maps.
//! - [`dynamics`]: reduced-coordinate rigid-body simulation with ground contact.
//! - [`assistant`]: the pelvis assist controller and its milestone schedule.
//! - [`env`]: the locomotion MDP (observations, reward, termination).
//! - [`policy`]: Gaussian MLP policy and value network with exact gradients.
//! - [`learner`]: PPO with GAE and the mirror symmetry loss.
//! - [`curriculum`]: learner-centered and environment-centered schedulers.
//! - [`metrics`]: symmetry index, actuation and trajectory export.
//! - [`config`]: training configuration and named presets.

pub mod assistant;
pub mod charmodel;
pub mod config;
pub mod curriculum;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod policy;

pub use error::{Error, Result};
