//! Privacy-preserving taxi-demand prediction with similarity-clustered
//! decentralized federated learning, on synthetic data.
//!
//! Pipeline: trips are binned into hexagonal cells and time slots
//! ([`hexgrid`]), turned into per-client demand samples ([`synthdata`]),
//! encoded by a contrastively pretrained network ([`contrastive`],
//! [`tensornet`]) that is federated only among similar clients
//! ([`fedsim`]), and classified by a per-client cost-sensitive head. The
//! [`privacy`] and [`attack`] modules provide the baselines and the
//! membership-inference evaluation; [`harness`] ties it together.

pub mod attack;
pub mod contrastive;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod hexgrid;
pub mod privacy;
pub mod rng;
pub mod synthdata;
pub mod tensornet;

pub use error::{Error, Result};
