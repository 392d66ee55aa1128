//! Demand-driven navigation lab.
//!
//! A procedural room simulator, a synthetic demand/object semantic universe,
//! a demand-conditioned contrastive attribute encoder, an A* expert with
//! behavior cloning, a grounding classifier, and the evaluation harness.

pub mod agents;
pub mod attribute;
pub mod config;
pub mod demands;
pub mod error;
pub mod eval;
pub mod expert;
pub mod grounding;
pub mod ids;
pub mod metrics;
pub mod perception;
pub mod policy;
pub mod util;
pub mod world;

pub use error::{DdnError, Result};
pub use ids::{CategoryId, DemandId, InstanceId, PrototypeId, SceneId};
