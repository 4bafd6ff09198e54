//! Road-to-vehicle cooperative perception.
//!
//! A roadside unit (RSU, agent 0) and `N` vehicles sense a synthetic traffic
//! scene as bird's-eye-view grids, encode them with a shared model, and fuse
//! the results over a simulated broadcast channel:
//!
//! * [`fusion`] builds a distance- and similarity-weighted collaboration graph
//!   and aggregates vehicle features plus the RSU feature;
//! * [`compensation`] adds the RSU's decoded feature back into vehicles whose
//!   decoded features correlate poorly with it;
//! * [`replay`] keeps a bounded buffer of past-scene frames at the RSU and
//!   mixes them into training on new scenes;
//! * [`channel`] serialises every exchanged message and counts its bytes.
//!
//! [`training`] assembles the pipeline with closed-form gradients and
//! [`experiment`] drives reproducible runs, sweeps and ablations.

pub mod channel;
pub mod compensation;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod replay;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor3};
