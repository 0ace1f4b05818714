//! Power-grid fault localization and dynamic state estimation toolkit.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`grid`] — network topology, admittances, and the matrices derived from them
//! - [`swingsim`] — swing-equation integration and dataset synthesis
//! - [`autodiff`] — reverse-mode automatic differentiation over dense arrays
//! - [`models`] — the model zoo, from linear regression to swing-structured neural ODEs
//! - [`train`] — losses, Adam, training loops, and evaluation metrics
//! - [`placement`] — two-stage sensor-placement search with a learned accuracy predictor

pub mod autodiff;
pub mod grid;
pub mod matrix;
pub mod models;
pub mod placement;
pub mod swingsim;
pub mod train;

pub use grid::{GridError, GridNetwork, ObservedSet};
pub use swingsim::{GridState, Trajectory};
