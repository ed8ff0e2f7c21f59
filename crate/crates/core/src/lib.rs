//! Phase estimation for coherent errors on small stabilizer code states.
//!
//! The crate simulates ±1 readouts of stabilizer combinations on a code state
//! carrying unknown relative phases, and compares Bayesian adaptive and
//! scan-based estimators of those phases by Monte Carlo.
//!
//! ```
//! use stabphase::{build_model, ModelKind};
//!
//! let model = build_model(ModelKind::TwoPlaquette).unwrap();
//! let angles = model.solve_angles(&[0.3, -1.0, 2.0]).unwrap();
//! let t = model.theta_tilde(0, &angles).unwrap();
//! assert!((t.value() - 0.3).abs() < 1e-10);
//! ```

pub mod analysis;
pub mod cli;
pub mod error;
pub mod models;
pub mod phase;
pub mod estimators;
pub mod sim;

pub use error::{Error, Result};
pub use models::{build_model, ModelKind, ModelSpec, Outcome, StatevectorOracle};
pub use phase::{bayes_update, circ_diff, wrap, BayesGrid, CircularMoments, PosteriorGrid1D, PosteriorGrid2D, WrappedPhase};
pub use sim::{spawn_rng, HiddenTruth, Lab, RngStream, SamplingMode};
