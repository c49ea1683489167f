//! Coclosed G2-structures on the Calabi–Yau link of the Fermat quintic.
//!
//! The crate is organised bottom-up:
//!
//! * [`exterior`] — dense exterior algebra and the G2 metric reconstruction.
//! * [`quintic`] — sampling and Kähler data on the Fermat quintic.
//! * [`cymetric`] — neural correction of the Fubini–Study metric.
//! * [`link`] — lift to the S⁹ link and assembly of `(φ, ψ, g_φ)`.
//! * [`ned`] — numerical exterior derivative of black-box forms.
//! * [`regressor`] — dense regressors for `φ` and `g_φ`.
//! * [`pipeline`] — dataset files, verification and end-to-end stages.
//!
//! Data-parallel loops go through [`par`], which falls back to sequential
//! execution when the `parallel` feature is disabled or when a caller asks
//! for [`par::Execution::Serial`].

pub mod error;
pub mod checkpoint;
pub mod cymetric;
pub mod exterior;
pub mod link;
pub mod ned;
pub mod nn;
pub mod par;
pub mod quintic;
pub mod pipeline;
pub mod regressor;
pub mod rng;

pub use error::{Error, Result};
