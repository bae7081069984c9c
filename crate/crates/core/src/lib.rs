//! Individualized treatment rules under demographic-parity constraints.
//!
//! Rules are fitted by outcome weighted learning with a weighted hinge
//! surrogate; fairness is imposed through linear or rank-based proxies of the
//! dependence between the decision function and the sensitive attributes,
//! and the resulting convex programs are solved in their dual form.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod kernel;
pub mod proxy;
pub mod policy;
pub mod qp;
pub mod simgen;
pub mod tuning;

pub use dataset::{fit_penalized_logistic, load_csv, CsvSchema, Dataset, PropensityModel};
pub use error::{Error, Result};
pub use exec::Exec;
pub use kernel::{KernelKind, KernelSpec, Standardizer};
pub use proxy::{ProxyKind, ProxyWeights};
