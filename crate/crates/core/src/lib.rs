pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod generator;
pub mod kernel;
pub mod nets;
pub mod projection;
pub mod simulate;
pub mod training;

pub use error::{Error, Result};
pub use autodiff::ScalarField;
pub use dynamics::{make_system, Controller, SafeRegionSpec, SdeModel, System, SystemOptions, SYSTEM_NAMES};
pub use generator::TraceMode;
pub use nets::{ClassKNet, ControllerNet, ModelDoc, PotentialNet};
pub use projection::{compose_safe_stable, ClassK, Diagnostics, ProjectedController};
pub use training::{train, Models, TrainConfig};
