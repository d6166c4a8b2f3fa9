//! GeoMaNO: a neural operator built on geometrically corrected selective
//! state-space scans over regular grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod container;
pub mod cross_scan;
pub mod darcy;
pub mod discretize;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod scan;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{FieldGrid, Tensor};
