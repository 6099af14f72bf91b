//! Analytical cost model for FPGA CNN accelerators built from multiple
//! compute engines (CEs).
//!
//! The usual flow is: load a CNN and a board, parse an accelerator sketch,
//! [`builder::build`] it and [`composer::compose`] the result into an
//! [`composer::EvalReport`].
//!
//! ```
//! use std::sync::Arc;
//! use mccm::{bundled, notation, composer};
//!
//! let cnn = Arc::new(bundled::cnn("resnet50").unwrap());
//! let board = bundled::platform("zc706").unwrap();
//! let sketch = notation::parse_accelerator("{L1-Last: CE1-CE2}", &cnn).unwrap();
//! let report = composer::evaluate(&sketch, cnn, &board).unwrap();
//! assert!(report.buffer_bytes <= board.on_chip_bytes);
//! ```

pub mod analysis;
pub mod blocks;
pub mod builder;
pub mod composer;
pub mod descriptors;
pub mod dse;
pub mod error;
pub mod notation;
pub mod report;
pub mod sim;

pub use descriptors::bundled;
pub use error::{Error, Result};
