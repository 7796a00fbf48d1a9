//! Unified single-image representation of abstract visual reasoning (AVR)
//! matrices and the UMAVR solver.
//!
//! The crate is organised bottom-up:
//!
//! * [`instance`] and [`dataset`]: the disjoint panel-level data model and its
//!   on-disk container.
//! * [`render`]: composites an instance into one grayscale canvas.
//! * [`synthgen`]: a procedural, rule-annotated matrix generator.
//! * [`net`]: the UMAVR network with hand-written backward passes.
//! * [`train`]: losses, Adam, schedules and the single-task, transfer and
//!   curriculum drivers.
//! * [`eval`]: accuracy reports and embedding export.

pub mod dataset;
pub mod eval;
pub mod instance;
pub mod net;
pub mod render;
pub mod synthgen;
pub mod train;

mod seed;

pub use seed::derive_seed;
