//! Onion-peel video completion.
//!
//! A target frame with a hole is filled one boundary layer ("peel") at a
//! time. Each recursion encodes the target into key/value maps, matches the
//! keys of the peel pixels against the keys of every valid pixel of a set of
//! reference frames, adds the retrieved values onto the peel positions and
//! decodes the result; only the peel pixels of the decoded frame are kept.

pub mod attention;
pub mod cli;
pub mod driver;
pub mod error;
pub mod frame;
pub mod gradsuite;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Element, Tensor};
