//! Self-supervised speech representation learning at desk scale: masked
//! prediction over discovered units, iterative pseudo-label refinement, an
//! online quantizer baseline, and correlation-based representation probes.

pub mod cca;
pub mod clustering;
pub mod encoder;
pub mod error;
pub mod features;
pub mod numcore;
pub mod objectives;
pub mod pipeline;
pub mod quantizer;
pub mod synthcorpus;

pub use error::{Error, Result};
