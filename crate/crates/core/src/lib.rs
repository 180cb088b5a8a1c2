pub mod cem;
pub mod cli;
pub mod context;
pub mod error;
pub mod fest;
pub mod fraction;
pub mod interop;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod prgn;
pub mod render;
pub mod sensitivity;

pub use error::{Error, Result};
