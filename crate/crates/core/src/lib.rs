//! Mixed 4/8-bit integer inference with runtime-selectable low-bit ratios.
//!
//! Feature groups of each layer can be computed either at 8 bits or by
//! extracting a 4-bit slice of the 8-bit codes. Which groups drop to 4 bits
//! is chosen offline per ratio; a channel layout puts every ratio's low
//! groups in a contiguous prefix so switching ratios at serve time is a
//! single boundary update.

pub mod bitlower;
pub mod error;
pub mod evoselect;
pub mod gemmcheck;
pub mod io;
pub mod kernels;
pub mod layout;
pub mod netsim;
pub mod par;
pub mod qtensor;
pub mod rng;
pub mod scoring;
pub mod serve;

pub use error::{Error, Result};
pub use par::Schedule;
