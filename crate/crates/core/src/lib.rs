pub mod atomic;
pub mod crosstalk;
pub mod detection;
pub mod holography;
pub mod analysis;
pub mod lindblad;
pub mod protocols;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
