//! Raw forward/backward kernels shared by the eager and taped executors.

pub mod conv;
pub mod pool;
pub mod resample;
pub mod volume;

pub use conv::{Conv3dGeometry, Padding};
pub use pool::{PoolGeometry, Rounding};
pub use volume::HexVolume;
