pub mod conv;
pub mod direct;
pub mod ftz;
pub mod pool;

pub use conv::ConvGeom;
