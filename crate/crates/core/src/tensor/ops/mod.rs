mod conv;
mod elementwise;
mod matmul;
mod norm;
mod pool;
mod reduce;
mod shape;

pub use conv::ConvGeometry;
pub use elementwise::ActivationKind;
pub use shape::concat;
