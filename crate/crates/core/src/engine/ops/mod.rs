pub mod conv;
pub mod filter;
pub mod norm;
pub mod pointwise;
pub mod shape;
pub mod warp;

pub use conv::Conv2dGeometry;
pub use norm::BatchMoments;
