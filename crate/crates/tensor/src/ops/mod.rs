mod conv;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod reduce;
mod shape;

pub use norm::BatchStats;
pub use reduce::softmax_tensor;
pub(crate) use elementwise::sigmoid;
