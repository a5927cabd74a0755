pub mod conv;
pub mod deform;
pub mod dense;
pub mod dynamic;
pub mod elementwise;
pub mod loss;
pub mod pool;
pub mod resample;
pub mod shape_ops;
