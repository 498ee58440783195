mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use nn::IGNORE_INDEX;
