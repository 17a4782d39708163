//! Differentiable operations on [`Var`](crate::Var).

mod attention;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use attention::attention;
pub use conv::ConvGeom;
pub use elementwise::{sigmoid, sum_all};
pub use shape::{concat_rows, mean_of};

#[cfg(test)]
mod gradcheck;
