//! Learned Lagrange-decomposition dual solver for 0-1 integer linear programs.

pub mod bdd;
pub mod check;
pub mod dual;
pub mod grad;
pub mod model;
pub mod net;
pub mod train;
