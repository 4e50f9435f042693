//! Inverse fast multipole method: an approximate direct solver and
//! preconditioner for dense kernel matrices stored in H² form.

pub mod cli;
pub mod dense;
pub mod factor;
pub mod h2build;
pub mod kernel;
pub mod krylov;
pub mod lowrank;
pub mod refcheck;
pub mod tree;
