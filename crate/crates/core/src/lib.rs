//! High-order finite elements for nonlinear elastodynamics with simultaneously
//! diagonalized minimum-energy (SDME) expansion bases.

pub mod basis1d;
pub mod config;
pub mod contact;
pub mod densela;
pub mod dynamics;
pub mod femcore;
pub mod quadrature;
pub mod scenario;
pub mod solver;
pub mod material;
pub mod meshdof;
pub mod tensorelem;
pub mod vtk;
