//! Simulation and homogenization toolkit for Langevin dynamics with
//! position-dependent friction.

pub mod model;
pub mod noise;
pub mod integrate;
pub mod diagnose;
pub mod gendiff1d;
pub mod homogenize;
pub mod stats;
