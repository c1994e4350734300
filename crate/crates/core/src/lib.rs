pub mod cli;
pub mod dispersive;
pub mod error;
pub mod fio;
pub mod lattice;
pub mod normest;
pub mod offgrid;
pub mod symbol;
