pub mod qcalc;
pub mod topo;
pub mod sim;
pub mod nn;
pub mod policy;
pub mod train;
pub mod base;
pub mod exp;
