//! Online handwritten stroke classification over reference point/feature pairs.

pub mod data_io;
pub mod heads;
pub mod hierarchy;
pub mod ink;
pub mod isa;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ref_select;
pub mod runner;
pub mod spatial;
pub mod svg;
pub mod tensor;
