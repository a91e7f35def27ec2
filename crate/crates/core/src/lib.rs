pub mod linalg;
pub mod data;
pub mod rap;
pub mod model;
pub mod train;
pub mod adapt;
pub mod mdm;
pub mod eval;
pub mod stream;
pub mod cli;
