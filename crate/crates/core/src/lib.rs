pub mod batch;
pub mod bench;
pub mod bytecode;
pub mod coverage;
pub mod fuzz;
pub mod guest;
pub mod net;
pub mod paged;
pub mod seed_import;
pub mod util;
pub mod wire;
