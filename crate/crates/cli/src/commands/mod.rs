pub mod bench;
pub mod features;
pub mod route;
pub mod simulate;
pub mod train;
