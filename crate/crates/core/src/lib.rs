pub mod geometry;
pub mod hlm;
pub mod pipeline;
pub mod policy;
pub mod seed;
pub mod sim;
pub mod synthesis;
pub mod verify;
