pub mod artifact;
pub mod compiler;
pub mod costmodel;
pub mod frontend;
pub mod inference;
pub mod model;
pub mod mpu;
pub mod pipeline;
pub mod quantizer;
pub mod static_table;
pub mod verify;
