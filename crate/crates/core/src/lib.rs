pub mod codec;
pub mod fabric;
pub mod gateway;
pub mod gossip;
pub mod hash;
pub mod model;
pub mod names;
pub mod node;
pub mod service_table;
pub mod switch;
pub mod trap;
pub mod simharness;
