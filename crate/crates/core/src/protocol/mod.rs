//! PVSS-BFT view protocol: messages, node state machine and helpers.

pub mod messages;
pub mod node;

pub use messages::*;
pub use node::*;
