pub mod crypto;
pub mod device;
pub mod server;
pub mod time;
pub mod wire;
pub mod simnet;
pub mod attack;
pub mod scenario;
