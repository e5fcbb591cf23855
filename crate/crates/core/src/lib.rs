pub mod agent;
pub mod api;
pub mod builtin;
pub mod bundle;
pub mod bus;
pub mod clock;
pub mod collector;
pub mod harness;
pub mod external;
pub mod lifecycle;
pub mod model;
pub mod publisher;
