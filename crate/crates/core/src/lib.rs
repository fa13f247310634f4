pub mod client;
pub mod diffsync;
pub mod document;
pub mod engine;
pub mod lock;
pub mod service;
pub mod sim;
pub mod store;
pub mod task;
pub mod text;
