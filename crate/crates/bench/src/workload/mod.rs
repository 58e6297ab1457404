pub mod blocking;
pub mod conn_setup;
pub mod echo;
pub mod isolation;
pub mod transfer;
