pub use mesm;
