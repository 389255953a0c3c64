pub mod frontend;
pub mod absint;
pub mod active_threads;
pub mod lockset;
pub mod mem_access;
pub mod thread_system;
pub mod race_detect;
pub mod oracle;
pub mod cli;
