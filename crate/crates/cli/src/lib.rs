//! Configuration-driven experiment runner for robust weighted FOSLS training.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::*;
pub use config::{Overrides, RunConfig};
pub use error::CliError;

/// Sizes the global thread pool from `FOSLS_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("FOSLS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("FOSLS_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(CliError::Config("FOSLS_THREADS must be positive".into()));
        }
        // a pool built earlier in the process wins; that is fine for tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
