//! Batch front end of the registration engine: `register`, `transform`,
//! `evaluate` and `phantom`, each writing plain files into a directory.

pub mod config;
pub mod evaluate;
pub mod phantom;
pub mod register;
pub mod run;
pub mod transform;

/// Cap the global rayon pool. One thread gives bit-reproducible runs.
pub fn set_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            anyhow::bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
