//! File formats, checkpoints, manifests and the command-line front end
//! around `styledial-core`.

pub mod checkpoint;
pub mod commands;
pub mod formats;
pub mod manifest;
pub mod pca;

pub use commands::{run, Cli, Command};

/// Process exit code for a failed command: 2 for numeric failures, 1 for
/// everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<styledial_core::Error>())
        .any(styledial_core::Error::is_numeric);
    if numeric {
        2
    } else {
        1
    }
}
