//! Library side of the `stdim` command: configuration, the pipeline stages,
//! report tables, manifests and the self-check suites.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod selfcheck;
pub mod table;

/// Invalid invocation or configuration; maps to exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code for an error: 1 for usage and configuration problems, 2 for
/// everything that fails while running.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use stdim_core::Error;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            if matches!(e, Error::Config(_) | Error::UnknownMethod(_)) {
                return 1;
            }
        }
    }
    2
}
