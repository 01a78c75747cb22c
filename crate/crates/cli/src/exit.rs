use std::fmt;
use std::io;

/// Error carrying the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_MISSING: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

impl ExitError {
    /// A required file or directory is absent or unreadable.
    pub fn missing(message: impl Into<String>) -> Self {
        ExitError {
            code: EXIT_MISSING,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        ExitError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for ExitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExitError {}

/// Exit code for an error chain: explicit [`ExitError`]s first, then
/// missing files and configuration errors from the engine.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ExitError>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<spikesparse::Error>() {
            match e {
                spikesparse::Error::Config(_) | spikesparse::Error::Architecture { .. } => {
                    return EXIT_CONFIG
                }
                spikesparse::Error::Io(io) if io.kind() == io::ErrorKind::NotFound => {
                    return EXIT_MISSING
                }
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<io::Error>() {
            if e.kind() == io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    EXIT_FAILURE
}
