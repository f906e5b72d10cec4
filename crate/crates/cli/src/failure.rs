//! Command failures and their exit codes.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(prefcore::Error),
    Io(String, std::io::Error),
}

impl Failure {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Io(path.display().to_string(), e)
    }

    /// 1 usage, 2 data or format, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_numerical() => 3,
            Failure::Core(_) | Failure::Io(..) => 2,
        }
    }
}

impl From<prefcore::Error> for Failure {
    fn from(e: prefcore::Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Io(p, e) => write!(f, "{p}: {e}"),
        }
    }
}

/// Writes to stdout. A closed pipe (e.g. `| head`) is not an error.
pub fn emit(text: &str) -> Result<(), Failure> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Failure::Io("stdout".into(), e)),
        _ => Ok(()),
    }
}
