use std::fmt;

use capkernel::harness::HarnessError;
use capkernel::io::ContainerError;
use capkernel::kernel::KernelError;
use capkernel::regression::RegressionError;
use capkernel::tasks::TaskError;
use serde_json::json;

/// Failure of a command, carrying its exit-code class.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: unreadable or invalid configuration.
    Config(String),
    /// Exit 3: the task generator could not produce an instance.
    Generator(String),
    /// Exit 4: a numerical routine failed.
    Numerical(String),
    /// Exit 1: a dataset failed re-verification.
    Verify { line: usize, message: String },
    /// Exit 1: filesystem trouble.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Generator(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Verify { .. } | CliError::Io(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Generator(_) => "generator",
            CliError::Numerical(_) => "numerical",
            CliError::Verify { .. } => "verification",
            CliError::Io(_) => "io",
        }
    }

    /// One-line machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Verify { line, .. } = self {
            v["line"] = json!(line);
        }
        v.to_string()
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Generator(m) | CliError::Numerical(m) | CliError::Io(m) => f.write_str(m),
            CliError::Verify { line, message } => write!(f, "line {line}: {message}"),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        CliError::Generator(e.to_string())
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<RegressionError> for CliError {
    fn from(e: RegressionError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Checkpoint(_) => CliError::Config(e.to_string()),
            HarnessError::Task(t) => t.into(),
            HarnessError::Regression(r) => r.into(),
            HarnessError::Kernel(k) => k.into(),
            HarnessError::TooFewPoints(_) | HarnessError::TooFewReps(_) => CliError::Numerical(e.to_string()),
        }
    }
}
