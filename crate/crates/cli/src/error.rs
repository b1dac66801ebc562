use serde::Serialize;

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 1).
    Validation(String),
    /// The run itself failed (exit 2).
    Runtime(String),
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    message: &'a str,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// One-line machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        let (error, message) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        serde_json::to_string(&ErrorJson { error, message }).expect("plain strings serialize")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dlo_core::Error> for CliError {
    fn from(e: dlo_core::Error) -> Self {
        use dlo_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::DimensionMismatch { .. } | E::Parse { .. } | E::Json(_) | E::NonUnitQuaternion(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
