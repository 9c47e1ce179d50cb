use handgf_core::eval::EvalError;
use handgf_core::graspdata::DataError;
use handgf_core::hand::EnvError;
use handgf_core::nn::NnError;
use handgf_core::rl::RlError;
use handgf_core::trajgen::TrajError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite(_) => CliError::Numeric(e.to_string()),
            NnError::Io(io) => CliError::Io(io),
            NnError::Spec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::NonFiniteAction => CliError::Numeric(e.to_string()),
            EnvError::Io(io) => CliError::Io(io),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrajError> for CliError {
    fn from(e: TrajError) -> Self {
        match e {
            TrajError::Io(io) => CliError::Io(io),
            TrajError::TooFewPatterns(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io(io),
            DataError::Env(env) => env.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Config(m) => CliError::Config(m),
            RlError::NonFinite(_) => CliError::Numeric(e.to_string()),
            RlError::Parse { .. } => CliError::Data(e.to_string()),
            RlError::Nn(n) => n.into(),
            RlError::Env(n) => n.into(),
            RlError::Traj(n) => n.into(),
            RlError::Io(io) => CliError::Io(io),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::Config(m),
            EvalError::UnevenTargets { .. } => CliError::Data(e.to_string()),
            EvalError::Rl(r) => r.into(),
            EvalError::Io(io) => CliError::Io(io),
        }
    }
}
