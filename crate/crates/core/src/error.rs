use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem: tensor/parameter shapes do not line up.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },
    /// Input violates a documented precondition.
    #[error("{0}")]
    Validation(String),
    /// A computation produced non-finite values.
    #[error("numeric failure in {context}{}", match .grad_norm { Some(n) => format!(" (gradient norm {n})"), None => String::new() })]
    Numeric {
        context: String,
        grad_norm: Option<f64>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
