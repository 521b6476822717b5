use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Row/column shape, printed as `RxC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not symmetric: ||q - q^T||_F = {asymmetry:e} exceeds {limit:e}")]
    NotSymmetric { asymmetry: f64, limit: f64 },

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} below -{tol:e}")]
    NotPsd { eigenvalue: f64, tol: f64 },

    #[error("{}", divergence_message(*round, *client, what))]
    Divergence {
        round: Option<usize>,
        client: Option<usize>,
        what: String,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(#[from] ConfigError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn divergence_message(round: Option<usize>, client: Option<usize>, what: &str) -> String {
    let mut msg = String::from("divergence");
    if let Some(r) = round {
        msg.push_str(&format!(" at round {r}"));
    }
    if let Some(c) = client {
        msg.push_str(&format!(" on client {c}"));
    }
    msg.push_str(": ");
    msg.push_str(what);
    msg
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left: Shape(left.0, left.1),
            right: Shape(right.0, right.1),
        }
    }

    pub(crate) fn diverged(what: impl Into<String>) -> Self {
        Error::Divergence {
            round: None,
            client: None,
            what: what.into(),
        }
    }

    /// Attach round/client context to a divergence error; other errors pass through.
    pub fn in_round(self, round: usize, client: Option<usize>) -> Self {
        match self {
            Error::Divergence {
                round: r,
                client: c,
                what,
            } => Error::Divergence {
                round: r.or(Some(round)),
                client: c.or(client),
                what,
            },
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

/// Error from parsing or validating a `key = value` experiment config.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}{}", location(*line, key.as_deref()), message)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

fn location(line: Option<usize>, key: Option<&str>) -> String {
    match (line, key) {
        (Some(l), Some(k)) => format!("line {l}: `{k}`: "),
        (Some(l), None) => format!("line {l}: "),
        (None, Some(k)) => format!("`{k}`: "),
        (None, None) => String::new(),
    }
}

impl ConfigError {
    pub fn at_line(line: usize, key: Option<&str>, message: impl Into<String>) -> Self {
        ConfigError {
            line: Some(line),
            key: key.map(str::to_owned),
            message: message.into(),
        }
    }

    pub fn for_key(key: &str, message: impl Into<String>) -> Self {
        ConfigError {
            line: None,
            key: Some(key.to_owned()),
            message: message.into(),
        }
    }
}
