use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. `node` is the graph index the
    /// offending operation would have occupied, when recorded on a graph.
    #[error("shape mismatch in `{op}`{}: {detail}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Shape {
        op: &'static str,
        node: Option<usize>,
        detail: String,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{name}` = {value} is out of range: {reason}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            node: None,
            detail: detail.into(),
        }
    }

    pub(crate) fn at_node(self, index: usize) -> Self {
        match self {
            Error::Shape { op, detail, .. } => Error::Shape {
                op,
                node: Some(index),
                detail,
            },
            other => other,
        }
    }
}

/// Checks that `value` lies in `[lo, hi]`.
pub(crate) fn check_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            reason: if value.is_finite() {
                "outside the allowed interval"
            } else {
                "not finite"
            },
        })
    }
}
