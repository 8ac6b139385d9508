use thiserror::Error;

use crate::model::QueueState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("server index {index} out of range for {n} servers")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("state {0} has the wrong dimension or lies outside the grid")]
    OutsideGrid(QueueState),

    #[error("state {0} is diagonal; the constraint is defined only off the diagonal")]
    DiagonalState(QueueState),

    #[error("state {0} touches the truncation boundary; a successor would be clamped")]
    BoundaryState(QueueState),

    #[error("no states left to audit on the grid")]
    EmptyAudit,

    #[error("malformed matrix game: {0}")]
    MalformedGame(String),

    #[error("strategy is not defined at state {0}")]
    UndefinedStrategy(QueueState),

    #[error("configuration error: {0}")]
    Config(String),
}
