use thiserror::Error;

use crate::object::Guid;
use crate::task::TaskError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown object {0}")]
    UnknownObject(Guid),

    #[error("protocol error at byte {offset}: {reason}")]
    Protocol { offset: usize, reason: String },

    #[error("illegal state: {0}")]
    IllegalState(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("message body of {0} bytes exceeds the frame limit")]
    OversizeMessage(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("remote failure: {0}")]
    RemoteFailure(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("connection closed")]
    Disconnected,

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error(transparent)]
    Task(#[from] TaskError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn protocol(offset: usize, reason: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            reason: reason.into(),
        }
    }
}
