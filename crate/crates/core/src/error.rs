use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    ShapeMismatch(String),
    NonIntegralOutputExtent(String),
    CountMismatch { from: Vec<usize>, to: Vec<usize> },
    InvalidPermutation(Vec<usize>),
    AxisOutOfBounds { axis: usize, rank: usize },
    NotScalar(Vec<usize>),
    DetachedFromTape,
    BadInputExtent { h: usize, w: usize },
    OddGrid { h: usize, w: usize },
    OddChannels(usize),
    InvalidConfig(String),
    MissingGradient(String),
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    Io(std::io::Error),
    Format(String),
    MissingMask(PathBuf),
    MalformedPnm(String),
    ExtentMismatch(String),
    InvalidSpec(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonIntegralOutputExtent(msg) => write!(f, "non-integral output extent: {msg}"),
            Error::CountMismatch { from, to } => {
                write!(f, "cannot reshape {from:?} into {to:?}: element counts differ")
            }
            Error::InvalidPermutation(order) => write!(f, "invalid axis permutation {order:?}"),
            Error::AxisOutOfBounds { axis, rank } => {
                write!(f, "axis {axis} out of bounds for rank {rank}")
            }
            Error::NotScalar(shape) => write!(f, "expected a scalar, got shape {shape:?}"),
            Error::DetachedFromTape => write!(f, "value does not participate in the gradient tape"),
            Error::BadInputExtent { h, w } => {
                write!(f, "input extent {h}x{w} is not divisible by 32")
            }
            Error::OddGrid { h, w } => write!(f, "token grid {h}x{w} has an odd extent"),
            Error::OddChannels(c) => write!(f, "channel count {c} is odd"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::MissingGradient(name) => write!(f, "no gradient for parameter `{name}`"),
            Error::NonFiniteLoss { epoch, step, loss } => {
                write!(f, "non-finite loss {loss} at epoch {epoch}, step {step}")
            }
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::MissingMask(path) => write!(f, "missing mask file {}", path.display()),
            Error::MalformedPnm(msg) => write!(f, "malformed netpbm file: {msg}"),
            Error::ExtentMismatch(msg) => write!(f, "extent mismatch: {msg}"),
            Error::InvalidSpec(msg) => write!(f, "invalid synthetic spec: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
