//! Closed-form bridge diffusions on piecewise-constant linear-quadratic
//! protocols with Gaussian-mixture endpoints.
//!
//! The pipeline is: build a [`protocol::Protocol`], run the backward and
//! forward coefficient sweeps ([`riccati::run_sweep`]), wrap them with a
//! target mixture in a [`bridge::BridgeContext`], then query scores,
//! marginals and look-up maps, simulate trajectories ([`sampler`]) or
//! optimise the protocol against a corridor objective ([`objective`]).

pub mod bridge;
pub mod config;
pub mod experiment;
pub mod linalg;
pub mod objective;
pub mod oracle;
pub mod output;
pub mod protocol;
pub mod riccati;
pub mod sampler;
pub mod shift;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("interval {interval}: {source}")]
    AtInterval {
        interval: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("time {t} outside the working band [{lo}, {hi}]")]
    OutOfBand { t: f64, lo: f64, hi: f64 },
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("simulation blew up at step {step}")]
    BlowUp { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn at_interval(self, interval: usize) -> Error {
        Error::AtInterval {
            interval,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
