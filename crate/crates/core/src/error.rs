use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prices: real-time sell price {rt_sell} exceeds real-time buy price {rt_buy}")]
    PriceOrdering { rt_buy: f64, rt_sell: f64 },

    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),

    #[error("producer index {index} out of range for {len} producers")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("allocation has {allocation} payoffs but the snapshot has {snapshot} producers")]
    LengthMismatch { allocation: usize, snapshot: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "{producers} producers exceeds the exhaustive coalition limit of {limit}; use sampled core checking"
    )]
    TooManyProducers { producers: usize, limit: usize },

    #[error("no counterexample exists: {0}")]
    NoCounterexample(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
