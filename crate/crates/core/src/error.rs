use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LieError {
    #[error("matrix is not orthonormal (residual {0:e})")]
    NotOrthonormal(f64),
    #[error("matrix is not antisymmetric (residual {0:e})")]
    NotAntisymmetric(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("time {t:.9} outside supported interval [{start:.9}, {end:.9}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("invalid knot grid: {0}")]
    InvalidGrid(String),
    #[error("IMU data does not cover [{from:.9}, {to:.9}]")]
    InsufficientImu { from: f64, to: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensorError {
    #[error("point at depth {0:e} m is behind the camera")]
    Cheirality(f64),
    #[error("row {row} outside image of height {height}")]
    RowOutOfRange { row: f64, height: f64 },
    #[error("invalid sensor parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("preintegration needs at least two samples spanning a positive interval")]
    EmptyInterval,
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("non-finite residual at the initial point")]
    NonFiniteInitial,
    #[error("factor references unknown parameter block {0}")]
    UnknownBlock(usize),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("marginalization: {0}")]
    Marginalization(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("IMU sample at {t:.9} is not after the previous sample at {prev:.9}")]
    OutOfOrderImu { t: f64, prev: f64 },
    #[error("frame at {t:.9} is not after the previous frame at {prev:.9}")]
    OutOfOrderFrame { t: f64, prev: f64 },
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("time {t:.9} outside simulated interval [0, {duration:.9}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("no landmark is visible from the trajectory at {0:.9}")]
    NoVisibility(f64),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: timestamps not strictly increasing at line {line} ({prev:.9} then {t:.9})")]
    NotMonotone {
        path: String,
        line: usize,
        prev: f64,
        t: f64,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("evaluation: {0}")]
    Eval(String),
}
