use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no agents")]
    Empty,
    #[error("row {row} has {len} entries, expected {n}")]
    NotSquare { row: usize, len: usize, n: usize },
    #[error("invalid weight a[{j}][{m}] = {w}")]
    BadWeight { j: usize, m: usize, w: f64 },
    #[error("self-edge on agent {0}")]
    SelfEdge(usize),
    #[error("agent index {index} out of range for {n} agents")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("graph has no edges; largest Laplacian eigenvalue is 0 and the delay bound is undefined")]
    NoEdges,
    #[error("unknown graph preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("plant step must satisfy 0 < dt <= 1e-3, got {0}")]
    BadStep(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("svID is {0} bytes, at most 32 allowed")]
    SvIdTooLong(usize),
    #[error("svID is not ASCII")]
    SvIdNotAscii,
    #[error("value {0} does not fit the fixed-point range")]
    ValueOverflow(f64),
    #[error("bad magic 0x{0:04x}")]
    BadMagic(u16),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("CRC mismatch: frame says 0x{stored:08x}, computed 0x{computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("invalid hex: {0}")]
    Hex(String),
}

/// Scenario file problems. `Parse` maps to exit code 2, `Invalid` to 3.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("agent {agent} diverged at t = {t_s:.4} s: {what} = {value}")]
    Diverged {
        t_s: f64,
        agent: usize,
        what: &'static str,
        value: f64,
    },
    #[error("non-finite {what} for agent {agent} at t = {t_s:.4} s")]
    NonFinite {
        t_s: f64,
        agent: usize,
        what: &'static str,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace too short: {0}")]
    TooShort(String),
    #[error("trace is empty")]
    Empty,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("invalid band fraction {0}; must lie in (0, 0.5)")]
    BadBand(f64),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace format: line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("event log: {0}")]
    Json(#[from] serde_json::Error),
}
