use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("dimension {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("site {site} out of range for {n_qubits} qubits")]
    SiteOutOfRange { site: usize, n_qubits: usize },

    #[error("duplicate site index {0}")]
    DuplicateSite(usize),

    #[error("operator is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("non-finite value encountered")]
    NonFinite,

    #[error("eigensolver did not converge within {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("expectation value has imaginary residue {0:e}")]
    ComplexExpectation(f64),

    #[error("partial trace needs at least one kept site")]
    EmptyKeep,

    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate ground space (gap {gap:e})")]
    DegenerateGround {
        gap: f64,
        candidates: Box<[Vec<num_complex::Complex64>; 2]>,
    },

    #[error("no teleportation possible: xi and eta both vanish")]
    TrivialAngles,

    #[error("invalid rotation angle")]
    InvalidAngle,

    #[error("sender and receiver sets overlap at site {0}")]
    SiteOverlap(usize),

    #[error("invalid bipartition: {0}")]
    InvalidBipartition(String),

    #[error("malformed circuit: {0}")]
    MalformedCircuit(String),

    #[error("unsupported control topology: {0}")]
    UnsupportedTopology(String),

    #[error("state preparation reached fidelity {fidelity}, below 1 - 1e-9")]
    PreparationFailed { fidelity: f64 },

    #[error("histogram is empty")]
    EmptyHistogram,

    #[error("no histogram for basis '{0}'")]
    MissingHistogram(String),

    #[error("readout profile covers {profile} qubits, bit-strings have {bits}")]
    WidthMismatch { profile: usize, bits: usize },

    #[error("invalid readout profile: {0}")]
    InvalidProfile(String),

    #[error("calibration matrix is singular")]
    SingularCalibration,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}
