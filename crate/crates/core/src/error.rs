use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chirp: {0}")]
    InvalidChirp(String),

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("invalid sequence layout: {0}")]
    InvalidLayout(String),

    #[error("wav {field}: {message}")]
    Wav { field: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("replica ({replica} samples) is longer than the recording ({recording} samples)")]
    ReplicaTooLong { replica: usize, recording: usize },

    #[error("recording is all zeros")]
    AllZeroRecording,

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(f64, f64),

    #[error("no detection for speaker(s) {speakers:?}")]
    MissingDetections { speakers: Vec<usize> },

    #[error("estimate coincides with speaker {speaker}; linearization is singular")]
    SingularLinearization { speaker: usize },

    #[error("geometry unsolvable: {reason}")]
    Unsolvable { reason: String },

    #[error("estimate is out of bounds: GDOP {gdop:.2} exceeds the cutoff {cutoff}")]
    OutOfBounds { gdop: f64, cutoff: f64 },

    #[error("invalid constellation: {0}")]
    InvalidConstellation(String),

    #[error("recording too short: need at least {required:.6} s, have {actual:.6} s")]
    RecordingTooShort { required: f64, actual: f64 },

    #[error("invalid channel model: {0}")]
    InvalidChannel(String),

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn wav(field: &'static str, message: impl Into<String>) -> Self {
        Error::Wav {
            field,
            message: message.into(),
        }
    }
}
