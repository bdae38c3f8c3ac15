use core::fmt;

/// Errors raised by the tracking core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A matrix expected to be symmetric positive definite failed Cholesky.
    NotPositiveDefinite(&'static str),
    /// A point projects at or behind the camera (`z <= z_min`).
    BehindCamera { z: f64 },
    /// The vehicle position is the sensor origin, so sensor direction is undefined.
    ZeroPosition,
    /// A knot index has no symmetric partner or is out of range.
    UnpairedKnot(usize),
    /// A corner id outside `1..=4`.
    InvalidCorner(usize),
    /// Not enough measurements to initialize a track.
    InsufficientMeasurements { radar: usize, keypoints: usize },
    /// Two series that must be aligned have different lengths.
    LengthMismatch { expected: usize, found: usize },
    /// A projected shape has fewer than three non-collinear points.
    DegenerateShape,
    /// Malformed input that is not covered by a more specific variant.
    Invalid(&'static str),
}

/// Result alias for this crate.
pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotPositiveDefinite(what) => write!(f, "{what} is not positive definite"),
            Error::BehindCamera { z } => write!(f, "point is behind the camera (z = {z})"),
            Error::ZeroPosition => write!(f, "vehicle position coincides with the sensor origin"),
            Error::UnpairedKnot(t) => write!(f, "knot {t} has no symmetric partner"),
            Error::InvalidCorner(c) => write!(f, "corner id {c} is not in 1..=4"),
            Error::InsufficientMeasurements { radar, keypoints } => write!(
                f,
                "insufficient measurements to initialize ({radar} radar points, {keypoints} keypoints)"
            ),
            Error::LengthMismatch { expected, found } => {
                write!(f, "length mismatch: expected {expected}, found {found}")
            }
            Error::DegenerateShape => f.write_str("projected shape has no area"),
            Error::Invalid(msg) => f.write_str(msg),
        }
    }
}

impl core::error::Error for Error {}
