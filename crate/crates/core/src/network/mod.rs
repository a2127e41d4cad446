//! Convolutional wavefunction ansätze.
//!
//! Amplitudes are carried in log-domain with an explicit sign: a product over
//! hundreds of neurons overflows `f64` long before its logarithm does.

mod cnn;
pub mod layers;

pub use cnn::{transfer_params, Architecture, Cnn, NetworkConfig, NeuralState, ParameterVector};
pub use layers::Tensor3;

use thiserror::Error;

use crate::lattice::Configuration;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("padding {pad} is not smaller than the spatial extent {extent}")]
    UnsupportedPad { pad: usize, extent: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel count {channels} is not divisible by the pool kernel {kernel}")]
    IndivisibleChannels { channels: usize, kernel: usize },
    #[error("token {0} outside {{-1, 0, +1}}")]
    BadToken(i8),
    #[error("non-finite value in layer {0}")]
    NumericalOverflow(&'static str),
    #[error("log-derivative undefined where the amplitude vanishes")]
    UndefinedDerivative,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has {got} entries, architecture needs {expected}")]
    ParameterCount { expected: usize, got: usize },
}

/// `W = sign * exp(log_abs)`; `sign == 0` marks an exact zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplitude {
    pub log_abs: f64,
    pub sign: i8,
}

impl Amplitude {
    pub const ZERO: Amplitude = Amplitude {
        log_abs: f64::NEG_INFINITY,
        sign: 0,
    };

    pub fn new(log_abs: f64, sign: i8) -> Self {
        if sign == 0 {
            Self::ZERO
        } else {
            Self { log_abs, sign }
        }
    }

    pub fn from_value(w: f64) -> Self {
        if w == 0.0 {
            Self::ZERO
        } else {
            Self::new(w.abs().ln(), if w > 0.0 { 1 } else { -1 })
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    pub fn value(&self) -> f64 {
        if self.sign == 0 {
            0.0
        } else {
            f64::from(self.sign) * self.log_abs.exp()
        }
    }

    /// `self / reference`, which must be nonzero.
    pub fn ratio(&self, reference: &Amplitude) -> f64 {
        if self.sign == 0 {
            0.0
        } else {
            f64::from(self.sign * reference.sign) * (self.log_abs - reference.log_abs).exp()
        }
    }

    /// Flips the sign by `s ∈ {+1, -1}`.
    pub fn with_sign_factor(self, s: i8) -> Self {
        Self {
            sign: self.sign * s,
            ..self
        }
    }
}

/// Evaluates `W(S)`; implementations must be pure so they can be shared by
/// sampling workers.
pub trait Wavefunction: Sync {
    fn amplitude(&self, s: &Configuration) -> Result<Amplitude, NetworkError>;

    fn amplitudes(&self, batch: &[Configuration]) -> Result<Vec<Amplitude>, NetworkError> {
        batch.iter().map(|s| self.amplitude(s)).collect()
    }
}

/// A wavefunction with parameters and per-sample log-derivatives
/// `O_k = ∂ ln|W| / ∂θ_k`.
pub trait Differentiable: Wavefunction {
    fn n_params(&self) -> usize;

    /// Writes `O(S)` into `out` and returns `W(S)`.
    fn log_derivative(&self, s: &Configuration, out: &mut [f64]) -> Result<Amplitude, NetworkError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplitude_ratio_and_value() {
        let a = Amplitude::from_value(-6.0);
        let b = Amplitude::from_value(2.0);
        assert_eq!(a.sign, -1);
        assert!((a.ratio(&b) + 3.0).abs() < 1e-14);
        assert!((a.value() + 6.0).abs() < 1e-12);
        assert_eq!(Amplitude::ZERO.ratio(&b), 0.0);
        assert!(Amplitude::from_value(0.0).is_zero());
    }
}
