use serde::{Deserialize, Serialize};

/// Activation applied after a layer's convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    #[default]
    Linear,
    Relu,
    /// One slope per output channel, or a single shared slope.
    Prelu { slopes: Vec<f64> },
    Relu6,
}

impl ActivationKind {
    /// `A(a * x) == a * A(x)` for every `a > 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        !matches!(self, ActivationKind::Relu6)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Relu => "relu",
            ActivationKind::Prelu { .. } => "prelu",
            ActivationKind::Relu6 => "relu6",
        }
    }

    /// Squared local gain of the activation, inferred from its output value.
    /// Used to estimate how much upstream noise survives the nonlinearity.
    pub(crate) fn squared_gain(&self, output: f64, channel: usize) -> f64 {
        match self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Relu => {
                if output > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Relu6 => {
                if output > 0.0 && output < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Prelu { slopes } => {
                if output >= 0.0 {
                    1.0
                } else {
                    let a = if slopes.len() == 1 { slopes[0] } else { slopes[channel] };
                    a * a
                }
            }
        }
    }
}
