use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::{Float, Graph, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
const SOFTPLUS_CUTOFF: f64 = 20.0;

/// Activation functions available to every block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    LeakyRelu(f64),
    HSwish,
    Mish,
    Gelu,
    Silu,
    Sigmoid,
    Identity,
}

impl Act {
    pub fn leaky() -> Self {
        Act::LeakyRelu(LEAKY_SLOPE)
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Act::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Act::HSwish => x * relu6(x + 3.0) / 6.0,
            Act::Mish => x * softplus(x).tanh(),
            Act::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Act::Silu => x * sigmoid(x),
            Act::Sigmoid => sigmoid(x),
            Act::Identity => x,
        }
    }

    /// Derivative; at kinks the right-hand derivative is used.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Act::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Act::HSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Act::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            Act::Gelu => {
                let x3 = x * x * x;
                let u = GELU_C * (x + 0.044715 * x3);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Act::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Act::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Act::Identity => 1.0,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn relu6(x: f64) -> f64 {
    x.clamp(0.0, 6.0)
}

fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_CUTOFF {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Act {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Act::LeakyRelu(_) => "leakyrelu",
            Act::HSwish => "hswish",
            Act::Mish => "mish",
            Act::Gelu => "gelu",
            Act::Silu => "silu",
            Act::Sigmoid => "sigmoid",
            Act::Identity => "identity",
        };
        f.write_str(s)
    }
}

impl FromStr for Act {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "leakyrelu" | "leaky" => Act::leaky(),
            "hswish" => Act::HSwish,
            "mish" => Act::Mish,
            "gelu" => Act::Gelu,
            "silu" => Act::Silu,
            "sigmoid" => Act::Sigmoid,
            "identity" | "none" => Act::Identity,
            other => return Err(Error::Config(format!("unknown activation {other:?}"))),
        })
    }
}

impl<T: Float> Graph<T> {
    pub fn activation(&mut self, x: Var, act: Act) -> Var {
        if act == Act::Identity {
            return x;
        }
        let to = |v: T| v.to_f64().unwrap_or(f64::NAN);
        self.unary(
            x,
            move |v| T::from_f64_lossy(act.eval(to(v))),
            move |v, _| T::from_f64_lossy(act.deriv(to(v))),
        )
    }
}
