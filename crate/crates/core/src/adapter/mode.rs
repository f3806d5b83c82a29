use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LabError;

/// Geometry every parameter formula consumes: hidden size and layer count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn new(d: usize, layers: usize) -> crate::Result<Self> {
        if d == 0 || layers == 0 {
            return Err(LabError::Config(format!(
                "model dims must be positive, got d={d} L={layers}"
            )));
        }
        Ok(ModelDims { d, layers })
    }
}

/// The eight selective-training / weight-tying configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TiedLoraMode {
    /// Per-layer A and B trained; u, v fixed at 1.
    Lora,
    /// Tied A and B trained; u, v fixed at 1.
    Tab,
    /// Tied A and B trained plus per-layer u and v.
    Tabuv,
    /// Tied B and per-layer u trained; tied A frozen; v fixed at 1.
    Tbu,
    /// Tied B trained; tied A frozen; u, v fixed at 1.
    Tb,
    /// Tied A trained plus per-layer u and v; tied B frozen.
    Tauv,
    /// Tied A trained; tied B frozen; u, v fixed at 1.
    Ta,
    /// Per-layer u and v trained; tied A and B frozen.
    Tuv,
}

/// Which components a mode trains. Untrained u/v are the constant 1-vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub a: bool,
    pub b: bool,
    pub u: bool,
    pub v: bool,
}

impl TiedLoraMode {
    pub const ALL: [TiedLoraMode; 8] = [
        TiedLoraMode::Lora,
        TiedLoraMode::Tabuv,
        TiedLoraMode::Tab,
        TiedLoraMode::Tbu,
        TiedLoraMode::Tb,
        TiedLoraMode::Tauv,
        TiedLoraMode::Ta,
        TiedLoraMode::Tuv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TiedLoraMode::Lora => "LORA",
            TiedLoraMode::Tab => "TAB",
            TiedLoraMode::Tabuv => "TABUV",
            TiedLoraMode::Tbu => "TBU",
            TiedLoraMode::Tb => "TB",
            TiedLoraMode::Tauv => "TAUV",
            TiedLoraMode::Ta => "TA",
            TiedLoraMode::Tuv => "TUV",
        }
    }

    pub fn mask(self) -> TrainMask {
        let (a, b, u, v) = match self {
            TiedLoraMode::Lora | TiedLoraMode::Tab => (true, true, false, false),
            TiedLoraMode::Tabuv => (true, true, true, true),
            TiedLoraMode::Tbu => (false, true, true, false),
            TiedLoraMode::Tb => (false, true, false, false),
            TiedLoraMode::Tauv => (true, false, true, true),
            TiedLoraMode::Ta => (true, false, false, false),
            TiedLoraMode::Tuv => (false, false, true, true),
        };
        TrainMask { a, b, u, v }
    }

    /// A and B share one instance across layers in every mode except LoRA.
    pub fn tied(self) -> bool {
        self != TiedLoraMode::Lora
    }

    /// Modes whose initialization leaves the adapted model equal to its base.
    pub fn zero_start(self) -> bool {
        !matches!(self, TiedLoraMode::Tbu | TiedLoraMode::Tb | TiedLoraMode::Ta)
    }
}

impl fmt::Display for TiedLoraMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TiedLoraMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        TiedLoraMode::ALL
            .into_iter()
            .find(|m| m.name() == upper)
            .ok_or_else(|| {
                LabError::Config(format!(
                    "unknown mode {s:?}; expected one of LORA, TAB, TABUV, TBU, TB, TAUV, TA, TUV"
                ))
            })
    }
}

impl TryFrom<String> for TiedLoraMode {
    type Error = LabError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TiedLoraMode> for String {
    fn from(m: TiedLoraMode) -> String {
        m.name().to_string()
    }
}
