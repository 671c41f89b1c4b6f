use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Rain-density class. Integer codes are 1, 2, 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityLabel {
    Light,
    Medium,
    Heavy,
}

impl DensityLabel {
    pub const ALL: [DensityLabel; 3] = [DensityLabel::Light, DensityLabel::Medium, DensityLabel::Heavy];

    pub fn code(self) -> u8 {
        self.index() as u8 + 1
    }

    /// Zero-based class index used by the classifier.
    pub fn index(self) -> usize {
        match self {
            DensityLabel::Light => 0,
            DensityLabel::Medium => 1,
            DensityLabel::Heavy => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_code(code: u8) -> Option<Self> {
        (code as usize).checked_sub(1).and_then(Self::from_index)
    }

    /// Coverage band `[lo, hi]` for synthesis.
    pub fn coverage_band(self) -> (f64, f64) {
        match self {
            DensityLabel::Light => (0.05, 0.35),
            DensityLabel::Medium => (0.35, 0.65),
            DensityLabel::Heavy => (0.65, 0.95),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DensityLabel::Light => "light",
            DensityLabel::Medium => "medium",
            DensityLabel::Heavy => "heavy",
        }
    }
}

impl fmt::Display for DensityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DensityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "light" | "1" => Ok(DensityLabel::Light),
            "medium" | "2" => Ok(DensityLabel::Medium),
            "heavy" | "3" => Ok(DensityLabel::Heavy),
            other => Err(Error::InvalidArgument(format!("unknown density label `{other}`"))),
        }
    }
}
