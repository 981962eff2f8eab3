use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Sample class. Attacks are the positive class everywhere: `Fake` maps to
/// `+1`, `Real` to `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Fake => 1.0,
            Label::Real => -1.0,
        }
    }

    /// Index into two-way softmax outputs: real = 0, fake = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Self {
        if i == 1 {
            Label::Fake
        } else {
            Label::Real
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(Error::InvalidArgument(format!(
                "label must be \"real\" or \"fake\", got {other:?}"
            ))),
        }
    }
}
