use core::fmt;
use core::str::FromStr;

use crate::error::Error;

/// Ground truth of a sample. The detector's class index `1` is "morph".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Label {
    #[cfg_attr(feature = "serde", serde(alias = "genuine"))]
    BonaFide,
    Morph,
}

impl Label {
    pub const MORPH_CLASS: usize = 1;

    pub fn class_index(self) -> usize {
        match self {
            Label::BonaFide => 0,
            Label::Morph => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::BonaFide),
            1 => Some(Label::Morph),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::BonaFide => Label::Morph,
            Label::Morph => Label::BonaFide,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Morph => "morph",
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
            "morph" => Ok(Label::Morph),
            "bona_fide" | "bonafide" | "genuine" => Ok(Label::BonaFide),
            _ => Err(Error::InvalidConfig(alloc::format!(
                "unknown label '{}'",
                s
            ))),
        }
    }
}
