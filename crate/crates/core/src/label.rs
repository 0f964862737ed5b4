use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Ground-truth class of a face sample. The discriminant is the column of
/// the class in every two-way logit matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Real = 0,
    Spoof = 1,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Real, Class::Spoof];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Class::Real),
            1 => Some(Class::Spoof),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Real => "real",
            Class::Spoof => "spoof",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Class::Real => Class::Spoof,
            Class::Spoof => Class::Real,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "live" | "bonafide" | "0" => Ok(Class::Real),
            "spoof" | "attack" | "fake" | "1" => Ok(Class::Spoof),
            other => Err(Error::InvalidInput(format!("unknown label `{other}`"))),
        }
    }
}

/// Presentation attack instrument of a sample; `None` for real faces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackType {
    None,
    Print,
    Replay,
    Other,
}

impl AttackType {
    pub fn name(self) -> &'static str {
        match self {
            AttackType::None => "none",
            AttackType::Print => "print",
            AttackType::Replay => "replay",
            AttackType::Other => "other",
        }
    }

    /// Real samples carry no attack and every spoof carries one.
    pub fn consistent_with(self, class: Class) -> bool {
        (class == Class::Real) == (self == AttackType::None)
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "" => Ok(AttackType::None),
            "print" => Ok(AttackType::Print),
            "replay" => Ok(AttackType::Replay),
            "other" => Ok(AttackType::Other),
            other => Err(Error::InvalidInput(format!("unknown attack type `{other}`"))),
        }
    }
}
