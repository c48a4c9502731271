use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Audio => 'A',
            Modality::Visual => 'V',
        }
    }

    /// The two modalities other than `self`, in canonical order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::Text => [Modality::Audio, Modality::Visual],
            Modality::Audio => [Modality::Text, Modality::Visual],
            Modality::Visual => [Modality::Text, Modality::Audio],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "t" => Ok(Modality::Text),
            "audio" | "a" => Ok(Modality::Audio),
            "visual" | "v" => Ok(Modality::Visual),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}
