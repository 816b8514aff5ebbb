use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Treatment vocabulary: 1 = chemoradiation, 2 = temozolomide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Treatment {
    Crt = 1,
    Tmz = 2,
}

impl Treatment {
    pub const ALL: [Treatment; 2] = [Treatment::Crt, Treatment::Tmz];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Row of the treatment embedding table.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Treatment::Crt => "CRT",
            Treatment::Tmz => "TMZ",
        }
    }
}

impl TryFrom<u8> for Treatment {
    type Error = Error;

    fn try_from(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Treatment::Crt),
            2 => Ok(Treatment::Tmz),
            other => Err(Error::Vocabulary(other)),
        }
    }
}

impl From<Treatment> for u8 {
    fn from(t: Treatment) -> u8 {
        t.code()
    }
}

impl std::str::FromStr for Treatment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CRT" => Ok(Treatment::Crt),
            "TMZ" => Ok(Treatment::Tmz),
            code => {
                let n: u8 = code
                    .parse()
                    .map_err(|_| Error::Argument(format!("unknown treatment `{s}`")))?;
                Treatment::try_from(n)
            }
        }
    }
}

impl std::fmt::Display for Treatment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A treatment together with its day offset from the first post-op scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreatmentDayPair {
    pub treatment: Treatment,
    pub day: u32,
}

impl TreatmentDayPair {
    pub fn new(treatment: Treatment, day: u32) -> Self {
        Self { treatment, day }
    }
}
