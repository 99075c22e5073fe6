use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the three co-captured image streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spectrum {
    Rgb,
    Nir,
    Thr,
}

impl Spectrum {
    pub const ALL: [Spectrum; 3] = [Spectrum::Rgb, Spectrum::Nir, Spectrum::Thr];

    pub fn as_str(self) -> &'static str {
        match self {
            Spectrum::Rgb => "rgb",
            Spectrum::Nir => "nir",
            Spectrum::Thr => "thr",
        }
    }

    /// Number of image channels the sensor produces.
    pub fn channels(self) -> usize {
        match self {
            Spectrum::Rgb => 3,
            Spectrum::Nir | Spectrum::Thr => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Spectrum::Rgb => 0,
            Spectrum::Nir => 1,
            Spectrum::Thr => 2,
        }
    }

    /// All six ordered pairs of distinct spectra, `(tgt, ref)`.
    pub fn ordered_pairs() -> impl Iterator<Item = (Spectrum, Spectrum)> {
        Self::ALL
            .into_iter()
            .flat_map(|a| Self::ALL.into_iter().map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Spectrum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Spectrum::Rgb),
            "nir" => Ok(Spectrum::Nir),
            "thr" => Ok(Spectrum::Thr),
            other => Err(Error::Interface(format!("unknown spectrum '{other}'"))),
        }
    }
}
