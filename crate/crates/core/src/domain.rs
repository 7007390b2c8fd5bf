use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The expert domains prompts and samples are partitioned into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    TypicalParts,
    SceneNarratives,
    Implausible,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::TypicalParts, Domain::SceneNarratives, Domain::Implausible];

    pub fn label(self) -> &'static str {
        match self {
            Domain::TypicalParts => "typical_parts",
            Domain::SceneNarratives => "scene_narratives",
            Domain::Implausible => "implausible",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL.into_iter().find(|d| d.label() == s).ok_or_else(|| Error::UnknownDomain(s.to_string()))
    }
}

/// Damage categories a prompt is tagged with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Dent,
    Scrape,
    TornBumper,
    CrackedPaint,
    BrokenLight,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::Dent, Category::Scrape, Category::TornBumper, Category::CrackedPaint, Category::BrokenLight];

    pub fn label(self) -> &'static str {
        match self {
            Category::Dent => "dent",
            Category::Scrape => "scrape",
            Category::TornBumper => "torn_bumper",
            Category::CrackedPaint => "cracked_paint",
            Category::BrokenLight => "broken_light",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL.into_iter().find(|c| c.label() == s).ok_or_else(|| Error::invalid(format!("unknown category `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for d in Domain::ALL {
            assert_eq!(d.label().parse::<Domain>().unwrap(), d);
            assert_eq!(serde_json::to_string(&d).unwrap(), format!("\"{}\"", d.label()));
        }
        for c in Category::ALL {
            assert_eq!(c.label().parse::<Category>().unwrap(), c);
        }
        assert!("bogus".parse::<Domain>().is_err());
    }
}
