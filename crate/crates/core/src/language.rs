// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language codes and the registered language universe.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The twenty evaluation languages, in reporting order, with English names.
pub const DEFAULT_LANGUAGES: [(&str, &str); 20] = [
    ("en", "English"),
    ("zh", "Chinese"),
    ("de", "German"),
    ("fr", "French"),
    ("es", "Spanish"),
    ("it", "Italian"),
    ("nl", "Dutch"),
    ("ja", "Japanese"),
    ("ru", "Russian"),
    ("sv", "Swedish"),
    ("sl", "Slovenian"),
    ("pl", "Polish"),
    ("bg", "Bulgarian"),
    ("no", "Norwegian"),
    ("ms", "Malay"),
    ("is", "Icelandic"),
    ("hi", "Hindi"),
    ("th", "Thai"),
    ("sw", "Swahili"),
    ("bn", "Bengali"),
];

/// Two-letter lowercase ISO-639-1 code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguageCode([u8; 2]);

impl LanguageCode {
    pub fn new(code: &str) -> Result<Self> {
        let bytes = code.as_bytes();
        if bytes.len() != 2 || !bytes.iter().all(|b| b.is_ascii_lowercase()) {
            return Err(Error::InvalidInput(format!(
                "language code {code:?} is not two lowercase ASCII letters"
            )));
        }
        Ok(LanguageCode([bytes[0], bytes[1]]))
    }

    pub fn as_str(&self) -> &str {
        // Constructed only from ASCII.
        std::str::from_utf8(&self.0).expect("ascii language code")
    }

    /// English display name, falling back to the code itself.
    pub fn name(&self) -> &str {
        DEFAULT_LANGUAGES
            .iter()
            .find(|(c, _)| *c == self.as_str())
            .map(|(_, n)| *n)
            .unwrap_or_else(|| self.as_str())
    }

    /// Whether the code belongs to the built-in twenty-language registry.
    pub fn is_registered(&self) -> bool {
        DEFAULT_LANGUAGES.iter().any(|(c, _)| *c == self.as_str())
    }

    pub fn english() -> Self {
        LanguageCode(*b"en")
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LanguageCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LanguageCode::new(s)
    }
}

impl Serialize for LanguageCode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for LanguageCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LanguageCode::new(&s).map_err(serde::de::Error::custom)
    }
}

/// Ordered language universe with a distinguished English member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LanguageSet {
    members: Vec<LanguageCode>,
    english: LanguageCode,
}

impl LanguageSet {
    pub fn new(members: Vec<LanguageCode>, english: LanguageCode) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "a language set needs at least 2 members, got {}",
                members.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &members {
            if !seen.insert(*m) {
                return Err(Error::Config(format!("duplicate language {m}")));
            }
        }
        if !seen.contains(&english) {
            return Err(Error::Config(format!(
                "english language {english} is not a member of the set"
            )));
        }
        Ok(LanguageSet { members, english })
    }

    /// The twenty-language registry.
    pub fn default_registry() -> Self {
        let members = DEFAULT_LANGUAGES
            .iter()
            .map(|(c, _)| LanguageCode::new(c).expect("valid builtin code"))
            .collect();
        LanguageSet::new(members, LanguageCode::english()).expect("valid builtin set")
    }

    pub fn from_codes(codes: &[&str]) -> Result<Self> {
        let members = codes
            .iter()
            .map(|c| LanguageCode::new(c))
            .collect::<Result<Vec<_>>>()?;
        LanguageSet::new(members, LanguageCode::english())
    }

    pub fn members(&self) -> &[LanguageCode] {
        &self.members
    }

    pub fn english(&self) -> LanguageCode {
        self.english
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, code: LanguageCode) -> bool {
        self.members.contains(&code)
    }

    /// Resolve a string to a registered member.
    pub fn lookup(&self, code: &str) -> Result<LanguageCode> {
        let c = LanguageCode::new(code).map_err(|e| Error::Config(e.to_string()))?;
        if self.contains(c) {
            Ok(c)
        } else {
            Err(Error::Config(format!("unknown language code {code:?}")))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = LanguageCode> + '_ {
        self.members.iter().copied()
    }
}
