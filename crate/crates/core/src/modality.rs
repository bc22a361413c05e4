use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Imu,
}

impl Modality {
    /// Canonical order used for token concatenation and MLP input slots.
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Imu];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Imu => "imu",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Video => 0,
            Modality::Audio => 1,
            Modality::Imu => 2,
        }
    }

    fn bit(self) -> u8 {
        1 << self.index()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "video" => Ok(Modality::Video),
            "audio" => Ok(Modality::Audio),
            "imu" => Ok(Modality::Imu),
            other => Err(Error::Invalid(format!("unknown modality '{other}'"))),
        }
    }
}

/// Subset of {video, audio, imu}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const EMPTY: ModalityMask = ModalityMask(0);
    pub const ALL: ModalityMask = ModalityMask(0b111);

    pub fn from_modalities(ms: &[Modality]) -> Self {
        ModalityMask(ms.iter().fold(0, |acc, m| acc | m.bit()))
    }

    pub fn single(m: Modality) -> Self {
        ModalityMask(m.bit())
    }

    /// Parses a comma list such as `video,audio`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut mask = ModalityMask::EMPTY;
        for part in s.split([',', '+']).filter(|p| !p.trim().is_empty()) {
            mask = mask.with(part.parse()?);
        }
        if mask.is_empty() {
            return Err(Error::Invalid(format!("empty modality list '{s}'")));
        }
        Ok(mask)
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn with(self, m: Modality) -> Self {
        ModalityMask(self.0 | m.bit())
    }

    pub fn without(self, m: Modality) -> Self {
        ModalityMask(self.0 & !m.bit())
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Members in canonical order.
    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn is_subset_of(self, other: ModalityMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_strict_subset_of(self, other: ModalityMask) -> bool {
        self.is_subset_of(other) && self != other
    }

    pub fn union(self, other: ModalityMask) -> Self {
        ModalityMask(self.0 | other.0)
    }

    pub fn intersection(self, other: ModalityMask) -> Self {
        ModalityMask(self.0 & other.0)
    }

    pub fn intersects(self, other: ModalityMask) -> bool {
        self.0 & other.0 != 0
    }

    pub fn complement(self) -> Self {
        ModalityMask(!self.0 & 0b111)
    }

    /// All non-empty subsets, in increasing bit order.
    pub fn non_empty_subsets(self) -> Vec<ModalityMask> {
        (1u8..8)
            .map(ModalityMask)
            .filter(|m| m.is_subset_of(self))
            .collect()
    }

    pub fn ensure_non_empty(self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::Invalid(format!("{what}: empty modality mask")))
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for ModalityMask {
    /// `video+audio` style, which stays a single CSV field.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityMask::parse_list(s)
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<Modality>::deserialize(d)?;
        Ok(ModalityMask::from_modalities(&names))
    }
}
