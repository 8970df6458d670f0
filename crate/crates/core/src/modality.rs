//! Modality set, availability indicators, scenario enumeration and the
//! priority table that decides which available modality donates features
//! for a missing one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    Tc,
    T2,
    Fl,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::Tc, Modality::T2, Modality::Fl];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::Tc => "tc",
            Modality::T2 => "t2",
            Modality::Fl => "fl",
        }
    }

    /// The other three modalities in canonical order.
    pub fn others(self) -> [Modality; 3] {
        let mut out = [Modality::T1; 3];
        let mut k = 0;
        for m in Self::ALL {
            if m != self {
                out[k] = m;
                k += 1;
            }
        }
        out
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
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {s:?}")))
    }
}

/// Availability vector `[t1, tc, t2, fl]`; never all-false.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityIndicator([bool; 4]);

impl ModalityIndicator {
    pub const FULL: ModalityIndicator = ModalityIndicator([true; 4]);

    pub fn new(flags: [bool; 4]) -> Result<Self> {
        if flags.iter().any(|&f| f) {
            Ok(Self(flags))
        } else {
            Err(Error::Contract("modality indicator must mark at least one modality available".into()))
        }
    }

    /// Bit `i` set means modality with canonical index `i` is available.
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 0b1111 {
            return Err(Error::InvalidArgument(format!("indicator bits {bits:#06b} out of range")));
        }
        Ok(Self(std::array::from_fn(|i| bits & (1 << i) != 0)))
    }

    pub fn bits(self) -> u8 {
        self.0.iter().enumerate().map(|(i, &b)| (b as u8) << i).sum()
    }

    pub fn flags(self) -> [bool; 4] {
        self.0
    }

    pub fn is_available(self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn available(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.is_available(*m))
    }

    pub fn missing(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| !self.is_available(*m))
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Four 0/1 digits in `[t1, tc, t2, fl]` order, e.g. `"0011"`.
    pub fn to_digits(self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

impl fmt::Display for ModalityIndicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_digits())
    }
}

impl FromStr for ModalityIndicator {
    type Err = Error;
    /// Parses `"0011"` (or `"0,0,1,1"`) in `[t1, tc, t2, fl]` order.
    fn from_str(s: &str) -> Result<Self> {
        let digits: Vec<char> = s.chars().filter(|c| *c != ',' && !c.is_whitespace()).collect();
        if digits.len() != 4 {
            return Err(Error::InvalidArgument(format!("indicator {s:?} must have four digits")));
        }
        let mut flags = [false; 4];
        for (f, c) in flags.iter_mut().zip(digits) {
            *f = match c {
                '0' => false,
                '1' => true,
                _ => return Err(Error::InvalidArgument(format!("indicator {s:?} must be 0/1 digits"))),
            };
        }
        Self::new(flags)
    }
}

impl Serialize for ModalityIndicator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_digits())
    }
}

impl<'de> Deserialize<'de> for ModalityIndicator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All 15 non-empty availability patterns, ascending by bit value.
pub fn enumerate_scenarios() -> Vec<ModalityIndicator> {
    (1u8..16).map(|b| ModalityIndicator::from_bits(b).expect("non-zero")).collect()
}

/// Uniform draw over the 15 non-empty patterns.
pub fn sample_perturbation<R: Rng + ?Sized>(rng: &mut R) -> ModalityIndicator {
    ModalityIndicator::from_bits(rng.random_range(1u8..16)).expect("non-zero")
}

/// One of the three perfect matchings on the four modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pairing {
    /// t1↔tc, t2↔fl
    I,
    /// t1↔t2, tc↔fl
    II,
    /// t1↔fl, tc↔t2
    III,
}

impl Pairing {
    pub const ALL: [Pairing; 3] = [Pairing::I, Pairing::II, Pairing::III];

    pub fn partner(self, m: Modality) -> Modality {
        use Modality::*;
        match (self, m) {
            (Pairing::I, T1) => Tc,
            (Pairing::I, Tc) => T1,
            (Pairing::I, T2) => Fl,
            (Pairing::I, Fl) => T2,
            (Pairing::II, T1) => T2,
            (Pairing::II, T2) => T1,
            (Pairing::II, Tc) => Fl,
            (Pairing::II, Fl) => Tc,
            (Pairing::III, T1) => Fl,
            (Pairing::III, Fl) => T1,
            (Pairing::III, Tc) => T2,
            (Pairing::III, T2) => Tc,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Pairing::I => "I",
            Pairing::II => "II",
            Pairing::III => "III",
        }
    }
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" => Ok(Pairing::I),
            "II" => Ok(Pairing::II),
            "III" => Ok(Pairing::III),
            _ => Err(Error::InvalidArgument(format!("unknown pairing {s:?}"))),
        }
    }
}

/// Priority order of the three pairings: primary, secondary, tertiary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RelationshipTable([Pairing; 3]);

impl Default for RelationshipTable {
    fn default() -> Self {
        Self([Pairing::I, Pairing::II, Pairing::III])
    }
}

impl RelationshipTable {
    pub fn new(order: [Pairing; 3]) -> Result<Self> {
        let distinct = order[0] != order[1] && order[1] != order[2] && order[0] != order[2];
        if !distinct {
            return Err(Error::InvalidArgument(format!("relationship order {order:?} must be a permutation of I, II, III")));
        }
        Ok(Self(order))
    }

    pub fn order(&self) -> [Pairing; 3] {
        self.0
    }

    /// Partners of `m` in priority order.
    pub fn partners(&self, m: Modality) -> [Modality; 3] {
        self.0.map(|p| p.partner(m))
    }

    /// The six priority orders, in the row order of the compensation-order
    /// ablation table.
    pub fn all_orders() -> [RelationshipTable; 6] {
        use Pairing::*;
        [
            Self([III, II, I]),
            Self([III, I, II]),
            Self([II, III, I]),
            Self([II, I, III]),
            Self([I, III, II]),
            Self([I, II, III]),
        ]
    }

    /// `"I,II,III"` style label.
    pub fn label(&self) -> String {
        self.0.map(|p| p.label()).join(",")
    }

    /// `"I→II→III"` style label.
    pub fn arrow_label(&self) -> String {
        self.0.map(|p| p.label()).join("→")
    }
}

impl fmt::Display for RelationshipTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for RelationshipTable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<Pairing> = s.split(',').map(str::parse).collect::<Result<_>>()?;
        let order: [Pairing; 3] = parts
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("relationship order {s:?} needs three entries")))?;
        Self::new(order)
    }
}

impl Serialize for RelationshipTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for RelationshipTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// First available partner of `missing`, scanning the table in priority
/// order.
pub fn donor_for(missing: Modality, delta: ModalityIndicator, table: &RelationshipTable) -> Result<Modality> {
    if delta.is_available(missing) {
        return Err(Error::Contract(format!("{missing} is available under {delta}; it needs no donor")));
    }
    table
        .partners(missing)
        .into_iter()
        .find(|p| delta.is_available(*p))
        .ok_or_else(|| Error::Contract(format!("no available modality under {delta}")))
}
