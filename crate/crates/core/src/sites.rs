//! Subsets of the site set, stored as bitmasks.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Maximum number of sites supported by the bitmask representation.
pub const MAX_SITES: usize = 32;

/// A subset of `{0, .., p-1}`. Displayed and parsed 1-based, as `1,2,3`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SiteSet(u32);

impl SiteSet {
    pub const EMPTY: SiteSet = SiteSet(0);

    pub fn from_bits(bits: u32) -> Self {
        SiteSet(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn full(p: usize) -> Self {
        assert!(p <= MAX_SITES);
        if p == MAX_SITES {
            SiteSet(u32::MAX)
        } else {
            SiteSet((1u32 << p) - 1)
        }
    }

    pub fn singleton(i: usize) -> Self {
        SiteSet(1 << i)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(it: I) -> Self {
        SiteSet(it.into_iter().fold(0, |acc, i| acc | (1 << i)))
    }

    /// Support of a point: indices with strictly positive coordinate.
    pub fn support(x: &[f64]) -> Self {
        Self::from_indices(x.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(i, _)| i))
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: SiteSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: SiteSet) -> Self {
        SiteSet(self.0 | other.0)
    }

    pub fn intersection(self, other: SiteSet) -> Self {
        SiteSet(self.0 & other.0)
    }

    pub fn difference(self, other: SiteSet) -> Self {
        SiteSet(self.0 & !other.0)
    }

    /// Complement within `{0, .., p-1}`.
    pub fn complement(self, p: usize) -> Self {
        SiteSet::full(p).difference(self)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..MAX_SITES).filter(move |i| bits >> i & 1 == 1)
    }

    pub fn indices(self) -> Vec<usize> {
        self.iter().collect()
    }

    /// All subsets of `self`, including the empty set and `self`.
    pub fn subsets(self) -> impl Iterator<Item = SiteSet> {
        let full = self.0;
        let mut sub = Some(full);
        std::iter::from_fn(move || {
            let cur = sub?;
            sub = if cur == 0 { None } else { Some((cur - 1) & full) };
            Some(SiteSet(cur))
        })
    }

    /// Checks that every member is below `p` and the set is nonempty.
    pub fn validate(self, p: usize) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::BadFace("empty site set".into()));
        }
        if !self.is_subset(SiteSet::full(p)) {
            return Err(Error::BadFace(format!("{self} is not contained in 1..={p}")));
        }
        Ok(self)
    }

    /// Parses a 1-based comma list such as `1,2`.
    pub fn parse_one_based(s: &str, p: usize) -> Result<Self> {
        let mut set = SiteSet::EMPTY;
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let k: usize = tok
                .parse()
                .map_err(|_| Error::BadFace(format!("cannot parse site `{tok}`")))?;
            if k == 0 || k > p {
                return Err(Error::BadFace(format!("site {k} outside 1..={p}")));
            }
            set = set.union(SiteSet::singleton(k - 1));
        }
        set.validate(p)
    }
}

impl fmt::Display for SiteSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|i| (i + 1).to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Serialized as the sorted list of 1-based site labels.
impl Serialize for SiteSet {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_seq(self.iter().map(|i| i + 1))
    }
}

impl<'de> Deserialize<'de> for SiteSet {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let labels = Vec::<usize>::deserialize(de)?;
        if labels.iter().any(|&k| k == 0 || k > MAX_SITES) {
            return Err(serde::de::Error::custom("site labels are 1-based and at most 32"));
        }
        Ok(SiteSet::from_indices(labels.into_iter().map(|k| k - 1)))
    }
}

impl fmt::Debug for SiteSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let s = SiteSet::parse_one_based("1, 3", 3).unwrap();
        assert_eq!(s.indices(), vec![0, 2]);
        assert_eq!(s.to_string(), "{1,3}");
        assert!(SiteSet::parse_one_based("4", 3).is_err());
        assert!(SiteSet::parse_one_based("0", 3).is_err());
        assert!(SiteSet::parse_one_based("", 3).is_err());
    }

    #[test]
    fn subsets_enumerates_power_set() {
        let s = SiteSet::from_indices([0, 2, 3]);
        let subs: Vec<_> = s.subsets().collect();
        assert_eq!(subs.len(), 8);
        assert!(subs.iter().all(|t| t.is_subset(s)));
    }

    #[test]
    fn support_of_point() {
        assert_eq!(SiteSet::support(&[0.5, 0.0, 0.5]), SiteSet::from_indices([0, 2]));
    }
}
