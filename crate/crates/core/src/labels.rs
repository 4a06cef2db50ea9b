//! Ulam–Harris–Neveu labels and antichain populations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("label {0:?} is not in the population")]
    Absent(String),
    #[error("labels {0:?} and {1:?} violate the antichain condition")]
    NotAntichain(String, String),
    #[error("invalid label {0:?}")]
    Parse(String),
}

/// Genealogical label: the root is the empty sequence, the `k`-th child of
/// `i` is `i` followed by `k - 1`.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(Vec<u32>);

impl Label {
    pub fn root() -> Self {
        Label(Vec::new())
    }

    pub fn new(path: Vec<u32>) -> Self {
        Label(path)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn concat(&self, other: &Label) -> Label {
        let mut v = Vec::with_capacity(self.0.len() + other.0.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(&other.0);
        Label(v)
    }

    pub fn child(&self, k: u32) -> Label {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(k);
        Label(v)
    }

    /// `[i0, .., i(k-1)]`.
    pub fn children(&self, k: usize) -> Vec<Label> {
        (0..k as u32).map(|c| self.child(c)).collect()
    }

    /// True iff `self` is a proper prefix of `other`.
    pub fn is_strict_ancestor(&self, other: &Label) -> bool {
        self.0.len() < other.0.len() && other.0.starts_with(&self.0)
    }

    /// Self-delimiting encoding: little-endian `u32` length followed by each
    /// entry as little-endian `u32`. Injective on labels.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.0.len() + 1));
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for k in &self.0 {
            out.extend_from_slice(&k.to_le_bytes());
        }
        out
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (pos, k) in self.0.iter().enumerate() {
            if pos > 0 {
                f.write_str(".")?;
            }
            write!(f, "{k}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("∅")
        } else {
            write!(f, "{self}")
        }
    }
}

impl FromStr for Label {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Ok(Label::root());
        }
        s.split('.')
            .map(|part| {
                part.parse::<u32>()
                    .map_err(|_| LabelError::Parse(s.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Label)
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Finite set of labelled positions satisfying the antichain condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Population {
    members: BTreeMap<Label, Vec<f64>>,
}

impl Population {
    pub fn new() -> Self {
        Self::default()
    }

    /// A single root particle at `x`.
    pub fn single(x: Vec<f64>) -> Self {
        let mut members = BTreeMap::new();
        members.insert(Label::root(), x);
        Population { members }
    }

    /// Particles `0, 1, ..` at the given positions (an antichain by construction).
    pub fn siblings(positions: impl IntoIterator<Item = Vec<f64>>) -> Self {
        Population {
            members: positions
                .into_iter()
                .enumerate()
                .map(|(k, x)| (Label::root().child(k as u32), x))
                .collect(),
        }
    }

    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (Label, Vec<f64>)>,
    ) -> Result<Self, LabelError> {
        let pop = Population {
            members: pairs.into_iter().collect(),
        };
        pop.check_antichain()?;
        Ok(pop)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, label: &Label) -> Option<&[f64]> {
        self.members.get(label).map(Vec::as_slice)
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.members.contains_key(label)
    }

    /// Members in lexicographic label order.
    pub fn iter(&self) -> impl Iterator<Item = (&Label, &[f64])> {
        self.members.iter().map(|(l, x)| (l, x.as_slice()))
    }

    /// Removes `label` and inserts its `k` children at `x`.
    pub fn replace_by_children(
        &mut self,
        label: &Label,
        k: usize,
        x: &[f64],
    ) -> Result<(), LabelError> {
        if self.members.remove(label).is_none() {
            return Err(LabelError::Absent(label.to_string()));
        }
        for child in label.children(k) {
            self.members.insert(child, x.to_vec());
        }
        Ok(())
    }

    pub fn check_antichain(&self) -> Result<(), LabelError> {
        // In lexicographic order every descendant of j follows j before any
        // non-descendant, so adjacent pairs suffice.
        let mut prev: Option<&Label> = None;
        for label in self.members.keys() {
            if let Some(p) = prev {
                if p.is_strict_ancestor(label) {
                    return Err(LabelError::NotAntichain(p.to_string(), label.to_string()));
                }
            }
            prev = Some(label);
        }
        Ok(())
    }

    pub fn is_antichain(&self) -> bool {
        self.check_antichain().is_ok()
    }

    pub fn into_pairs(self) -> impl Iterator<Item = (Label, Vec<f64>)> {
        self.members.into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l(v: &[u32]) -> Label {
        Label::new(v.to_vec())
    }

    #[test]
    fn concat_examples() {
        assert_eq!(Label::root().concat(&Label::root()), Label::root());
        assert_eq!(l(&[1, 2]).concat(&l(&[0])), l(&[1, 2, 0]));
        assert_eq!(Label::root().concat(&l(&[3])), l(&[3]));
        assert_eq!(l(&[4, 1]).concat(&Label::root()), l(&[4, 1]));
    }

    #[test]
    fn ancestor_examples() {
        assert!(Label::root().is_strict_ancestor(&l(&[0])));
        assert!(!l(&[0]).is_strict_ancestor(&l(&[0])));
        assert!(!l(&[1]).is_strict_ancestor(&l(&[0, 1])));
        assert!(l(&[0]).is_strict_ancestor(&l(&[0, 1, 5])));
    }

    #[test]
    fn children_examples() {
        assert_eq!(l(&[2]).children(2), vec![l(&[2, 0]), l(&[2, 1])]);
        assert_eq!(Label::root().children(1), vec![l(&[0])]);
        assert!(l(&[0, 1]).children(0).is_empty());
    }

    #[test]
    fn replace_examples() {
        let mut p = Population::single(vec![0.0]);
        p.replace_by_children(&Label::root(), 2, &[0.0]).unwrap();
        let got: Vec<_> = p.iter().map(|(l, x)| (l.clone(), x.to_vec())).collect();
        assert_eq!(got, vec![(l(&[0]), vec![0.0]), (l(&[1]), vec![0.0])]);

        let mut p = Population::single(vec![1.5]);
        p.replace_by_children(&Label::root(), 0, &[1.5]).unwrap();
        assert!(p.is_empty());

        let mut p = Population::siblings([vec![0.25], vec![-1.0]]);
        p.replace_by_children(&l(&[0]), 1, &[0.25]).unwrap();
        let got: Vec<_> = p.iter().map(|(l, x)| (l.clone(), x.to_vec())).collect();
        assert_eq!(got, vec![(l(&[0, 0]), vec![0.25]), (l(&[1]), vec![-1.0])]);
    }

    #[test]
    fn replace_absent_is_error() {
        let mut p = Population::single(vec![0.0]);
        assert_eq!(
            p.replace_by_children(&l(&[7]), 1, &[0.0]),
            Err(LabelError::Absent("7".into()))
        );
    }

    #[test]
    fn from_pairs_rejects_ancestor_pairs() {
        let err = Population::from_pairs([(l(&[1]), vec![0.0]), (l(&[1, 0, 2]), vec![0.0])]);
        assert!(matches!(err, Err(LabelError::NotAntichain(..))));
        Population::from_pairs([(l(&[1]), vec![0.0]), (l(&[0, 1]), vec![0.0])]).unwrap();
    }

    #[test]
    fn display_round_trip() {
        assert_eq!(Label::root().to_string(), "");
        assert_eq!(l(&[1, 2, 0]).to_string(), "1.2.0");
        assert_eq!("1.2.0".parse::<Label>().unwrap(), l(&[1, 2, 0]));
        assert_eq!("".parse::<Label>().unwrap(), Label::root());
        assert!("1..2".parse::<Label>().is_err());
    }

    proptest! {
        #[test]
        fn encoding_is_injective(a in proptest::collection::vec(0u32..4, 0..5), b in proptest::collection::vec(0u32..4, 0..5)) {
            prop_assert_eq!(a == b, l(&a).encode() == l(&b).encode());
        }

        #[test]
        fn replace_preserves_antichain_and_counts(ops in proptest::collection::vec((0usize..64, 0usize..4), 1..200)) {
            let mut pop = Population::single(vec![0.0]);
            for (pick, k) in ops {
                if pop.is_empty() {
                    break;
                }
                let target = pop.iter().nth(pick % pop.len()).unwrap().0.clone();
                let before = pop.len();
                pop.replace_by_children(&target, k, &[pick as f64]).unwrap();
                prop_assert_eq!(pop.len() as isize, before as isize + k as isize - 1);
                prop_assert!(pop.is_antichain());
            }
        }
    }
}
