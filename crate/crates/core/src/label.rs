use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pathology {
    Healthy,
    Glioblastoma,
    Sclerosis,
    Dementia,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    T1w,
    T1ce,
    T2w,
    Flair,
    Pd,
}

impl Pathology {
    pub const ALL: [Pathology; 4] = [Pathology::Healthy, Pathology::Glioblastoma, Pathology::Sclerosis, Pathology::Dementia];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pathology::Healthy => "Healthy",
            Pathology::Glioblastoma => "Glioblastoma",
            Pathology::Sclerosis => "Sclerosis",
            Pathology::Dementia => "Dementia",
        }
    }
}

impl Modality {
    pub const ALL: [Modality; 5] = [Modality::T1w, Modality::T1ce, Modality::T2w, Modality::Flair, Modality::Pd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1w => "T1w",
            Modality::T1ce => "T1ce",
            Modality::T2w => "T2w",
            Modality::Flair => "FLAIR",
            Modality::Pd => "PD",
        }
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pathology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown pathology `{s}`")))
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown modality `{s}`")))
    }
}

/// A (pathology, modality) conditioning pair; one cell of the 4x5 grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionLabel {
    pub pathology: Pathology,
    pub modality: Modality,
}

impl ConditionLabel {
    pub const COUNT: usize = 20;

    pub fn new(pathology: Pathology, modality: Modality) -> Self {
        Self { pathology, modality }
    }

    /// Row-major cell index, pathology-major.
    pub fn cell(self) -> usize {
        self.pathology.index() * Modality::ALL.len() + self.modality.index()
    }

    pub fn from_cell(cell: usize) -> Option<Self> {
        Some(Self::new(
            Pathology::from_index(cell / Modality::ALL.len())?,
            Modality::from_index(cell % Modality::ALL.len())?,
        ))
    }

    pub fn all() -> impl Iterator<Item = ConditionLabel> {
        (0..Self::COUNT).filter_map(Self::from_cell)
    }

    /// Directory-friendly name, e.g. `Healthy_T1w`.
    pub fn slug(self) -> String {
        format!("{}_{}", self.pathology, self.modality)
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.pathology, self.modality)
    }
}

impl FromStr for ConditionLabel {
    type Err = Error;

    /// Accepts `Pathology/Modality` or `Pathology_Modality`.
    fn from_str(s: &str) -> Result<Self> {
        let (p, m) = s
            .split_once(['/', '_', ':'])
            .ok_or_else(|| Error::Parse(format!("expected Pathology/Modality, got `{s}`")))?;
        Ok(Self::new(p.parse()?, m.parse()?))
    }
}

/// Dense 4x5 table indexed by [`ConditionLabel`].
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid<V> {
    cells: Vec<V>,
}

impl<V: Clone> CellGrid<V> {
    pub fn filled(v: V) -> Self {
        Self { cells: vec![v; ConditionLabel::COUNT] }
    }
}

impl<V> CellGrid<V> {
    pub fn from_fn(mut f: impl FnMut(ConditionLabel) -> V) -> Self {
        Self { cells: ConditionLabel::all().map(&mut f).collect() }
    }

    pub fn get(&self, label: ConditionLabel) -> &V {
        &self.cells[label.cell()]
    }

    pub fn get_mut(&mut self, label: ConditionLabel) -> &mut V {
        &mut self.cells[label.cell()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ConditionLabel, &V)> {
        ConditionLabel::all().zip(self.cells.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_cells_round_trip() {
        let all: Vec<_> = ConditionLabel::all().collect();
        assert_eq!(all.len(), 20);
        for (i, l) in all.iter().enumerate() {
            assert_eq!(l.cell(), i);
            assert_eq!(l.to_string().parse::<ConditionLabel>().unwrap(), *l);
            assert_eq!(l.slug().parse::<ConditionLabel>().unwrap(), *l);
        }
    }

    #[test]
    fn parsing_is_case_insensitive_and_strict() {
        assert_eq!("flair".parse::<Modality>().unwrap(), Modality::Flair);
        assert_eq!("Flair".parse::<Modality>().unwrap(), Modality::Flair);
        assert!("T3w".parse::<Modality>().is_err());
        assert!("Migraine".parse::<Pathology>().is_err());
    }
}
