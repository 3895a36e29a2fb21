//! Pathology x modality result tables in CSV and aligned text.

use std::fmt::Write as _;

use crate::label::{CellGrid, Modality, Pathology};

pub const MISSING: &str = "-";

/// Rows are pathologies, columns modalities; `None` prints as `-`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTable {
    pub title: String,
    pub cells: CellGrid<Option<String>>,
}

impl CellTable {
    pub fn new(title: impl Into<String>, cells: CellGrid<Option<String>>) -> Self {
        Self { title: title.into(), cells }
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![std::iter::once("Pathology".to_string()).chain(Modality::ALL.iter().map(|m| m.to_string())).collect()];
        for p in Pathology::ALL {
            let mut row = vec![p.to_string()];
            for m in Modality::ALL {
                row.push(self.cells.get(crate::label::ConditionLabel::new(p, m)).clone().unwrap_or_else(|| MISSING.into()));
            }
            rows.push(row);
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        self.rows().iter().map(|r| r.join(",") + "\n").collect()
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("{}\n", self.title);
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::ConditionLabel;

    #[test]
    fn layout() {
        let t = CellTable::new(
            "FID",
            CellGrid::from_fn(|l: ConditionLabel| (l.modality != Modality::Pd).then(|| format!("{:.3}", l.cell() as f64))),
        );
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "Pathology,T1w,T1ce,T2w,FLAIR,PD");
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 6 && l.ends_with(",-")));
        let text = t.to_text();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(4).unwrap().starts_with("Glioblastoma"));
    }
}
