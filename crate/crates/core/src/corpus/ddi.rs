use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::CodeVocabulary;
use crate::error::Result;

/// Symmetric 0/1 drug–drug interaction adjacency with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DdiMatrix {
    adj: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DdiLoadReport {
    pub edges: usize,
    /// Lines naming a code outside the medication vocabulary.
    pub skipped_unknown: usize,
    pub skipped_self: usize,
}

impl DdiMatrix {
    pub fn empty(n: usize) -> Self {
        Self {
            adj: Array2::zeros((n, n)),
        }
    }

    /// Builds from index pairs; self-pairs are ignored.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::empty(n);
        for (i, j) in pairs {
            m.add_edge(i, j);
        }
        m
    }

    fn add_edge(&mut self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        self.adj[[i, j]] = 1.0;
        self.adj[[j, i]] = 1.0;
        true
    }

    pub fn len(&self) -> usize {
        self.adj.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.nrows() == 0
    }

    pub fn interacts(&self, i: usize, j: usize) -> bool {
        self.adj[[i, j]] > 0.0
    }

    pub fn num_edges(&self) -> usize {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.interacts(i, j))
            .count()
    }

    pub fn as_matrix(&self) -> &Array2<f64> {
        &self.adj
    }
}

/// Parses tab-separated medication code pairs.
pub fn parse_ddi(text: &str, med_vocab: &CodeVocabulary) -> (DdiMatrix, DdiLoadReport) {
    let mut m = DdiMatrix::empty(med_vocab.len());
    let mut report = DdiLoadReport::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            report.skipped_unknown += 1;
            continue;
        };
        match (med_vocab.index_of(a.trim()), med_vocab.index_of(b.trim())) {
            (Some(i), Some(j)) => {
                if m.add_edge(i, j) {
                    report.edges += 1;
                } else {
                    report.skipped_self += 1;
                }
            }
            _ => report.skipped_unknown += 1,
        }
    }
    if report.skipped_unknown > 0 {
        log::warn!(
            "skipped {} DDI pairs referencing unknown medication codes",
            report.skipped_unknown
        );
    }
    (m, report)
}

pub fn load_ddi(path: &Path, med_vocab: &CodeVocabulary) -> Result<(DdiMatrix, DdiLoadReport)> {
    let text = fs::read_to_string(path)?;
    Ok(parse_ddi(&text, med_vocab))
}
