use super::{Prediction, Recommender, VisitQuery};
use crate::corpus::{EhrCorpus, Split};
use crate::error::Result;

/// Predicts the same medications for every visit: the `size` most frequent
/// ones in the training split, where `size` is the rounded mean training
/// set size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBaseline {
    pub frequencies: Vec<f64>,
    pub selected: Vec<usize>,
}

impl FrequencyBaseline {
    pub fn fit(corpus: &EhrCorpus) -> Self {
        let n = corpus.vocab.med.len();
        let mut counts = vec![0usize; n];
        let mut visits = 0usize;
        let mut total = 0usize;
        for p in corpus.patients_in(Split::Train) {
            for v in &p.visits {
                visits += 1;
                total += v.med.len();
                for &m in &v.med {
                    counts[m] += 1;
                }
            }
        }
        let size = if visits == 0 { 0 } else { (total as f64 / visits as f64).round() as usize };
        Self::from_counts(&counts, visits, size)
    }

    pub fn from_counts(counts: &[usize], visits: usize, size: usize) -> Self {
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut selected: Vec<usize> = order.into_iter().take(size).collect();
        selected.sort_unstable();
        let frequencies = counts
            .iter()
            .map(|&c| if visits == 0 { 0.0 } else { c as f64 / visits as f64 })
            .collect();
        Self { frequencies, selected }
    }
}

impl Recommender for FrequencyBaseline {
    fn recommend(&self, queries: &[VisitQuery<'_>]) -> Result<Vec<Prediction>> {
        Ok(queries
            .iter()
            .map(|_| Prediction {
                probabilities: self.frequencies.clone(),
                selected: self.selected.clone(),
                gate: None,
            })
            .collect())
    }
}
