//! EHR data model: vocabularies, visits, patients, splits, DDI graphs and
//! code hierarchies.

mod ddi;
mod hierarchy;
mod io;
mod preprocess;
mod synth;

pub use ddi::{load_ddi, parse_ddi, DdiLoadReport, DdiMatrix};
pub use hierarchy::{build_hierarchy, load_hierarchy, parse_edges, CodeHierarchy, ROOT_CODE};
pub use io::{load_corpus, load_vocab, save_corpus, CORPUS_FILE, VOCAB_FILE};
pub use preprocess::{assign_splits, preprocess, PreprocessConfig, SplitConfig};
pub use synth::{generate_synthetic, SynthConfig, SyntheticBundle};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Diag,
    Proc,
    Med,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Diag, Domain::Proc, Domain::Med];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Diag => "diag",
            Domain::Proc => "proc",
            Domain::Med => "med",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered set of opaque code strings for one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeVocabulary {
    domain: Domain,
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl CodeVocabulary {
    pub fn new(domain: Domain, codes: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(codes.len());
        for (i, code) in codes.iter().enumerate() {
            if index.insert(code.clone(), i).is_some() {
                return Err(Error::config(format!(
                    "duplicate {domain} code `{code}` in vocabulary"
                )));
            }
        }
        Ok(Self {
            domain,
            codes,
            index,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, idx: usize) -> Option<&str> {
        self.codes.get(idx).map(String::as_str)
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }
}

/// One vocabulary per domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub diag: CodeVocabulary,
    pub proc: CodeVocabulary,
    pub med: CodeVocabulary,
}

impl Vocabularies {
    pub fn new(diag: Vec<String>, proc: Vec<String>, med: Vec<String>) -> Result<Self> {
        Ok(Self {
            diag: CodeVocabulary::new(Domain::Diag, diag)?,
            proc: CodeVocabulary::new(Domain::Proc, proc)?,
            med: CodeVocabulary::new(Domain::Med, med)?,
        })
    }

    pub fn get(&self, domain: Domain) -> &CodeVocabulary {
        match domain {
            Domain::Diag => &self.diag,
            Domain::Proc => &self.proc,
            Domain::Med => &self.med,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.diag.len(), self.proc.len(), self.med.len()]
    }
}

/// A visit's per-domain code sets, stored as sorted, deduplicated index
/// lists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visit {
    pub diag: Vec<usize>,
    pub proc: Vec<usize>,
    pub med: Vec<usize>,
}

fn normalized(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

impl Visit {
    pub fn new(diag: Vec<usize>, proc: Vec<usize>, med: Vec<usize>) -> Self {
        Self {
            diag: normalized(diag),
            proc: normalized(proc),
            med: normalized(med),
        }
    }

    pub fn codes(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::Diag => &self.diag,
            Domain::Proc => &self.proc,
            Domain::Med => &self.med,
        }
    }

    fn codes_mut(&mut self, domain: Domain) -> &mut Vec<usize> {
        match domain {
            Domain::Diag => &mut self.diag,
            Domain::Proc => &mut self.proc,
            Domain::Med => &mut self.med,
        }
    }

    pub(crate) fn normalize(&mut self) {
        for d in Domain::ALL {
            let v = std::mem::take(self.codes_mut(d));
            *self.codes_mut(d) = normalized(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Patients with their visit sequences, vocabularies and split assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EhrCorpus {
    pub vocab: Vocabularies,
    pub patients: Vec<PatientRecord>,
    pub splits: BTreeMap<String, Split>,
}

impl EhrCorpus {
    /// Builds and validates a corpus. Every patient must have exactly one
    /// split and every code index must be inside its vocabulary.
    pub fn new(
        vocab: Vocabularies,
        mut patients: Vec<PatientRecord>,
        splits: BTreeMap<String, Split>,
    ) -> Result<Self> {
        for p in &mut patients {
            for v in &mut p.visits {
                v.normalize();
            }
        }
        let corpus = Self {
            vocab,
            patients,
            splits,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self.vocab.sizes();
        let mut seen = BTreeSet::new();
        for p in &self.patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(Error::Record {
                    patient_id: p.patient_id.clone(),
                    message: "duplicate patient id".into(),
                });
            }
            if !self.splits.contains_key(&p.patient_id) {
                return Err(Error::Record {
                    patient_id: p.patient_id.clone(),
                    message: "patient has no split assignment".into(),
                });
            }
            for (t, v) in p.visits.iter().enumerate() {
                for (d, size) in Domain::ALL.into_iter().zip(sizes) {
                    if let Some(&bad) = v.codes(d).iter().find(|&&c| c >= size) {
                        return Err(Error::Record {
                            patient_id: p.patient_id.clone(),
                            message: format!(
                                "visit {t}: {d} index {bad} out of range (vocabulary size {size})"
                            ),
                        });
                    }
                }
            }
        }
        if let Some(extra) = self.splits.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::Record {
                patient_id: extra.clone(),
                message: "split assigned to unknown patient".into(),
            });
        }
        Ok(())
    }

    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.splits.get(patient_id).copied()
    }

    pub fn patients_in(&self, split: Split) -> impl Iterator<Item = &PatientRecord> + '_ {
        self.patients
            .iter()
            .filter(move |p| self.splits.get(&p.patient_id) == Some(&split))
    }

    pub fn num_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    /// SHA-256 over the canonical serialized form (vocabulary manifest plus
    /// patient lines).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(io::vocab_json(&self.vocab).as_bytes());
        for line in io::corpus_lines(self) {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn statistics(&self) -> CorpusStatistics {
        CorpusStatistics::of(self.patients.iter())
    }
}

/// Dataset summary using the row names of the usual processed-dataset table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStatistics {
    pub patients: usize,
    pub visits: usize,
    pub avg_visits: f64,
    pub unique_diag: usize,
    pub unique_proc: usize,
    pub unique_med: usize,
    pub avg_diag: f64,
    pub avg_proc: f64,
    pub avg_med: f64,
}

impl CorpusStatistics {
    pub const ROW_NAMES: [&'static str; 9] = [
        "# of patients",
        "# of visits",
        "avg. # of visits",
        "# of unique diag. codes",
        "# of unique proc. codes",
        "# of unique med. codes",
        "avg. # of diag. per visit",
        "avg. # of proc. per visit",
        "avg. # of med. per visit",
    ];

    pub fn of<'a>(patients: impl Iterator<Item = &'a PatientRecord>) -> Self {
        let mut n_patients = 0;
        let mut n_visits = 0;
        let mut sets: [BTreeSet<usize>; 3] = Default::default();
        let mut totals = [0usize; 3];
        for p in patients {
            n_patients += 1;
            for v in &p.visits {
                n_visits += 1;
                for (k, d) in Domain::ALL.into_iter().enumerate() {
                    totals[k] += v.codes(d).len();
                    sets[k].extend(v.codes(d).iter().copied());
                }
            }
        }
        let per = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        Self {
            patients: n_patients,
            visits: n_visits,
            avg_visits: per(n_visits, n_patients),
            unique_diag: sets[0].len(),
            unique_proc: sets[1].len(),
            unique_med: sets[2].len(),
            avg_diag: per(totals[0], n_visits),
            avg_proc: per(totals[1], n_visits),
            avg_med: per(totals[2], n_visits),
        }
    }

    /// Values formatted the way the dataset table prints them.
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let int = |n: usize| {
            let s = n.to_string();
            let mut out = String::new();
            for (i, ch) in s.chars().enumerate() {
                if i > 0 && (s.len() - i) % 3 == 0 {
                    out.push(',');
                }
                out.push(ch);
            }
            out
        };
        let values = [
            int(self.patients),
            int(self.visits),
            format!("{:.2}", self.avg_visits),
            int(self.unique_diag),
            int(self.unique_proc),
            int(self.unique_med),
            format!("{:.2}", self.avg_diag),
            format!("{:.2}", self.avg_proc),
            format!("{:.2}", self.avg_med),
        ];
        Self::ROW_NAMES.into_iter().zip(values).collect()
    }

    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = Self::ROW_NAMES.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = format!("{:<width$}  {}\n", "Item", "Value");
        for (name, value) in rows {
            out.push_str(&format!("{name:<width$}  {value}\n"));
        }
        out
    }
}

/// Binary membership vector over one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHot {
    bits: Vec<bool>,
}

impl MultiHot {
    pub fn encode(indices: &[usize], len: usize) -> Result<Self> {
        let mut bits = vec![false; len];
        for &i in indices {
            *bits.get_mut(i).ok_or(Error::OutOfBounds {
                what: "multi-hot vector",
                index: i,
                len,
            })? = true;
        }
        Ok(Self { bits })
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn decode(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}
