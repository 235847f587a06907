use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Domain, EhrCorpus, PatientRecord, Split, Visit, Vocabularies};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Codes seen in fewer visits than this are removed.
    pub min_code_freq: usize,
    /// Patients with fewer remaining visits are removed.
    pub min_visits: usize,
    /// Repeat the filter until nothing changes. Off by default: codes are
    /// counted once on the raw corpus, then vocabularies are rebuilt once.
    pub until_stable: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_code_freq: 1,
            min_visits: 2,
            until_stable: false,
        }
    }
}

/// Frequency filter, visit/patient filter, then dense re-indexing.
///
/// Order of operations: count each code's visit frequency over the whole
/// corpus; drop codes below `min_code_freq` from every visit; drop visits
/// left without diagnoses or medications; drop patients with fewer than
/// `min_visits` visits; rebuild every vocabulary from the codes still
/// referenced, preserving their original relative order.
pub fn preprocess(raw: &EhrCorpus, config: &PreprocessConfig) -> Result<EhrCorpus> {
    if config.min_visits < 2 {
        return Err(Error::config("min_visits must be at least 2"));
    }
    let mut current = filter_once(raw, config)?;
    if config.until_stable {
        loop {
            let next = filter_once(&current, config)?;
            if next == current {
                break;
            }
            current = next;
        }
    }
    Ok(current)
}

fn filter_once(raw: &EhrCorpus, config: &PreprocessConfig) -> Result<EhrCorpus> {
    let sizes = raw.vocab.sizes();
    let mut freq: [Vec<usize>; 3] = [vec![0; sizes[0]], vec![0; sizes[1]], vec![0; sizes[2]]];
    for v in raw.patients.iter().flat_map(|p| &p.visits) {
        for (k, d) in Domain::ALL.into_iter().enumerate() {
            for &c in v.codes(d) {
                freq[k][c] += 1;
            }
        }
    }
    let keep_code = |k: usize, c: usize| freq[k][c] >= config.min_code_freq;

    let mut patients = Vec::new();
    for p in &raw.patients {
        let visits: Vec<Visit> = p
            .visits
            .iter()
            .map(|v| {
                let f = |k: usize, codes: &[usize]| {
                    codes.iter().copied().filter(|&c| keep_code(k, c)).collect()
                };
                Visit {
                    diag: f(0, &v.diag),
                    proc: f(1, &v.proc),
                    med: f(2, &v.med),
                }
            })
            .filter(|v| !v.diag.is_empty() && !v.med.is_empty())
            .collect();
        if visits.len() >= config.min_visits {
            patients.push(PatientRecord {
                patient_id: p.patient_id.clone(),
                visits,
            });
        }
    }
    if patients.is_empty() {
        return Err(Error::CorpusExhausted);
    }

    // Dense re-indexing over the codes that are still referenced.
    let mut used: [Vec<bool>; 3] = [vec![false; sizes[0]], vec![false; sizes[1]], vec![false; sizes[2]]];
    for v in patients.iter().flat_map(|p| &p.visits) {
        for (k, d) in Domain::ALL.into_iter().enumerate() {
            for &c in v.codes(d) {
                used[k][c] = true;
            }
        }
    }
    let mut remap: [Vec<Option<usize>>; 3] = Default::default();
    let mut codes: [Vec<String>; 3] = Default::default();
    for (k, d) in Domain::ALL.into_iter().enumerate() {
        let vocab = raw.vocab.get(d);
        remap[k] = vec![None; sizes[k]];
        for (old, &u) in used[k].iter().enumerate() {
            if u {
                remap[k][old] = Some(codes[k].len());
                codes[k].push(vocab.codes()[old].clone());
            }
        }
    }
    for v in patients.iter_mut().flat_map(|p| p.visits.iter_mut()) {
        for (k, list) in [&mut v.diag, &mut v.proc, &mut v.med].into_iter().enumerate() {
            for c in list.iter_mut() {
                *c = remap[k][*c].expect("referenced code is kept");
            }
        }
    }
    let [diag, proc, med] = codes;
    let vocab = Vocabularies::new(diag, proc, med)?;
    let splits = patients
        .iter()
        .map(|p| {
            let s = raw.splits.get(&p.patient_id).copied().unwrap_or(Split::Train);
            (p.patient_id.clone(), s)
        })
        .collect();
    EhrCorpus::new(vocab, patients, splits)
}

/// Patient-level sequential split: the first `train_fraction` of patients
/// train, the next half of the remainder test, the rest validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 2.0 / 3.0,
        }
    }
}

pub fn assign_splits(corpus: &mut EhrCorpus, config: &SplitConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::config("train_fraction must lie in [0, 1]"));
    }
    let n = corpus.patients.len();
    let n_train = ((n as f64) * config.train_fraction).floor() as usize;
    let n_test = (n - n_train) / 2;
    let mut splits = BTreeMap::new();
    for (i, p) in corpus.patients.iter().enumerate() {
        let s = if i < n_train {
            Split::Train
        } else if i < n_train + n_test {
            Split::Test
        } else {
            Split::Val
        };
        splits.insert(p.patient_id.clone(), s);
    }
    corpus.splits = splits;
    Ok(())
}
