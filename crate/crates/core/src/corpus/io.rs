//! Line-delimited JSON corpus files.
//!
//! A corpus directory holds `vocab.json` (`{"diag": [...], "proc": [...],
//! "med": [...]}`) and `corpus.jsonl` with one patient per line:
//!
//! ```text
//! {"patient_id":"p1","split":"train","visits":[{"diag":[0,3],"proc":[],"med":[1]}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EhrCorpus, PatientRecord, Split, Visit, Vocabularies};
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Serialize, Deserialize)]
struct VocabFile {
    diag: Vec<String>,
    proc: Vec<String>,
    med: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientLine {
    patient_id: String,
    split: Split,
    visits: Vec<Visit>,
}

pub(super) fn vocab_json(vocab: &Vocabularies) -> String {
    let file = VocabFile {
        diag: vocab.diag.codes().to_vec(),
        proc: vocab.proc.codes().to_vec(),
        med: vocab.med.codes().to_vec(),
    };
    serde_json::to_string_pretty(&file).expect("vocabulary serializes")
}

pub(super) fn corpus_lines(corpus: &EhrCorpus) -> impl Iterator<Item = String> + '_ {
    corpus.patients.iter().map(|p| {
        let line = PatientLine {
            patient_id: p.patient_id.clone(),
            split: corpus.splits[&p.patient_id],
            visits: p.visits.clone(),
        };
        serde_json::to_string(&line).expect("patient serializes")
    })
}

/// Writes `vocab.json` and `corpus.jsonl` into `dir`, creating it if needed.
pub fn save_corpus(corpus: &EhrCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(VOCAB_FILE), vocab_json(&corpus.vocab) + "\n")?;
    let mut body = String::new();
    for line in corpus_lines(corpus) {
        body.push_str(&line);
        body.push('\n');
    }
    fs::write(dir.join(CORPUS_FILE), body)?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocabularies> {
    let text = fs::read_to_string(path)?;
    let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Vocabularies::new(file.diag, file.proc, file.med)
}

/// Reads a corpus directory written by [`save_corpus`] (or hand-authored in
/// the same format) and validates it.
pub fn load_corpus(dir: &Path) -> Result<EhrCorpus> {
    let vocab = load_vocab(&dir.join(VOCAB_FILE))?;
    let path = dir.join(CORPUS_FILE);
    let text = fs::read_to_string(&path)?;
    let mut patients = Vec::new();
    let mut splits = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: path.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if splits.insert(rec.patient_id.clone(), rec.split).is_some() {
            return Err(Error::Record {
                patient_id: rec.patient_id,
                message: format!("duplicate patient id on line {}", lineno + 1),
            });
        }
        patients.push(PatientRecord {
            patient_id: rec.patient_id,
            visits: rec.visits,
        });
    }
    EhrCorpus::new(vocab, patients, splits)
}
