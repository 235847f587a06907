//! Medication-set metrics and the bootstrap evaluation protocol.
//!
//! Every metric is computed per visit, averaged within each patient, then
//! averaged over patients. Undefined cases follow fixed conventions that are
//! counted in [`EvalReport::conventions`]:
//!
//! - Jaccard of two empty sets is 1.
//! - Average precision of a visit with no positive medication is 0.
//! - DDI rate of a prediction with fewer than two medications is 0.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DdiMatrix, EhrCorpus, Split, Visit};
use crate::error::{Error, Result};

mod baseline;

pub use baseline::FrequencyBaseline;

/// Ground-truth DDI rates of the two public ICU corpora, kept in reports for
/// comparison.
pub const REFERENCE_DDI_MIMIC_III: f64 = 0.0868;
pub const REFERENCE_DDI_MIMIC_IV: f64 = 0.0724;

/// One visit to score: the patient's earlier visits plus the current one.
/// Medications of `current` are never read by a recommender.
#[derive(Debug, Clone, Copy)]
pub struct VisitQuery<'a> {
    pub patient_id: &'a str,
    pub position: usize,
    pub history: &'a [Visit],
    pub current: &'a Visit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub selected: Vec<usize>,
    /// `(history, similar)` fusion weights, for models that have them.
    pub gate: Option<[f64; 2]>,
}

pub trait Recommender {
    fn recommend(&self, queries: &[VisitQuery<'_>]) -> Result<Vec<Prediction>>;
}

/// A patient's gold and predicted medications, visit by visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub patient_id: String,
    pub truth: Vec<Vec<usize>>,
    pub predicted: Vec<Vec<usize>>,
    pub probabilities: Vec<Vec<f64>>,
    pub gates: Vec<Option<[f64; 2]>>,
}

pub fn visit_jaccard(truth: &[usize], predicted: &[usize]) -> f64 {
    let inter = intersection(truth, predicted);
    let union = truth.len() + predicted.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn visit_f1(truth: &[usize], predicted: &[usize]) -> f64 {
    let inter = intersection(truth, predicted) as f64;
    let p = if predicted.is_empty() { 0.0 } else { inter / predicted.len() as f64 };
    let r = if truth.is_empty() { 0.0 } else { inter / truth.len() as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Average precision of a ranking by descending probability, ties broken by
/// lower medication index. Returns 0 when `truth` is empty.
pub fn visit_average_precision(truth: &[usize], probabilities: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &m) in order.iter().enumerate() {
        if truth.binary_search(&m).is_ok() {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    total / truth.len() as f64
}

/// Fraction of unordered predicted pairs that interact.
pub fn visit_ddi_rate(predicted: &[usize], ddi: &DdiMatrix) -> f64 {
    let mut pairs = 0usize;
    let mut bad = 0usize;
    for (i, &a) in predicted.iter().enumerate() {
        for &b in &predicted[i + 1..] {
            pairs += 1;
            if ddi.interacts(a, b) {
                bad += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        bad as f64 / pairs as f64
    }
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

fn patient_mean(patients: &[PatientOutcome], per_visit: impl Fn(&PatientOutcome, usize) -> f64) -> f64 {
    let scored: Vec<f64> = patients
        .iter()
        .filter(|p| !p.truth.is_empty())
        .map(|p| (0..p.truth.len()).map(|t| per_visit(p, t)).sum::<f64>() / p.truth.len() as f64)
        .collect();
    if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    }
}

pub fn jaccard(patients: &[PatientOutcome]) -> f64 {
    patient_mean(patients, |p, t| visit_jaccard(&p.truth[t], &p.predicted[t]))
}

pub fn f1(patients: &[PatientOutcome]) -> f64 {
    patient_mean(patients, |p, t| visit_f1(&p.truth[t], &p.predicted[t]))
}

pub fn prauc(patients: &[PatientOutcome]) -> f64 {
    patient_mean(patients, |p, t| visit_average_precision(&p.truth[t], &p.probabilities[t]))
}

pub fn ddi_rate(patients: &[PatientOutcome], ddi: &DdiMatrix) -> f64 {
    patient_mean(patients, |p, t| visit_ddi_rate(&p.predicted[t], ddi))
}

pub fn med_count(patients: &[PatientOutcome]) -> f64 {
    patient_mean(patients, |p, t| p.predicted[t].len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitScores {
    pub jaccard: f64,
    pub f1: f64,
    pub prauc: f64,
    pub ddi_rate: f64,
    pub med_count: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// How often each undefined case was hit across the evaluated visits.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConventionCounts {
    pub jaccard_both_empty: usize,
    pub ap_no_positive: usize,
    pub ddi_fewer_than_two: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScores {
    pub patient_id: String,
    pub visits: Vec<VisitScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jaccard: Summary,
    pub f1: Summary,
    pub prauc: Summary,
    pub ddi_rate: Summary,
    pub med_count: Summary,
    pub seed: u64,
    pub rounds: usize,
    pub fraction: f64,
    pub with_replacement: bool,
    pub patients: usize,
    pub conventions: ConventionCounts,
    pub reference_ddi_mimic_iii: f64,
    pub reference_ddi_mimic_iv: f64,
    pub per_patient: Vec<PatientScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub rounds: usize,
    pub fraction: f64,
    pub seed: u64,
    /// When false each round takes a sample without replacement, so
    /// `fraction = 1` evaluates every patient exactly once.
    pub with_replacement: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            fraction: 0.8,
            seed: 0,
            with_replacement: true,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("bootstrap needs at least one round"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("bootstrap fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

pub fn visit_scores(p: &PatientOutcome, t: usize, ddi: &DdiMatrix) -> VisitScores {
    VisitScores {
        jaccard: visit_jaccard(&p.truth[t], &p.predicted[t]),
        f1: visit_f1(&p.truth[t], &p.predicted[t]),
        prauc: visit_average_precision(&p.truth[t], &p.probabilities[t]),
        ddi_rate: visit_ddi_rate(&p.predicted[t], ddi),
        med_count: p.predicted[t].len() as f64,
    }
}

/// Samples `⌈fraction·N⌉` patients per round (duplicates count with
/// multiplicity) and summarises the five metrics across rounds.
pub fn bootstrap(outcomes: &[PatientOutcome], ddi: &DdiMatrix, config: &BootstrapConfig) -> Result<EvalReport> {
    config.validate()?;
    if outcomes.is_empty() {
        return Err(Error::Input("cannot evaluate an empty test split".into()));
    }
    let n = outcomes.len();
    let take = ((config.fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rounds: [Vec<f64>; 5] = Default::default();
    for _ in 0..config.rounds {
        let sample: Vec<PatientOutcome> = if config.with_replacement {
            (0..take).map(|_| outcomes[rng.random_range(0..n)].clone()).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx[..take].iter().map(|&i| outcomes[i].clone()).collect()
        };
        let values = [
            jaccard(&sample),
            f1(&sample),
            prauc(&sample),
            ddi_rate(&sample, ddi),
            med_count(&sample),
        ];
        for (slot, v) in rounds.iter_mut().zip(values) {
            slot.push(v);
        }
    }
    let mut conventions = ConventionCounts::default();
    let per_patient = outcomes
        .iter()
        .map(|p| {
            for t in 0..p.truth.len() {
                conventions.jaccard_both_empty += usize::from(p.truth[t].is_empty() && p.predicted[t].is_empty());
                conventions.ap_no_positive += usize::from(p.truth[t].is_empty());
                conventions.ddi_fewer_than_two += usize::from(p.predicted[t].len() < 2);
            }
            PatientScores {
                patient_id: p.patient_id.clone(),
                visits: (0..p.truth.len()).map(|t| visit_scores(p, t, ddi)).collect(),
            }
        })
        .collect();
    Ok(EvalReport {
        jaccard: Summary::of(&rounds[0]),
        f1: Summary::of(&rounds[1]),
        prauc: Summary::of(&rounds[2]),
        ddi_rate: Summary::of(&rounds[3]),
        med_count: Summary::of(&rounds[4]),
        seed: config.seed,
        rounds: config.rounds,
        fraction: config.fraction,
        with_replacement: config.with_replacement,
        patients: n,
        conventions,
        reference_ddi_mimic_iii: REFERENCE_DDI_MIMIC_III,
        reference_ddi_mimic_iv: REFERENCE_DDI_MIMIC_IV,
        per_patient,
    })
}

/// Runs `model` over every visit of every patient in `split` (only first
/// visits when `cold_start`), in corpus order.
pub fn collect_outcomes(
    model: &dyn Recommender,
    corpus: &EhrCorpus,
    split: Split,
    cold_start: bool,
) -> Result<Vec<PatientOutcome>> {
    let patients: Vec<_> = corpus.patients_in(split).filter(|p| !p.visits.is_empty()).collect();
    let mut queries = Vec::new();
    for p in &patients {
        let upto = if cold_start { 1 } else { p.visits.len() };
        for t in 0..upto {
            queries.push(VisitQuery {
                patient_id: &p.patient_id,
                position: t,
                history: &p.visits[..t],
                current: &p.visits[t],
            });
        }
    }
    let mut preds = model.recommend(&queries)?.into_iter();
    let mut out = Vec::with_capacity(patients.len());
    for p in patients {
        let upto = if cold_start { 1 } else { p.visits.len() };
        let mut o = PatientOutcome {
            patient_id: p.patient_id.clone(),
            truth: Vec::with_capacity(upto),
            predicted: Vec::with_capacity(upto),
            probabilities: Vec::with_capacity(upto),
            gates: Vec::with_capacity(upto),
        };
        for v in &p.visits[..upto] {
            let pred = preds
                .next()
                .ok_or_else(|| Error::Input("recommender returned too few predictions".into()))?;
            o.truth.push(v.med.clone());
            o.predicted.push(pred.selected);
            o.probabilities.push(pred.probabilities);
            o.gates.push(pred.gate);
        }
        out.push(o);
    }
    Ok(out)
}

pub fn evaluate(
    model: &dyn Recommender,
    corpus: &EhrCorpus,
    split: Split,
    cold_start: bool,
    ddi: &DdiMatrix,
    config: &BootstrapConfig,
) -> Result<EvalReport> {
    let outcomes = collect_outcomes(model, corpus, split, cold_start)?;
    bootstrap(&outcomes, ddi, config)
}

impl EvalReport {
    /// Aligned text table with one row per model.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>15}  {:>15}  {:>15}  {:>15}  {:>15}",
            "Model", "Jaccard", "F1", "PRAUC", "DDI", "#Med"
        );
        for (name, r) in rows {
            let cell = |m: Summary| format!("{:.4}±{:.4}", m.mean, m.std);
            let _ = writeln!(
                s,
                "{:<width$}  {:>15}  {:>15}  {:>15}  {:>15}  {:>15}",
                name,
                cell(r.jaccard),
                cell(r.f1),
                cell(r.prauc),
                cell(r.ddi_rate),
                format!("{:.2}±{:.2}", r.med_count.mean, r.med_count.std),
            );
        }
        s
    }
}
