use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::hypergraph::VisitRef;

/// A retrieved row and its inner-product score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub row: usize,
    pub score: f64,
}

/// Training-visit identities, one per index row, with a per-patient lookup
/// used by the exclusion rule.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitRows {
    refs: Vec<VisitRef>,
    by_patient: HashMap<String, Vec<usize>>,
}

impl VisitRows {
    pub fn new(refs: Vec<VisitRef>) -> Self {
        let mut by_patient: HashMap<String, Vec<usize>> = HashMap::new();
        for (r, v) in refs.iter().enumerate() {
            by_patient.entry(v.patient_id.clone()).or_default().push(r);
        }
        Self { refs, by_patient }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn refs(&self) -> &[VisitRef] {
        &self.refs
    }

    pub fn row_of(&self, patient_id: &str, position: usize) -> Option<usize> {
        self.by_patient
            .get(patient_id)?
            .iter()
            .copied()
            .find(|&r| self.refs[r].position == position)
    }

    /// Rows a query at `(patient_id, position)` may not see: that patient's
    /// visits at the same or later positions.
    pub fn excluded(&self, patient_id: &str, position: usize) -> Vec<usize> {
        self.by_patient
            .get(patient_id)
            .map(|rows| rows.iter().copied().filter(|&r| self.refs[r].position >= position).collect())
            .unwrap_or_default()
    }
}

/// Keys (health-status rows) and values (medication rows) over training
/// visits, index-aligned with [`VisitRows`].
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    keys: Mat,
    values: Mat,
    rows: Rc<VisitRows>,
}

impl RetrievalIndex {
    pub fn new(keys: Mat, values: Mat, rows: Rc<VisitRows>) -> Result<Self> {
        if keys.nrows() != rows.len() || values.nrows() != rows.len() || keys.ncols() != values.ncols() {
            return Err(Error::Dimension(format!(
                "retrieval keys {:?}, values {:?}, {} visit refs",
                keys.dim(),
                values.dim(),
                rows.len()
            )));
        }
        Ok(Self { keys, values, rows })
    }

    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn rows(&self) -> &VisitRows {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }
}

/// The query's identity, for the exclusion rule. Queries from patients
/// outside the index exclude nothing.
#[derive(Debug, Clone, Copy)]
pub struct QueryOrigin<'a> {
    pub patient_id: &'a str,
    pub position: usize,
}

static POOL_WARNED: AtomicBool = AtomicBool::new(false);

/// The `k` highest-scoring rows by inner product with `query`, best first,
/// ties broken by lower row index. Asking for more rows than the eligible
/// pool returns the whole pool (with a one-time warning).
pub fn retrieve_topk(index: &RetrievalIndex, query: ArrayView1<'_, f64>, k: usize, origin: Option<QueryOrigin<'_>>) -> Vec<Hit> {
    if k == 0 || index.is_empty() {
        return Vec::new();
    }
    let scores = index.keys.dot(&query);
    let excluded = origin.map(|o| index.rows.excluded(o.patient_id, o.position)).unwrap_or_default();
    top_k(scores.view(), k, &excluded)
}

pub(crate) fn top_k(scores: ArrayView1<'_, f64>, k: usize, excluded: &[usize]) -> Vec<Hit> {
    if k == 0 {
        return Vec::new();
    }
    let mut pool: Vec<Hit> = scores
        .iter()
        .enumerate()
        .filter(|(r, _)| !excluded.contains(r))
        // `+ 0.0` folds -0.0 into 0.0 so that signed zeros tie.
        .map(|(row, &score)| Hit { row, score: score + 0.0 })
        .collect();
    let order = |a: &Hit, b: &Hit| b.score.total_cmp(&a.score).then(a.row.cmp(&b.row));
    if k > pool.len() {
        if !POOL_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("asked for {k} similar visits but only {} are eligible; using all of them", pool.len());
        }
    } else if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, order);
        pool.truncate(k);
    }
    pool.sort_by(order);
    pool
}
