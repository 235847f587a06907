//! Stage-two medication recommender.
//!
//! A visit is scored from two channels. The history channel attends from
//! the visit's health status (built from diagnoses and procedures) over the
//! patient's recent visits. The similar-visit channel retrieves the
//! training visits whose health-status rows score highest against it and
//! attends over their medication rows. A small gate mixes the two, and
//! medication probabilities are sigmoids of inner products with the
//! medication embedding table.
//!
//! All embedding tables start from the pretrained export (or random values)
//! and are fine-tuned unless frozen.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{concat_cols, Adaptive, AdaptiveConfig, Bound, Csr, Mat, ParamStore, Tape, Var};
use crate::checkpoint;
use crate::corpus::{DdiMatrix, Domain, EhrCorpus, Split, Visit};
use crate::error::{Error, Result};
use crate::hypergraph::VisitRef;
use crate::medrep::PretrainedEmbeddings;
use crate::metrics::{self, Prediction, Recommender, VisitQuery};
use crate::nn::{self, multi_head_attention, AttentionWeights};

mod losses;
mod retrieval;

pub use losses::{
    alignment_loss, bce_loss, ddi_loss, multilabel_margin_loss, orthogonality_loss, total_loss, LossTerms,
    LossWeights, EPS,
};
pub use retrieval::{retrieve_topk, Hit, QueryOrigin, RetrievalIndex, VisitRows};

pub const SIMMR_ARRAYS: &str = "simmr.ckpt";
pub const SIMMR_SIDECAR: &str = "simmr.json";
pub const SIMMR_FORMAT_VERSION: u32 = 1;

/// Queries scored per tape at inference time.
const INFERENCE_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimmrConfig {
    /// Embedding width; must match the pretrained tables when present.
    pub dim: usize,
    pub heads: usize,
    /// Most recent past visits attended by the history channel.
    pub window: usize,
    /// Similar training visits retrieved per query.
    pub k_sim: usize,
    /// Medications with probability `>= threshold` are selected.
    pub threshold: f64,
    /// Temperature of the alignment contrast.
    pub tau: f64,
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    /// Dropout on the fused visit vector during training.
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Query/key projections start as this multiple of the identity, so that
    /// attention initially favours rows similar to the query.
    pub attention_sharpness: f64,
    pub seed: u64,
    pub no_sim: bool,
    pub no_hist: bool,
    pub freeze_embeddings: bool,
}

impl Default for SimmrConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            window: 8,
            k_sim: 10,
            threshold: 0.5,
            tau: 0.5,
            weights: LossWeights::default(),
            lr: 1e-3,
            weight_decay: 1e-5,
            dropout: 0.0,
            batch_size: 16,
            epochs: 50,
            attention_sharpness: 1.0,
            seed: 0,
            no_sim: false,
            no_hist: false,
            freeze_embeddings: false,
        }
    }
}

impl SimmrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dimension {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("alignment temperature must be positive"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("learning rate must be positive and weight decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.weights.validate()
    }

    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn uses_similar(&self) -> bool {
        !self.no_sim && self.k_sim > 0
    }
}

/// Where a trained model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_digest: String,
    /// Digest of the pretrained tables, absent for random initialisation.
    pub medrep_digest: Option<String>,
    pub config_digest: String,
    /// Hash over the three fields above.
    pub chain: String,
}

impl Provenance {
    fn new(corpus_digest: String, medrep_digest: Option<String>, config_digest: String) -> Self {
        let chain = checkpoint::chain_hash(&[
            &corpus_digest,
            medrep_digest.as_deref().unwrap_or("random-init"),
            &config_digest,
        ]);
        Self {
            corpus_digest,
            medrep_digest,
            config_digest,
            chain,
        }
    }
}

/// Everything computed for one visit, for inspection and logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitContext {
    pub diag: Vec<f64>,
    pub proc: Vec<f64>,
    pub health: Vec<f64>,
    pub hist: Vec<f64>,
    pub sim: Vec<f64>,
    pub fused: Vec<f64>,
    pub alpha_hist: f64,
    pub alpha_sim: f64,
    pub probabilities: Vec<f64>,
    pub selected: Vec<usize>,
    pub retrieved: Vec<Hit>,
}

/// Gate MLP parameters.
#[derive(Clone, Copy)]
pub struct GateWeights<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// Mean-pools each row's codes from `table`, then attends from the pooled
/// vector over the full table. An empty row pools to zero and so attends
/// uniformly.
pub fn visit_representation<'t, S: AsRef<[usize]>>(
    sets: &[S],
    table: Var<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
) -> Var<'t> {
    let pooled = table.left_sparse_mul(Rc::new(Csr::mean_rows(sets, table.shape().0)));
    multi_head_attention(pooled, table, table, w, heads, None, None).0
}

/// Linear map of `[diag ‖ proc]` back to the embedding width.
pub fn health_status<'t>(diag: Var<'t>, proc: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    concat_cols(&[diag, proc]).matmul(w).add(b)
}

/// `health + attention(health, past)`; rows whose mask is all zero (no
/// past visits) pass `health` through unchanged.
pub fn historical_channel<'t>(
    health: Var<'t>,
    past: Var<'t>,
    mask: Option<Rc<Mat>>,
    w: &AttentionWeights<'t>,
    heads: usize,
) -> Var<'t> {
    health.add(multi_head_attention(health, past, past, w, heads, None, mask).0)
}

/// Attention from `health` over retrieved health-status keys onto their
/// medication values.
pub fn similar_channel<'t>(
    health: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    mask: Option<Rc<Mat>>,
    w: &AttentionWeights<'t>,
    heads: usize,
) -> Var<'t> {
    multi_head_attention(health, keys, values, w, heads, None, mask).0
}

/// Returns the fused vectors and the `B x 2` gate weights. A mask entry of
/// 0 removes that channel for that row.
pub fn fuse_channels<'t>(
    hist: Var<'t>,
    sim: Var<'t>,
    g: &GateWeights<'t>,
    mask: Option<Rc<Mat>>,
) -> (Var<'t>, Var<'t>) {
    let logits = concat_cols(&[hist, sim]).matmul(g.w1).add(g.b1).tanh().matmul(g.w2).add(g.b2);
    let alpha = logits.softmax_rows(mask);
    let fused = hist.mul(alpha.slice_cols(0, 1)).add(sim.mul(alpha.slice_cols(1, 2)));
    (fused, alpha)
}

/// Sigmoid of inner products with every medication row.
pub fn predict<'t>(fused: Var<'t>, meds: Var<'t>) -> Var<'t> {
    fused.matmul(meds.t()).sigmoid()
}

pub fn select(probabilities: &[f64], threshold: f64) -> Vec<usize> {
    probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Tape values of one forward pass over a batch.
struct Pass<'t> {
    diag: Var<'t>,
    proc: Var<'t>,
    meds: Var<'t>,
    health: Var<'t>,
    hist: Var<'t>,
    sim: Var<'t>,
    fused: Var<'t>,
    alpha: Var<'t>,
    probs: Var<'t>,
    hits: Vec<Vec<Hit>>,
}

#[derive(Debug, Clone)]
pub struct SimmrModel {
    config: SimmrConfig,
    params: ParamStore,
    rows: Rc<VisitRows>,
    vocab_sizes: [usize; 3],
    provenance: Provenance,
}

fn table_name(kind: &str, d: Domain) -> String {
    format!("{kind}.{d}")
}

fn init_attention(p: &mut ParamStore, prefix: &str, dim: usize, sharpness: f64, rng: &mut ChaCha8Rng) {
    for role in ["q", "k"] {
        let w = nn::identity(dim) * sharpness + nn::uniform(rng, dim, dim, 0.01);
        p.insert(format!("{prefix}.{role}"), w);
    }
    p.insert(format!("{prefix}.v"), nn::identity(dim));
    p.insert(format!("{prefix}.o"), nn::identity(dim));
}

fn training_rows(corpus: &EhrCorpus) -> VisitRows {
    VisitRows::new(
        corpus
            .patients_in(Split::Train)
            .flat_map(|p| {
                (0..p.visits.len()).map(|position| VisitRef {
                    patient_id: p.patient_id.clone(),
                    position,
                })
            })
            .collect(),
    )
}

impl SimmrModel {
    /// Initialises a model for `corpus`. Tables come from `pretrained` when
    /// given (which must descend from the same corpus), otherwise they are
    /// drawn uniformly with unit variance per entry.
    pub fn new(corpus: &EhrCorpus, pretrained: Option<&PretrainedEmbeddings>, config: SimmrConfig) -> Result<Self> {
        config.validate()?;
        let sizes = corpus.vocab.sizes();
        let corpus_digest = corpus.digest();
        let rows = training_rows(corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let mut p = ParamStore::new();
        match pretrained {
            Some(pre) => {
                if pre.corpus_digest != corpus_digest {
                    return Err(Error::Lineage(
                        "pretrained embeddings were built from a different corpus".into(),
                    ));
                }
                if pre.dim() != d {
                    return Err(Error::Dimension(format!(
                        "pretrained width {} but recommender width {d}",
                        pre.dim()
                    )));
                }
                pre.check_vocab(sizes)?;
                for dom in Domain::ALL {
                    p.insert(table_name("entities", dom), pre.entities(dom).clone());
                    let lookup: HashMap<(&str, usize), usize> = pre.visit_ref[dom as usize]
                        .iter()
                        .enumerate()
                        .map(|(e, r)| ((r.patient_id.as_str(), r.position), e))
                        .collect();
                    let src = pre.visits(dom);
                    let mut table = Mat::zeros((rows.len(), d));
                    for (r, v) in rows.refs().iter().enumerate() {
                        if let Some(&e) = lookup.get(&(v.patient_id.as_str(), v.position)) {
                            table.row_mut(r).assign(&src.row(e));
                        }
                    }
                    p.insert(table_name("visits", dom), table);
                }
            }
            None => {
                let bound = 3f64.sqrt();
                for dom in Domain::ALL {
                    p.insert(table_name("entities", dom), nn::uniform(&mut rng, sizes[dom as usize], d, bound));
                    p.insert(table_name("visits", dom), nn::uniform(&mut rng, rows.len(), d, bound));
                }
            }
        }
        for dom in Domain::ALL {
            init_attention(&mut p, &format!("pool.{dom}"), d, config.attention_sharpness, &mut rng);
        }
        init_attention(&mut p, "hist", d, config.attention_sharpness, &mut rng);
        init_attention(&mut p, "sim", d, config.attention_sharpness, &mut rng);
        let mut stacked = Mat::zeros((2 * d, d));
        stacked.slice_mut(ndarray::s![..d, ..]).assign(&nn::identity(d));
        stacked.slice_mut(ndarray::s![d.., ..]).assign(&nn::identity(d));
        p.insert("health.w", stacked);
        p.insert("health.b", Mat::zeros((1, d)));
        p.insert("gate.w1", nn::xavier(&mut rng, 2 * d, d));
        p.insert("gate.b1", Mat::zeros((1, d)));
        p.insert("gate.w2", nn::xavier(&mut rng, d, 2));
        p.insert("gate.b2", Mat::zeros((1, 2)));

        let provenance = Provenance::new(corpus_digest, pretrained.map(|e| e.digest()), config.digest());
        Ok(Self {
            config,
            params: p,
            rows: Rc::new(rows),
            vocab_sizes: sizes,
            provenance,
        })
    }

    pub fn config(&self) -> &SimmrConfig {
        &self.config
    }

    /// Mutable access for settings that do not change the parameters'
    /// shapes (threshold, ablation switches, retrieval count, window).
    pub fn config_mut(&mut self) -> &mut SimmrConfig {
        &mut self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn training_visits(&self) -> &VisitRows {
        &self.rows
    }

    /// Index over the current table values.
    pub fn retrieval_index(&self) -> RetrievalIndex {
        let keys = self.params.expect("visits.diag") + self.params.expect("visits.proc");
        RetrievalIndex::new(keys, self.params.expect("visits.med").clone(), Rc::clone(&self.rows))
            .expect("tables are row-aligned")
    }

    fn attention<'t>(b: &Bound<'t>, prefix: &str) -> AttentionWeights<'t> {
        AttentionWeights {
            query: b.var(&format!("{prefix}.q")),
            key: b.var(&format!("{prefix}.k")),
            value: b.var(&format!("{prefix}.v")),
            output: b.var(&format!("{prefix}.o")),
        }
    }

    fn gate<'t>(b: &Bound<'t>) -> GateWeights<'t> {
        GateWeights {
            w1: b.var("gate.w1"),
            b1: b.var("gate.b1"),
            w2: b.var("gate.w2"),
            b2: b.var("gate.b2"),
        }
    }

    fn check_visit(&self, v: &Visit, q: &VisitQuery<'_>) -> Result<()> {
        for dom in Domain::ALL {
            let n = self.vocab_sizes[dom as usize];
            if let Some(bad) = v.codes(dom).iter().find(|&&c| c >= n) {
                return Err(Error::Input(format!(
                    "patient `{}` visit {}: {dom} code index {bad} outside vocabulary of {n}",
                    q.patient_id, q.position
                )));
            }
        }
        Ok(())
    }

    /// One batched forward pass. `with_labels` feeds the current visits'
    /// medications into their medication representation (used only by the
    /// alignment loss).
    fn forward<'t>(
        &self,
        b: &Bound<'t>,
        queries: &[VisitQuery<'_>],
        with_labels: bool,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Pass<'t>> {
        let c = &self.config;
        let n = queries.len();
        let empty: &[usize] = &[];
        let mut sets: [Vec<&[usize]>; 3] = Default::default();
        for q in queries {
            self.check_visit(q.current, q)?;
            sets[0].push(&q.current.diag);
            sets[1].push(&q.current.proc);
            sets[2].push(if with_labels { &q.current.med } else { empty });
        }
        let mut past: Vec<Vec<usize>> = vec![Vec::new(); n];
        if !c.no_hist {
            for (i, q) in queries.iter().enumerate() {
                let start = q.history.len().saturating_sub(c.window);
                for v in &q.history[start..] {
                    self.check_visit(v, q)?;
                    past[i].push(sets[0].len());
                    for dom in Domain::ALL {
                        sets[dom as usize].push(v.codes(dom));
                    }
                }
            }
        }

        let reps = Domain::ALL.map(|dom| {
            let w = Self::attention(b, &format!("pool.{dom}"));
            visit_representation(&sets[dom as usize], b.var(&table_name("entities", dom)), &w, c.heads)
        });
        let current = Rc::new((0..n).collect::<Vec<_>>());
        let head = |v: Var<'t>| if v.shape().0 == n { v } else { v.gather_rows(Rc::clone(&current)) };
        let (diag, proc, meds) = (head(reps[0]), head(reps[1]), head(reps[2]));
        let health = health_status(diag, proc, b.var("health.w"), b.var("health.b"));

        let total_past: usize = past.iter().map(Vec::len).sum();
        let hist = if total_past == 0 {
            health
        } else {
            let (flat, mask) = block_mask(&past);
            let stacked = reps[0].add(reps[1]).add(reps[2]).gather_rows(Rc::new(flat));
            historical_channel(health, stacked, Some(Rc::new(mask)), &Self::attention(b, "hist"), c.heads)
        };

        let mut hits = vec![Vec::new(); n];
        if c.uses_similar() && !self.rows.is_empty() {
            let keys = self.params.expect("visits.diag") + self.params.expect("visits.proc");
            let scores = health.value().dot(&keys.t());
            for (i, q) in queries.iter().enumerate() {
                let excluded = self.rows.excluded(q.patient_id, q.position);
                hits[i] = retrieval::top_k(scores.row(i), c.k_sim, &excluded);
            }
        }
        let hit_rows: Vec<Vec<usize>> = hits.iter().map(|h| h.iter().map(|x| x.row).collect()).collect();
        let sim = if hit_rows.iter().all(Vec::is_empty) {
            b.var("health.b").tape().constant(Mat::zeros((n, c.dim)))
        } else {
            let (flat, mask) = block_mask(&hit_rows);
            let idx = Rc::new(flat);
            let keys = b
                .var("visits.diag")
                .gather_rows(Rc::clone(&idx))
                .add(b.var("visits.proc").gather_rows(Rc::clone(&idx)));
            let values = b.var("visits.med").gather_rows(idx);
            similar_channel(health, keys, values, Some(Rc::new(mask)), &Self::attention(b, "sim"), c.heads)
        };

        // Empty retrieval removes the similar channel from the softmax, so
        // that visit is scored exactly as with the channel disabled.
        let mut gate_mask = Mat::zeros((n, 2));
        for i in 0..n {
            let hist_ok = !c.no_hist;
            gate_mask[[i, 0]] = f64::from(u8::from(hist_ok));
            gate_mask[[i, 1]] = f64::from(u8::from(!hits[i].is_empty() || !hist_ok));
        }
        let (mut fused, alpha) = fuse_channels(hist, sim, &Self::gate(b), Some(Rc::new(gate_mask)));
        if let Some(rng) = dropout {
            if c.dropout > 0.0 {
                let keep = 1.0 - c.dropout;
                let m = Mat::from_shape_simple_fn((n, c.dim), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                fused = fused.mul(fused.tape().constant(m));
            }
        }
        let probs = predict(fused, b.var("entities.med"));
        Ok(Pass {
            diag,
            proc,
            meds,
            health,
            hist,
            sim,
            fused,
            alpha,
            probs,
            hits,
        })
    }

    /// Per-visit channel vectors, gate weights and predictions. Current
    /// medications are never read.
    pub fn contexts(&self, queries: &[VisitQuery<'_>]) -> Result<Vec<VisitContext>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(INFERENCE_CHUNK) {
            let tape = Tape::new();
            let b = self.params.bind_with(&tape, |_| false);
            let pass = self.forward(&b, chunk, false, None)?;
            let vals = [
                pass.diag.value(),
                pass.proc.value(),
                pass.health.value(),
                pass.hist.value(),
                pass.sim.value(),
                pass.fused.value(),
                pass.probs.value(),
            ];
            let alpha = pass.alpha.value();
            for (i, hits) in pass.hits.into_iter().enumerate() {
                let row = |k: usize| vals[k].row(i).to_vec();
                let probabilities = row(6);
                if probabilities.iter().any(|p| !p.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite probabilities for patient `{}` visit {}",
                        chunk[i].patient_id, chunk[i].position
                    )));
                }
                out.push(VisitContext {
                    diag: row(0),
                    proc: row(1),
                    health: row(2),
                    hist: row(3),
                    sim: row(4),
                    fused: row(5),
                    alpha_hist: alpha[[i, 0]],
                    alpha_sim: alpha[[i, 1]],
                    selected: select(&probabilities, self.config.threshold),
                    probabilities,
                    retrieved: hits,
                });
            }
        }
        Ok(out)
    }

    /// Objective on one batch of training visits, plus per-term values.
    pub fn batch_loss<'t>(
        &self,
        b: &Bound<'t>,
        queries: &[VisitQuery<'_>],
        ddi: &DdiMatrix,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, [f64; 5])> {
        let c = &self.config;
        let n = queries.len();
        let pass = self.forward(b, queries, true, dropout)?;
        let m = self.vocab_sizes[Domain::Med as usize];
        let mut labels = Mat::zeros((n, m));
        for (i, q) in queries.iter().enumerate() {
            for &j in &q.current.med {
                labels[[i, j]] = 1.0;
            }
        }
        let tape = pass.probs.tape();
        let zero = tape.scalar(0.0);
        let bce = bce_loss(pass.probs, &labels).mean();
        let multi = multilabel_margin_loss(pass.probs, &labels).mean();
        let ddi_term = ddi_loss(pass.probs, ddi.as_matrix()).mean();
        let both = c.uses_similar() && !c.no_hist;
        let orth = if both { orthogonality_loss(pass.hist, pass.sim).0.mean() } else { zero };
        let align = if c.uses_similar() {
            let rows: Option<Vec<usize>> = queries
                .iter()
                .map(|q| self.rows.row_of(q.patient_id, q.position))
                .collect();
            let rows = rows.ok_or_else(|| Error::Input("alignment needs training visits".into()))?;
            let idx = Rc::new(rows);
            let keys = b
                .var("visits.diag")
                .gather_rows(Rc::clone(&idx))
                .add(b.var("visits.proc").gather_rows(Rc::clone(&idx)));
            let values = b.var("visits.med").gather_rows(idx);
            alignment_loss(pass.health, pass.meds, keys, values, c.tau)?
        } else {
            zero
        };
        let terms = LossTerms {
            bce,
            multi,
            ddi: ddi_term,
            align,
            orth,
        };
        let total = total_loss(&terms, &c.weights)?;
        Ok((total, [bce.item(), multi.item(), ddi_term.item(), align.item(), orth.item()]))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save_arrays(&self.params, &dir.join(SIMMR_ARRAYS))?;
        checkpoint::save_json(
            &Sidecar {
                format_version: SIMMR_FORMAT_VERSION,
                config: self.config.clone(),
                vocab_sizes: self.vocab_sizes,
                training_visits: self.rows.refs().to_vec(),
                provenance: self.provenance.clone(),
                params_digest: checkpoint::digest_arrays(&self.params),
            },
            &dir.join(SIMMR_SIDECAR),
        )
    }

    /// Loads a checkpoint; with `corpus` given, refuses one trained on a
    /// different corpus.
    pub fn load(dir: &Path, corpus: Option<&EhrCorpus>) -> Result<Self> {
        let side: Sidecar = checkpoint::load_json(&dir.join(SIMMR_SIDECAR))?;
        if side.format_version != SIMMR_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "recommender format version {}, expected {SIMMR_FORMAT_VERSION}",
                side.format_version
            )));
        }
        let params = checkpoint::load_arrays(&dir.join(SIMMR_ARRAYS))?;
        if checkpoint::digest_arrays(&params) != side.params_digest {
            return Err(Error::Checkpoint(format!("{SIMMR_ARRAYS} does not match its sidecar digest")));
        }
        let p = &side.provenance;
        let expected = Provenance::new(p.corpus_digest.clone(), p.medrep_digest.clone(), p.config_digest.clone());
        if expected.chain != p.chain {
            return Err(Error::Lineage("recommender provenance chain is inconsistent".into()));
        }
        if let Some(c) = corpus {
            if c.digest() != p.corpus_digest {
                return Err(Error::Lineage("recommender was trained on a different corpus".into()));
            }
            if c.vocab.sizes() != side.vocab_sizes {
                return Err(Error::Dimension("vocabulary sizes differ from the checkpoint".into()));
            }
        }
        side.config.validate()?;
        Ok(Self {
            config: side.config,
            params,
            rows: Rc::new(VisitRows::new(side.training_visits)),
            vocab_sizes: side.vocab_sizes,
            provenance: side.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: SimmrConfig,
    vocab_sizes: [usize; 3],
    training_visits: Vec<VisitRef>,
    provenance: Provenance,
    params_digest: String,
}

/// Flattens per-query row lists and builds the matching `queries x rows`
/// 0/1 mask so each query attends only to its own rows.
fn block_mask(groups: &[Vec<usize>]) -> (Vec<usize>, Mat) {
    let total: usize = groups.iter().map(Vec::len).sum();
    let mut flat = Vec::with_capacity(total);
    let mut mask = Mat::zeros((groups.len(), total));
    for (i, g) in groups.iter().enumerate() {
        for &r in g {
            mask[[i, flat.len()]] = 1.0;
            flat.push(r);
        }
    }
    (flat, mask)
}

impl Recommender for SimmrModel {
    fn recommend(&self, queries: &[VisitQuery<'_>]) -> Result<Vec<Prediction>> {
        Ok(self
            .contexts(queries)?
            .into_iter()
            .map(|c| Prediction {
                probabilities: c.probabilities,
                selected: c.selected,
                gate: Some([c.alpha_hist, c.alpha_sim]),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch objective.
    pub loss: f64,
    /// Mean `[bce, margin, ddi, alignment, orthogonality]` over batches.
    pub terms: [f64; 5],
    pub val_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (last epoch without validation
    /// patients).
    pub best_epoch: Option<usize>,
    pub best_val_jaccard: Option<f64>,
}

/// Trains on every training visit for `config.epochs` epochs and keeps the
/// parameters with the best validation Jaccard.
pub fn train_simmr(
    corpus: &EhrCorpus,
    pretrained: Option<&PretrainedEmbeddings>,
    ddi: &DdiMatrix,
    config: &SimmrConfig,
) -> Result<(SimmrModel, TrainReport)> {
    let mut model = SimmrModel::new(corpus, pretrained, config.clone())?;
    let m = corpus.vocab.med.len();
    if ddi.len() != m {
        return Err(Error::Dimension(format!("DDI matrix is {0}x{0} for {m} medications", ddi.len())));
    }
    let train: Vec<_> = corpus.patients_in(Split::Train).collect();
    let mut items: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.visits.len()).map(move |t| (i, t)))
        .collect();
    let has_val = corpus.patients_in(Split::Val).next().is_some();
    let frozen = config.freeze_embeddings;
    let mut opt = Adaptive::new(AdaptiveConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdaptiveConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: None,
        best_val_jaccard: None,
    };
    let mut best = model.params.clone();

    for epoch in 1..=config.epochs {
        items.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut term_sum = [0.0; 5];
        let mut batches = 0usize;
        for (bi, batch) in items.chunks(config.batch_size).enumerate() {
            let queries: Vec<VisitQuery<'_>> = batch
                .iter()
                .map(|&(i, t)| VisitQuery {
                    patient_id: &train[i].patient_id,
                    position: t,
                    history: &train[i].visits[..t],
                    current: &train[i].visits[t],
                })
                .collect();
            let tape = Tape::new();
            let bound = model
                .params
                .bind_with(&tape, |name| !(frozen && (name.starts_with("entities.") || name.starts_with("visits."))));
            let (loss, terms) = model.batch_loss(&bound, &queries, ddi, Some(&mut rng))?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "recommender loss diverged at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            let grads = bound.gradients(&tape.backward(loss));
            drop(bound);
            opt.step(&mut model.params, &grads);
            loss_sum += value;
            for (s, t) in term_sum.iter_mut().zip(terms) {
                *s += t;
            }
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        let val_jaccard = if has_val {
            let outcomes = metrics::collect_outcomes(&model, corpus, Split::Val, false)?;
            Some(metrics::jaccard(&outcomes))
        } else {
            None
        };
        let improved = match (val_jaccard, report.best_val_jaccard) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = model.params.clone();
            report.best_epoch = Some(epoch);
            report.best_val_jaccard = val_jaccard;
        }
        log::debug!("epoch {epoch}: loss {:.4}, val jaccard {val_jaccard:?}", loss_sum / denom);
        report.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / denom,
            terms: term_sum.map(|s| s / denom),
            val_jaccard,
        });
    }
    model.params = best;
    Ok((model, report))
}
