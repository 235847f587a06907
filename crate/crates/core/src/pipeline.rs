//! Run configuration and the end-to-end stages behind the command-line
//! tool. Every stage reads its inputs from, and writes its artifacts to, one
//! output directory:
//!
//! ```text
//! <out>/data/      corpus.jsonl, vocab.json, ddi.tsv, hierarchy_{diag,proc,med}.tsv
//! <out>/medrep/    medrep.ckpt, medrep.json, pretrain_log.json
//! <out>/simmr/     simmr.ckpt, simmr.json, train_log.json
//! <out>/eval/      report*.json, report*.txt, gates.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    assign_splits, build_hierarchy, generate_synthetic, load_corpus, load_ddi, load_hierarchy, preprocess,
    save_corpus, CodeHierarchy, CorpusStatistics, DdiMatrix, Domain, EhrCorpus, PreprocessConfig, Split,
    SplitConfig, SynthConfig, SyntheticBundle, Visit,
};
use crate::error::{Error, Result};
use crate::hypergraph::construct_hypergraphs;
use crate::khge::{build_knowledge_bias, EncoderConfig, KnowledgeBias};
use crate::medrep::{pretrain, ContrastiveConfig, PretrainOutcome, PretrainedEmbeddings};
use crate::metrics::{self, BootstrapConfig, EvalReport, VisitQuery};
use crate::simmr::{train_simmr, SimmrConfig, SimmrModel, TrainReport};

pub const DATA_DIR: &str = "data";
pub const MEDREP_DIR: &str = "medrep";
pub const SIMMR_DIR: &str = "simmr";
pub const EVAL_DIR: &str = "eval";
pub const DDI_FILE: &str = "ddi.tsv";

pub fn hierarchy_file(d: Domain) -> String {
    format!("hierarchy_{d}.tsv")
}

/// Input locations. Unset entries default to files under `<out>/data`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Unprocessed corpus directory read by `preprocess`.
    pub raw_corpus: Option<PathBuf>,
    /// Processed corpus directory used by every later stage.
    pub corpus: Option<PathBuf>,
    pub ddi: Option<PathBuf>,
    pub hierarchy_diag: Option<PathBuf>,
    pub hierarchy_proc: Option<PathBuf>,
    pub hierarchy_med: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides every stage's own seed.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub simmr: SimmrConfig,
    pub evaluation: BootstrapConfig,
    /// Train the recommender from random tables without reading the
    /// pretrained checkpoint.
    pub medrep_none: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.sync();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagates the global seed and the shared embedding width.
    pub fn sync(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.contrastive.seed = s;
            self.simmr.seed = s;
            self.evaluation.seed = s;
        }
        self.simmr.dim = self.encoder.dim;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.sync();
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.contrastive.validate()?;
        self.simmr.validate()?;
        self.evaluation.validate()
    }

    /// Settings outside the ranges the model was tuned over. Not errors.
    pub fn range_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, lr) in [("simmr.lr", self.simmr.lr), ("contrastive.lr", self.contrastive.lr)] {
            if !(1e-4..=5e-3).contains(&lr) {
                out.push(format!("{name} = {lr} is outside [1e-4, 5e-3]"));
            }
        }
        if !(0.0..=0.5).contains(&self.simmr.dropout) {
            out.push(format!("simmr.dropout = {} is outside [0, 0.5]", self.simmr.dropout));
        }
        let w = &self.simmr.weights;
        for (name, v) in [("multi", w.multi), ("ddi", w.ddi), ("aux", w.aux)] {
            if !(1e-6..=1.0).contains(&v) {
                out.push(format!("simmr.weights.{name} = {v} is outside [1e-6, 1]"));
            }
        }
        out
    }

    /// Digest of the whole configuration, embedded in reports.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn data_dir(&self, out: &Path) -> PathBuf {
        out.join(DATA_DIR)
    }

    pub fn corpus_dir(&self, out: &Path) -> PathBuf {
        self.paths.corpus.clone().unwrap_or_else(|| self.data_dir(out))
    }

    pub fn ddi_path(&self, out: &Path) -> PathBuf {
        self.paths.ddi.clone().unwrap_or_else(|| self.data_dir(out).join(DDI_FILE))
    }

    pub fn hierarchy_path(&self, out: &Path, d: Domain) -> PathBuf {
        let set = match d {
            Domain::Diag => &self.paths.hierarchy_diag,
            Domain::Proc => &self.paths.hierarchy_proc,
            Domain::Med => &self.paths.hierarchy_med,
        };
        set.clone().unwrap_or_else(|| self.data_dir(out).join(hierarchy_file(d)))
    }
}

/// Writes a synthetic corpus with its DDI pairs and hierarchies.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<SyntheticBundle> {
    let bundle = generate_synthetic(&cfg.synth)?;
    let dir = cfg.data_dir(out);
    save_corpus(&bundle.corpus, &dir)?;
    let pairs: String = bundle.ddi_pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
    fs::write(dir.join(DDI_FILE), pairs)?;
    for d in Domain::ALL {
        let edges: String = bundle.hierarchies[d as usize]
            .iter()
            .map(|(p, c)| format!("{p}\t{c}\n"))
            .collect();
        fs::write(dir.join(hierarchy_file(d)), edges)?;
    }
    Ok(bundle)
}

/// Filters and splits the raw corpus, writes it to `<out>/data` and
/// returns its statistics (also written as `statistics.txt`).
pub fn run_preprocess(cfg: &RunConfig, out: &Path) -> Result<CorpusStatistics> {
    let raw_dir = cfg
        .paths
        .raw_corpus
        .clone()
        .ok_or_else(|| Error::config("paths.raw_corpus is required for preprocessing"))?;
    let raw = load_corpus(&raw_dir)?;
    let mut processed = preprocess(&raw, &cfg.preprocess)?;
    assign_splits(&mut processed, &cfg.split)?;
    let dir = cfg.data_dir(out);
    save_corpus(&processed, &dir)?;
    let stats = processed.statistics();
    fs::write(dir.join("statistics.txt"), stats.to_table())?;
    Ok(stats)
}

/// The processed corpus and its side inputs.
pub struct Inputs {
    pub corpus: EhrCorpus,
    pub ddi: DdiMatrix,
    /// Absent when the file is missing; only allowed without the
    /// knowledge bias.
    pub hierarchies: [Option<CodeHierarchy>; 3],
}

pub fn load_inputs(cfg: &RunConfig, out: &Path) -> Result<Inputs> {
    let corpus = load_corpus(&cfg.corpus_dir(out))?;
    let ddi_path = cfg.ddi_path(out);
    let ddi = if ddi_path.exists() {
        load_ddi(&ddi_path, &corpus.vocab.med)?.0
    } else {
        log::warn!("no DDI file at {}; assuming no interactions", ddi_path.display());
        DdiMatrix::empty(corpus.vocab.med.len())
    };
    let mut hierarchies: [Option<CodeHierarchy>; 3] = Default::default();
    for d in Domain::ALL {
        let path = cfg.hierarchy_path(out, d);
        if path.exists() {
            hierarchies[d as usize] = Some(load_hierarchy(&path, corpus.vocab.get(d))?);
        } else if !cfg.encoder.no_knowledge_bias {
            return Err(Error::Input(format!(
                "missing {d} hierarchy {} (needed unless the knowledge bias is disabled)",
                path.display()
            )));
        }
    }
    Ok(Inputs {
        corpus,
        ddi,
        hierarchies,
    })
}

pub fn knowledge_biases(inputs: &Inputs, encoder: &EncoderConfig) -> Result<[KnowledgeBias; 3]> {
    let mut out = Vec::with_capacity(3);
    for d in Domain::ALL {
        let vocab = inputs.corpus.vocab.get(d);
        let bias = match &inputs.hierarchies[d as usize] {
            Some(h) => build_knowledge_bias(h, vocab, encoder.max_path_distance)?,
            None => KnowledgeBias::from_distances(
                ndarray::Array2::zeros((vocab.len(), vocab.len())),
                encoder.max_path_distance,
            ),
        };
        out.push(bias);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!("three domains")))
}

/// Builds biases straight from edge lists (used with in-memory corpora).
pub fn biases_from_edges(
    corpus: &EhrCorpus,
    edges: &[Vec<(String, String)>; 3],
    max_path_distance: usize,
) -> Result<[KnowledgeBias; 3]> {
    let mut out = Vec::with_capacity(3);
    for d in Domain::ALL {
        let vocab = corpus.vocab.get(d);
        let h = build_hierarchy(&edges[d as usize], vocab)?;
        out.push(build_knowledge_bias(&h, vocab, max_path_distance)?);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!("three domains")))
}

pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let inputs = load_inputs(cfg, out)?;
    let biases = knowledge_biases(&inputs, &cfg.encoder)?;
    let graphs = construct_hypergraphs(&inputs.corpus);
    let outcome = pretrain(&graphs, biases, &cfg.encoder, &cfg.contrastive, &inputs.corpus.digest())?;
    let dir = out.join(MEDREP_DIR);
    outcome.embeddings.save(&dir, &cfg.encoder, &cfg.contrastive)?;
    fs::write(dir.join("pretrain_log.json"), serde_json::to_string_pretty(&outcome.loss_history)?)?;
    Ok(outcome)
}

pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<(SimmrModel, TrainReport)> {
    cfg.validate()?;
    let inputs = load_inputs(cfg, out)?;
    let pretrained = if cfg.medrep_none {
        None
    } else {
        Some(PretrainedEmbeddings::load(&out.join(MEDREP_DIR))?)
    };
    let (model, report) = train_simmr(&inputs.corpus, pretrained.as_ref(), &inputs.ddi, &cfg.simmr)?;
    let dir = out.join(SIMMR_DIR);
    model.save(&dir)?;
    fs::write(dir.join("train_log.json"), serde_json::to_string_pretty(&report)?)?;
    Ok((model, report))
}

/// Loads the trained model, applying inference-time settings (threshold,
/// retrieval count, window and channel switches) from `cfg`.
pub fn load_model(cfg: &RunConfig, out: &Path, corpus: &EhrCorpus) -> Result<SimmrModel> {
    let mut model = SimmrModel::load(&out.join(SIMMR_DIR), Some(corpus))?;
    let c = model.config_mut();
    c.threshold = cfg.simmr.threshold;
    c.k_sim = cfg.simmr.k_sim;
    c.window = cfg.simmr.window;
    c.no_sim = cfg.simmr.no_sim;
    c.no_hist = cfg.simmr.no_hist;
    Ok(model)
}

/// Report plus the configuration digest of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_digest: String,
    pub model_chain: String,
    pub cold_start: bool,
    pub report: EvalReport,
}

pub fn run_evaluate(cfg: &RunConfig, out: &Path, cold_start: bool) -> Result<EvalArtifact> {
    cfg.validate()?;
    let inputs = load_inputs(cfg, out)?;
    let model = load_model(cfg, out, &inputs.corpus)?;
    let report = metrics::evaluate(&model, &inputs.corpus, Split::Test, cold_start, &inputs.ddi, &cfg.evaluation)?;
    let artifact = EvalArtifact {
        config_digest: cfg.digest(),
        model_chain: model.provenance().chain.clone(),
        cold_start,
        report,
    };
    let dir = out.join(EVAL_DIR);
    fs::create_dir_all(&dir)?;
    let stem = if cold_start { "report_cold_start" } else { "report" };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&artifact)? + "\n")?;
    fs::write(dir.join(format!("{stem}.txt")), EvalReport::table(&[("model", &artifact.report)]))?;
    Ok(artifact)
}

/// Per-visit gate weights on the test split as CSV with columns
/// `patient_id,visit_index,visit_length,alpha_hist,alpha_sim,jaccard`,
/// where `visit_length` counts the patient's visits up to and including
/// the scored one.
pub fn run_gates(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let inputs = load_inputs(cfg, out)?;
    let model = load_model(cfg, out, &inputs.corpus)?;
    let mut queries = Vec::new();
    for p in inputs.corpus.patients_in(Split::Test) {
        for t in 0..p.visits.len() {
            queries.push(VisitQuery {
                patient_id: &p.patient_id,
                position: t,
                history: &p.visits[..t],
                current: &p.visits[t],
            });
        }
    }
    let contexts = model.contexts(&queries)?;
    let mut csv = String::from("patient_id,visit_index,visit_length,alpha_hist,alpha_sim,jaccard\n");
    for (q, c) in queries.iter().zip(&contexts) {
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.6}",
            q.patient_id,
            q.position,
            q.position + 1,
            c.alpha_hist,
            c.alpha_sim,
            metrics::visit_jaccard(&q.current.med, &c.selected)
        );
    }
    let dir = out.join(EVAL_DIR);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("gates.csv"), &csv)?;
    Ok(csv)
}

/// One visit of a recommendation request, by code string.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodedVisit {
    pub diag: Vec<String>,
    pub proc: Vec<String>,
    pub med: Vec<String>,
}

/// A patient's earlier visits and the visit to recommend for. Medications
/// of `current`, if given, are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub patient_id: String,
    #[serde(default)]
    pub history: Vec<CodedVisit>,
    pub current: CodedVisit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRecord {
    pub patient_id: String,
    pub visit_index: usize,
    pub probabilities: Vec<f64>,
    pub selected_codes: Vec<String>,
    pub alpha_hist: f64,
    pub alpha_sim: f64,
}

fn encode_visit(corpus: &EhrCorpus, patient: &str, v: &CodedVisit) -> Result<Visit> {
    let lookup = |d: Domain, codes: &[String]| -> Result<Vec<usize>> {
        codes
            .iter()
            .map(|c| {
                corpus
                    .vocab
                    .get(d)
                    .index_of(c)
                    .ok_or_else(|| Error::Input(format!("patient `{patient}`: unknown {d} code `{c}`")))
            })
            .collect()
    };
    Ok(Visit::new(
        lookup(Domain::Diag, &v.diag)?,
        lookup(Domain::Proc, &v.proc)?,
        lookup(Domain::Med, &v.med)?,
    ))
}

/// Parses one request per non-empty line.
pub fn parse_requests(text: &str) -> Result<Vec<RecommendRequest>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: "<requests>".into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn run_recommend(cfg: &RunConfig, out: &Path, requests: &[RecommendRequest]) -> Result<Vec<RecommendationRecord>> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus_dir(out))?;
    let model = load_model(cfg, out, &corpus)?;
    let mut encoded = Vec::with_capacity(requests.len());
    for r in requests {
        let history = r
            .history
            .iter()
            .map(|v| encode_visit(&corpus, &r.patient_id, v))
            .collect::<Result<Vec<_>>>()?;
        let current = encode_visit(&corpus, &r.patient_id, &CodedVisit { med: Vec::new(), ..r.current.clone() })?;
        encoded.push((history, current));
    }
    let queries: Vec<VisitQuery<'_>> = requests
        .iter()
        .zip(&encoded)
        .map(|(r, (h, c))| VisitQuery {
            patient_id: &r.patient_id,
            position: h.len(),
            history: h,
            current: c,
        })
        .collect();
    let contexts = model.contexts(&queries)?;
    let meds = corpus.vocab.med.codes();
    Ok(queries
        .iter()
        .zip(contexts)
        .map(|(q, c)| RecommendationRecord {
            patient_id: q.patient_id.to_string(),
            visit_index: q.position,
            selected_codes: c.selected.iter().map(|&i| meds[i].clone()).collect(),
            probabilities: c.probabilities,
            alpha_hist: c.alpha_hist,
            alpha_sim: c.alpha_sim,
        })
        .collect())
}
