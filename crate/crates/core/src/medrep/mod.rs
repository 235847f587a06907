//! Contrastive pretraining of the per-domain encoders and export of the
//! resulting entity and visit embedding tables.

use std::path::Path;
use std::rc::Rc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Adaptive, AdaptiveConfig, Mat, ParamStore, Tape, Var};
use crate::checkpoint;
use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::hypergraph::{augment, AugmentedView, DomainHypergraphs, DropRates, VisitRef};
use crate::khge::{EncoderConfig, EncoderOutput, KhgeEncoder, KnowledgeBias};

pub const MEDREP_ARRAYS: &str = "medrep.ckpt";
pub const MEDREP_SIDECAR: &str = "medrep.json";
pub const MEDREP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Weight of the hyperedge-level term.
    pub lambda_edge: f64,
    /// Weight of the node-to-hyperedge membership term.
    pub lambda_member: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub drop: DropRates,
    pub seed: u64,
    /// Draw fresh views every epoch instead of fixing them once.
    pub resample_views: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda_edge: 1.0,
            lambda_member: 1.0,
            epochs: 300,
            lr: 1e-3,
            weight_decay: 1e-5,
            drop: DropRates::default(),
            seed: 0,
            resample_views: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.lambda_edge < 0.0 || self.lambda_member < 0.0 {
            return Err(Error::config("contrastive weights must be non-negative"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("learning rate must be positive and weight decay non-negative"));
        }
        self.drop.validate()
    }
}

/// Mean over rows of `-log softmax_j(u_i·v_j / tau)[i]`.
pub fn info_nce<'t>(u: Var<'t>, v: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let (n, d) = u.shape();
    if n == 0 {
        return Err(Error::Input("InfoNCE over zero rows is undefined".into()));
    }
    if v.shape() != (n, d) {
        return Err(Error::Dimension(format!("InfoNCE rows {:?} vs {:?}", u.shape(), v.shape())));
    }
    let logp = u.matmul(v.t()).scale(1.0 / tau).log_softmax_rows();
    let eye = u.tape().constant(Mat::eye(n));
    Ok(logp.mul(eye).sum().scale(-1.0 / n as f64))
}

/// Index sets used by the three contrastive terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContrastRows {
    /// Nodes kept in both views.
    pub nodes: Vec<usize>,
    /// Hyperedges with surviving incidences in both views.
    pub edges: Vec<usize>,
    /// `(node in view 1, hyperedge in view 2)` positive pairs.
    pub members: Vec<(usize, usize)>,
}

/// Picks the rows each term is computed over. Membership pairs give every
/// node kept in view 1 a uniformly drawn incident hyperedge that is alive in
/// view 2; nodes without such a hyperedge are left out.
pub fn contrast_rows(view1: &AugmentedView<'_>, view2: &AugmentedView<'_>, rng: &mut impl Rng) -> ContrastRows {
    let base = view1.base();
    let nodes = (0..base.num_nodes())
        .filter(|&n| view1.kept_nodes()[n] && view2.kept_nodes()[n])
        .collect();
    let (alive1, alive2) = (view1.alive_hyperedges(), view2.alive_hyperedges());
    let edges = (0..base.num_hyperedges()).filter(|&e| alive1[e] && alive2[e]).collect();
    let mut members = Vec::new();
    for n in 0..base.num_nodes() {
        if !view1.kept_nodes()[n] {
            continue;
        }
        let candidates: Vec<usize> = base
            .incident_hyperedges(n)
            .expect("node in range")
            .iter()
            .copied()
            .filter(|&e| alive2[e])
            .collect();
        if let Some(&e) = candidates.choose(rng) {
            members.push((n, e));
        }
    }
    ContrastRows { nodes, edges, members }
}

pub struct ContrastiveLoss<'t> {
    pub total: Var<'t>,
    pub node: f64,
    pub edge: f64,
    pub member: f64,
    /// Terms that had no rows and contributed zero.
    pub empty_terms: Vec<&'static str>,
}

/// Node-level + `lambda_edge` hyperedge-level + `lambda_member`
/// membership-level InfoNCE. An empty term contributes zero and is listed in
/// `empty_terms` so the caller can warn.
pub fn contrastive_loss<'t>(
    view1: &EncoderOutput<'t>,
    view2: &EncoderOutput<'t>,
    rows: &ContrastRows,
    config: &ContrastiveConfig,
) -> Result<ContrastiveLoss<'t>> {
    let tape = view1.z.tape();
    let mut total = tape.scalar(0.0);
    let mut empty = Vec::new();
    let mut term = |name: &'static str, a: Var<'t>, b: Var<'t>, idx_a: Vec<usize>, idx_b: Vec<usize>, w: f64| -> Result<f64> {
        if idx_a.is_empty() {
            empty.push(name);
            return Ok(0.0);
        }
        let loss = info_nce(a.gather_rows(Rc::new(idx_a)), b.gather_rows(Rc::new(idx_b)), config.tau)?;
        let value = loss.item();
        if w != 0.0 {
            total = total.add(loss.scale(w));
        }
        Ok(value)
    };
    let node = term("node", view1.z, view2.z, rows.nodes.clone(), rows.nodes.clone(), 1.0)?;
    let edge = term("hyperedge", view1.u, view2.u, rows.edges.clone(), rows.edges.clone(), config.lambda_edge)?;
    let (mn, me): (Vec<usize>, Vec<usize>) = rows.members.iter().copied().unzip();
    let member = term("membership", view1.z, view2.u, mn, me, config.lambda_member)?;
    Ok(ContrastiveLoss {
        total,
        node,
        edge,
        member,
        empty_terms: empty,
    })
}

/// Exported tables, one entry per domain in diag/proc/med order.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedEmbeddings {
    pub entities: [Mat; 3],
    pub visits: [Mat; 3],
    pub visit_ref: [Vec<VisitRef>; 3],
    pub config_digest: String,
    pub corpus_digest: String,
}

#[derive(Serialize, Deserialize)]
struct MedrepSidecar {
    format_version: u32,
    config_digest: String,
    corpus_digest: String,
    visit_ref: [Vec<VisitRef>; 3],
    encoder: EncoderConfig,
    contrastive: ContrastiveConfig,
}

impl PretrainedEmbeddings {
    pub fn dim(&self) -> usize {
        self.entities[0].ncols()
    }

    pub fn entities(&self, d: Domain) -> &Mat {
        &self.entities[d as usize]
    }

    pub fn visits(&self, d: Domain) -> &Mat {
        &self.visits[d as usize]
    }

    /// Checks entity row counts against vocabulary sizes.
    pub fn check_vocab(&self, sizes: [usize; 3]) -> Result<()> {
        for d in Domain::ALL {
            let rows = self.entities(d).nrows();
            if rows != sizes[d as usize] {
                return Err(Error::Dimension(format!(
                    "{d} embeddings have {rows} rows, vocabulary has {}",
                    sizes[d as usize]
                )));
            }
        }
        Ok(())
    }

    /// Digest of every table; used to chain later checkpoints to this one.
    pub fn digest(&self) -> String {
        checkpoint::digest_arrays(&self.to_store())
    }

    fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for d in Domain::ALL {
            s.insert(format!("entities.{d}"), self.entities(d).clone());
            s.insert(format!("visits.{d}"), self.visits(d).clone());
        }
        s
    }

    pub fn save(&self, dir: &Path, encoder: &EncoderConfig, contrastive: &ContrastiveConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save_arrays(&self.to_store(), &dir.join(MEDREP_ARRAYS))?;
        checkpoint::save_json(
            &MedrepSidecar {
                format_version: MEDREP_FORMAT_VERSION,
                config_digest: self.config_digest.clone(),
                corpus_digest: self.corpus_digest.clone(),
                visit_ref: self.visit_ref.clone(),
                encoder: encoder.clone(),
                contrastive: contrastive.clone(),
            },
            &dir.join(MEDREP_SIDECAR),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side: MedrepSidecar = checkpoint::load_json(&dir.join(MEDREP_SIDECAR))?;
        if side.format_version != MEDREP_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "medrep format version {}, expected {MEDREP_FORMAT_VERSION}",
                side.format_version
            )));
        }
        let store = checkpoint::load_arrays(&dir.join(MEDREP_ARRAYS))?;
        let get = |name: String| {
            store
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{MEDREP_ARRAYS} lacks `{name}`")))
        };
        let mut entities: [Mat; 3] = Default::default();
        let mut visits: [Mat; 3] = Default::default();
        for d in Domain::ALL {
            entities[d as usize] = get(format!("entities.{d}"))?;
            visits[d as usize] = get(format!("visits.{d}"))?;
            if visits[d as usize].nrows() != side.visit_ref[d as usize].len() {
                return Err(Error::Checkpoint(format!("{d} visit table and visit_ref disagree")));
            }
        }
        Ok(Self {
            entities,
            visits,
            visit_ref: side.visit_ref,
            config_digest: side.config_digest,
            corpus_digest: side.corpus_digest,
        })
    }
}

/// Pretraining result: exported tables, trained encoders and diagnostics.
pub struct PretrainOutcome {
    pub embeddings: PretrainedEmbeddings,
    pub encoders: Vec<KhgeEncoder>,
    /// Total contrastive loss per epoch, per domain.
    pub loss_history: Vec<[f64; 3]>,
    /// Encoder forward passes made during training, per domain.
    pub forward_calls: [usize; 3],
}

pub fn config_digest(encoder: &EncoderConfig, contrastive: &ContrastiveConfig) -> String {
    let text = serde_json::to_string(&(encoder, contrastive)).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Trains one encoder per domain on two augmented views, then exports
/// embeddings from an unaugmented forward pass.
pub fn pretrain(
    graphs: &DomainHypergraphs,
    biases: [KnowledgeBias; 3],
    encoder: &EncoderConfig,
    config: &ContrastiveConfig,
    corpus_digest: &str,
) -> Result<PretrainOutcome> {
    config.validate()?;
    encoder.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoders = Vec::with_capacity(3);
    let mut entities: [Mat; 3] = Default::default();
    let mut visits: [Mat; 3] = Default::default();
    let mut history = vec![[0.0; 3]; config.epochs];
    let mut forward_calls = [0usize; 3];

    for (d, bias) in Domain::ALL.into_iter().zip(biases) {
        let k = d as usize;
        let h = graphs.get(d);
        let mut enc = KhgeEncoder::new(encoder.clone(), bias, master.random())?;
        let mut opt = Adaptive::new(AdaptiveConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdaptiveConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let draw = |rng: &mut ChaCha8Rng| -> Result<_> {
            let v1 = augment(h, config.drop, encoder.dim, rng.random())?;
            let v2 = augment(h, config.drop, encoder.dim, rng.random())?;
            Ok((v1, v2))
        };
        let mut views = draw(&mut rng)?;
        let mut warned = Vec::new();
        for epoch in 0..config.epochs {
            if config.resample_views && epoch > 0 {
                views = draw(&mut rng)?;
            }
            let rows = contrast_rows(&views.0, &views.1, &mut rng);
            let tape = Tape::new();
            let bound = enc.params().bind(&tape);
            let out1 = enc.forward(&bound, &views.0)?;
            let out2 = enc.forward(&bound, &views.1)?;
            forward_calls[k] += 2;
            let loss = contrastive_loss(&out1, &out2, &rows, config)?;
            for t in &loss.empty_terms {
                if !warned.contains(t) {
                    log::warn!("{d} {t} contrastive term has no rows; it contributes zero");
                    warned.push(t);
                }
            }
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(Error::numeric(format!("{d} contrastive loss diverged at epoch {}", epoch + 1)));
            }
            history[epoch][k] = value;
            let grads = bound.gradients(&tape.backward(loss.total));
            opt.step(enc.params_mut(), &grads);
            if epoch % 50 == 0 || epoch + 1 == config.epochs {
                log::debug!("pretrain {d} epoch {} loss {value:.5}", epoch + 1);
            }
        }
        let (z, u) = enc.embed(h)?;
        entities[k] = z;
        visits[k] = u;
        encoders.push(enc);
    }
    Ok(PretrainOutcome {
        embeddings: PretrainedEmbeddings {
            entities,
            visits,
            visit_ref: [0, 1, 2].map(|k| graphs.graphs[k].visit_ref().to_vec()),
            config_digest: config_digest(encoder, config),
            corpus_digest: corpus_digest.to_string(),
        },
        encoders,
        loss_history: history,
        forward_calls,
    })
}
