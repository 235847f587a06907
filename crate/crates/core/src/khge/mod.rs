//! Knowledge-aware hypergraph encoder.
//!
//! Each layer runs local message passing over the hypergraph (hyperedges
//! first, then nodes from the fresh hyperedge states), global multi-head
//! attention over all nodes biased by tree distance, and an FFN fusion with
//! a residual connection and layer normalization. The final embeddings are
//! the average of the per-layer outputs.

mod bias;

pub use bias::{build_knowledge_bias, KnowledgeBias};

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Csr, Mat, ParamStore, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::hypergraph::{AugmentedView, Hypergraph};
use crate::nn::{self, AttentionWeights};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const ENCODER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `LN(x + f(x))`
    Post,
    /// `x + f(LN(x))`
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_path_distance: usize,
    /// Hidden width of the fusion FFN as a multiple of `dim`.
    pub ffn_mult: usize,
    pub norm: NormPlacement,
    /// Drop the tree-distance bias from global attention.
    pub no_knowledge_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            max_path_distance: 8,
            ffn_mult: 2,
            norm: NormPlacement::Post,
            no_knowledge_bias: false,
        }
    }
}

impl EncoderConfig {
    pub fn bias_bucket_count(&self) -> usize {
        self.max_path_distance + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be positive"));
        }
        Ok(())
    }
}

/// Encoder outputs on one tape: averaged embeddings plus each layer's.
pub struct EncoderOutput<'t> {
    /// Node input to the first layer (feature mask applied).
    pub input_z: Var<'t>,
    pub z: Var<'t>,
    pub u: Var<'t>,
    pub layer_z: Vec<Var<'t>>,
    pub layer_u: Vec<Var<'t>>,
}

/// Surviving incidences of a view as gather/scatter indices.
struct Incidence {
    nodes: Rc<Vec<usize>>,
    edges: Rc<Vec<usize>>,
    num_nodes: usize,
    num_edges: usize,
}

impl Incidence {
    fn of(view: &AugmentedView<'_>) -> Self {
        let (nodes, edges): (Vec<usize>, Vec<usize>) = view.surviving_incidences().into_iter().unzip();
        Self {
            nodes: Rc::new(nodes),
            edges: Rc::new(edges),
            num_nodes: view.base().num_nodes(),
            num_edges: view.base().num_hyperedges(),
        }
    }

    /// Averages incident node rows into each hyperedge.
    fn edge_mean(&self) -> Rc<Csr> {
        let mut rows = vec![Vec::new(); self.num_edges];
        for (&n, &e) in self.nodes.iter().zip(self.edges.iter()) {
            rows[e].push(n);
        }
        Rc::new(Csr::mean_rows(&rows, self.num_nodes))
    }
}

/// Attention-weighted aggregation along incidences.
///
/// For incidence `p` the message is row `from[p]` of `messages` and it is
/// delivered to target `to[p]`. The score is
/// `leaky_relu(messages[from]·a_msg + targets[to]·a_tgt)`, normalized by a
/// softmax over each target's incidences. Targets with no incidence get a
/// zero row.
#[allow(clippy::too_many_arguments)]
pub fn lmpn_aggregate<'t>(
    messages: Var<'t>,
    targets: Var<'t>,
    from: &Rc<Vec<usize>>,
    to: &Rc<Vec<usize>>,
    num_targets: usize,
    att_msg: Var<'t>,
    att_tgt: Var<'t>,
) -> Var<'t> {
    let (alpha, gathered) = lmpn_attention(messages, targets, from, to, num_targets, att_msg, att_tgt);
    gathered.mul(alpha).scatter_add_rows(Rc::clone(to), num_targets)
}

/// Per-incidence attention coefficients (`P x 1`) and gathered messages.
pub fn lmpn_attention<'t>(
    messages: Var<'t>,
    targets: Var<'t>,
    from: &Rc<Vec<usize>>,
    to: &Rc<Vec<usize>>,
    num_targets: usize,
    att_msg: Var<'t>,
    att_tgt: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let msg_score = messages.matmul(att_msg).gather_rows(Rc::clone(from));
    let tgt_score = targets.matmul(att_tgt).gather_rows(Rc::clone(to));
    let alpha = msg_score
        .add(tgt_score)
        .leaky_relu(LEAKY_SLOPE)
        .segment_softmax(Rc::clone(to), num_targets);
    (alpha, messages.gather_rows(Rc::clone(from)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KhgeEncoder {
    config: EncoderConfig,
    params: ParamStore,
    bias: KnowledgeBias,
}

#[derive(Serialize, Deserialize)]
struct EncoderSidecar {
    format_version: u32,
    num_nodes: usize,
    config: EncoderConfig,
}

const DISTANCE_KEY: &str = "@distance";

fn layer_key(k: usize, name: &str) -> String {
    format!("l{k}.{name}")
}

impl KhgeEncoder {
    pub fn new(config: EncoderConfig, bias: KnowledgeBias, seed: u64) -> Result<Self> {
        config.validate()?;
        if bias.max_path_distance() != config.max_path_distance {
            return Err(Error::config(format!(
                "knowledge bias clipped at {}, encoder expects {}",
                bias.max_path_distance(),
                config.max_path_distance
            )));
        }
        let n = bias.num_nodes();
        let d = config.dim;
        let hidden = d * config.ffn_mult;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert("embed", nn::uniform(&mut rng, n, d, 1.0 / (d as f64).sqrt()));
        for k in 0..config.layers {
            let key = |s: &str| layer_key(k, s);
            for side in ["edge", "node"] {
                p.insert(key(&format!("{side}.proj")), nn::xavier(&mut rng, d, d));
                p.insert(key(&format!("{side}.att_msg")), nn::xavier(&mut rng, d, 1));
                p.insert(key(&format!("{side}.att_tgt")), nn::xavier(&mut rng, d, 1));
                p.insert(key(&format!("{side}.ln_g")), Mat::ones((1, d)));
                p.insert(key(&format!("{side}.ln_b")), Mat::zeros((1, d)));
            }
            for w in ["q", "k", "v", "o"] {
                p.insert(key(&format!("kgan.{w}")), nn::xavier(&mut rng, d, d));
            }
            p.insert(key("kgan.bucket"), Mat::zeros((config.heads, config.bias_bucket_count())));
            p.insert(key("ffn.w1"), nn::xavier(&mut rng, d, hidden));
            p.insert(key("ffn.b1"), Mat::zeros((1, hidden)));
            p.insert(key("ffn.w2"), nn::xavier(&mut rng, hidden, d));
            p.insert(key("ffn.b2"), Mat::zeros((1, d)));
            p.insert(key("ffn.ln_g"), Mat::ones((1, d)));
            p.insert(key("ffn.ln_b"), Mat::zeros((1, d)));
        }
        Ok(Self {
            config,
            params: p,
            bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_nodes(&self) -> usize {
        self.bias.num_nodes()
    }

    pub fn knowledge_bias(&self) -> &KnowledgeBias {
        &self.bias
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Runs every layer on `view`, with parameters taken from `bound`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, view: &AugmentedView<'_>) -> Result<EncoderOutput<'t>> {
        let base = view.base();
        if base.num_nodes() != self.num_nodes() {
            return Err(Error::Dimension(format!(
                "hypergraph has {} nodes, encoder {}",
                base.num_nodes(),
                self.num_nodes()
            )));
        }
        if view.feature_mask().len() != self.config.dim {
            return Err(Error::Dimension(format!(
                "feature mask of width {}, encoder dim {}",
                view.feature_mask().len(),
                self.config.dim
            )));
        }
        let embed = bound.var("embed");
        let tape = embed.tape();
        let inc = Incidence::of(view);
        let fmask = Mat::from_shape_fn((1, self.config.dim), |(_, c)| {
            if view.feature_mask()[c] {
                1.0
            } else {
                0.0
            }
        });
        let input_z = embed.mul(tape.constant(fmask));
        let mut z = input_z;
        let mut u = z.left_sparse_mul(inc.edge_mean());

        let key_mask = if view.kept_nodes().iter().all(|&k| k) {
            None
        } else {
            let n = self.num_nodes();
            Some(Rc::new(Mat::from_shape_fn((n, n), |(_, j)| {
                if view.kept_nodes()[j] {
                    1.0
                } else {
                    0.0
                }
            })))
        };

        let mut layer_z = Vec::with_capacity(self.config.layers);
        let mut layer_u = Vec::with_capacity(self.config.layers);
        for k in 0..self.config.layers {
            let (z_next, u_next) = self.layer(bound, k, z, u, &inc, key_mask.clone());
            check_finite(z_next, k, "node")?;
            check_finite(u_next, k, "hyperedge")?;
            layer_z.push(z_next);
            layer_u.push(u_next);
            z = z_next;
            u = u_next;
        }
        let inv = 1.0 / self.config.layers as f64;
        let avg = |xs: &[Var<'t>]| xs[1..].iter().fold(xs[0], |acc, &x| acc.add(x)).scale(inv);
        Ok(EncoderOutput {
            input_z,
            z: avg(&layer_z),
            u: avg(&layer_u),
            layer_z,
            layer_u,
        })
    }

    fn layer<'t>(
        &self,
        bound: &Bound<'t>,
        k: usize,
        z: Var<'t>,
        u: Var<'t>,
        inc: &Incidence,
        key_mask: Option<Rc<Mat>>,
    ) -> (Var<'t>, Var<'t>) {
        let p = |s: &str| bound.var(&layer_key(k, s));
        let post = self.config.norm == NormPlacement::Post;
        let ln = |x: Var<'t>, side: &str| nn::layer_norm(x, p(&format!("{side}.ln_g")), p(&format!("{side}.ln_b")));

        // Hyperedges gather from nodes.
        let z_in = if post { z } else { ln(z, "edge") };
        let upd = lmpn_aggregate(
            z_in.matmul(p("edge.proj")),
            u,
            &inc.nodes,
            &inc.edges,
            inc.num_edges,
            p("edge.att_msg"),
            p("edge.att_tgt"),
        );
        let u_next = if post { ln(u.add(upd), "edge") } else { u.add(upd) };

        // Nodes gather from the updated hyperedges.
        let u_in = if post { u_next } else { ln(u_next, "node") };
        let upd = lmpn_aggregate(
            u_in.matmul(p("node.proj")),
            z,
            &inc.edges,
            &inc.nodes,
            inc.num_nodes,
            p("node.att_msg"),
            p("node.att_tgt"),
        );
        let z_local = if post { ln(z.add(upd), "node") } else { z.add(upd) };

        let z_global = self.global_attention(bound, k, z, key_mask).0;
        let s = z_local.add(z_global);
        let ffn = |x: Var<'t>| nn::feed_forward(x, p("ffn.w1"), p("ffn.b1"), p("ffn.w2"), p("ffn.b2"));
        let z_next = if post {
            ln(s.add(ffn(s)), "ffn")
        } else {
            s.add(ffn(ln(s, "ffn")))
        };
        (z_next, u_next)
    }

    /// Tree-biased multi-head self-attention of layer `k`; also returns the
    /// attention matrices.
    pub fn global_attention<'t>(
        &self,
        bound: &Bound<'t>,
        k: usize,
        z: Var<'t>,
        key_mask: Option<Rc<Mat>>,
    ) -> (Var<'t>, Vec<Var<'t>>) {
        let p = |s: &str| bound.var(&layer_key(k, s));
        let w = AttentionWeights {
            query: p("kgan.q"),
            key: p("kgan.k"),
            value: p("kgan.v"),
            output: p("kgan.o"),
        };
        let heads = self.config.heads;
        let n = self.num_nodes();
        let omega: Option<Vec<Var<'t>>> = (!self.config.no_knowledge_bias).then(|| {
            let table = p("kgan.bucket");
            (0..heads)
                .map(|h| table.gather_flat(self.bias.flat_indices(h), n, n))
                .collect()
        });
        nn::multi_head_attention(z, z, z, &w, heads, omega.as_deref(), key_mask)
    }

    /// Unaugmented forward pass with frozen parameters; returns `(Z, U)`.
    pub fn embed(&self, h: &Hypergraph) -> Result<(Mat, Mat)> {
        let tape = Tape::new();
        let bound = self.params.bind_with(&tape, |_| false);
        let out = self.forward(&bound, &AugmentedView::full(h, self.config.dim))?;
        Ok(((*out.z.value()).clone(), (*out.u.value()).clone()))
    }

    /// Writes `<stem>.bin` (parameters) and `<stem>.json` (config).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut store = self.params.clone();
        store.insert(DISTANCE_KEY, self.bias.distances().mapv(|d| d as f64));
        checkpoint::save_arrays(&store, &dir.join(format!("{stem}.bin")))?;
        checkpoint::save_json(
            &EncoderSidecar {
                format_version: ENCODER_FORMAT_VERSION,
                num_nodes: self.num_nodes(),
                config: self.config.clone(),
            },
            &dir.join(format!("{stem}.json")),
        )
    }

    /// Loads a checkpoint written by [`save`](Self::save). When `expected`
    /// is given, a different stored config is an error.
    pub fn load(dir: &Path, stem: &str, expected: Option<&EncoderConfig>) -> Result<Self> {
        let side: EncoderSidecar = checkpoint::load_json(&dir.join(format!("{stem}.json")))?;
        if side.format_version != ENCODER_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "encoder format version {}, expected {ENCODER_FORMAT_VERSION}",
                side.format_version
            )));
        }
        if let Some(want) = expected {
            if want != &side.config {
                return Err(Error::Checkpoint(format!(
                    "encoder config mismatch: checkpoint {:?}, requested {:?}",
                    side.config, want
                )));
            }
        }
        let mut stored = checkpoint::load_arrays(&dir.join(format!("{stem}.bin")))?;
        let dist = stored
            .get(DISTANCE_KEY)
            .ok_or_else(|| Error::Checkpoint("encoder checkpoint lacks distances".into()))?
            .mapv(|d| d as usize);
        let bias = KnowledgeBias::from_distances(dist, side.config.max_path_distance);
        let mut enc = Self::new(side.config, bias, 0)?;
        for (name, slot) in enc.params.clone().iter() {
            let v = stored
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("encoder checkpoint lacks `{name}`")))?;
            if v.dim() != slot.dim() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", v.dim(), slot.dim())));
            }
            enc.params.insert(name, v.clone());
        }
        if side.num_nodes != enc.num_nodes() {
            return Err(Error::Checkpoint("node count disagrees with distances".into()));
        }
        Ok(enc)
    }
}

fn check_finite(v: Var<'_>, layer: usize, what: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} embedding in encoder layer {}", layer + 1)))
    }
}

#[cfg(test)]
mod tests;
