//! Per-domain hypergraphs over training visits and their augmented views.
//!
//! Each domain (diagnosis, procedure, medication) gets its own hypergraph:
//! nodes are the domain's codes, and every training visit with a nonempty
//! code set in that domain becomes one hyperedge.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, EhrCorpus, Split};
use crate::error::{Error, Result};

/// Where a hyperedge came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisitRef {
    pub patient_id: String,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    domain: Domain,
    num_nodes: usize,
    hyperedges: Vec<Vec<usize>>,
    visit_ref: Vec<VisitRef>,
    node_edges: Vec<Vec<usize>>,
    /// Flattened incidences in hyperedge order: `(node, hyperedge)`.
    incidences: Vec<(usize, usize)>,
}

impl Hypergraph {
    /// Builds a hypergraph from explicit node sets. Empty sets are rejected.
    pub fn from_edges(
        domain: Domain,
        num_nodes: usize,
        hyperedges: Vec<Vec<usize>>,
        visit_ref: Vec<VisitRef>,
    ) -> Result<Self> {
        if hyperedges.len() != visit_ref.len() {
            return Err(Error::Dimension(format!(
                "{} hyperedges but {} visit references",
                hyperedges.len(),
                visit_ref.len()
            )));
        }
        let mut node_edges = vec![Vec::new(); num_nodes];
        let mut incidences = Vec::new();
        let mut edges = Vec::with_capacity(hyperedges.len());
        for (e, mut nodes) in hyperedges.into_iter().enumerate() {
            nodes.sort_unstable();
            nodes.dedup();
            if nodes.is_empty() {
                return Err(Error::Input(format!("{domain} hyperedge {e} is empty")));
            }
            for &n in &nodes {
                if n >= num_nodes {
                    return Err(Error::OutOfBounds {
                        what: "node",
                        index: n,
                        len: num_nodes,
                    });
                }
                node_edges[n].push(e);
                incidences.push((n, e));
            }
            edges.push(nodes);
        }
        Ok(Self {
            domain,
            num_nodes,
            hyperedges: edges,
            visit_ref,
            node_edges,
            incidences,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_hyperedges(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn num_incidences(&self) -> usize {
        self.incidences.len()
    }

    pub fn hyperedges(&self) -> &[Vec<usize>] {
        &self.hyperedges
    }

    pub fn visit_ref(&self) -> &[VisitRef] {
        &self.visit_ref
    }

    pub fn incidences(&self) -> &[(usize, usize)] {
        &self.incidences
    }

    pub fn incident_hyperedges(&self, node: usize) -> Result<&[usize]> {
        self.node_edges
            .get(node)
            .map(Vec::as_slice)
            .ok_or(Error::OutOfBounds {
                what: "node",
                index: node,
                len: self.num_nodes,
            })
    }

    pub fn incident_nodes(&self, hyperedge: usize) -> Result<&[usize]> {
        self.hyperedges
            .get(hyperedge)
            .map(Vec::as_slice)
            .ok_or(Error::OutOfBounds {
                what: "hyperedge",
                index: hyperedge,
                len: self.hyperedges.len(),
            })
    }

    /// Writes `node<TAB>hyperedge` lines.
    pub fn write_incidence_dump(&self, mut out: impl Write) -> std::io::Result<()> {
        for &(n, e) in &self.incidences {
            writeln!(out, "{n}\t{e}")?;
        }
        Ok(())
    }
}

/// The three domain hypergraphs built from one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainHypergraphs {
    pub graphs: [Hypergraph; 3],
    /// Training visits skipped per domain because their code set was empty.
    pub empty_visits: [usize; 3],
}

impl DomainHypergraphs {
    pub fn get(&self, domain: Domain) -> &Hypergraph {
        &self.graphs[domain as usize]
    }
}

/// One hyperedge per training visit per domain, in patient then visit order.
pub fn construct_hypergraphs(corpus: &EhrCorpus) -> DomainHypergraphs {
    let sizes = corpus.vocab.sizes();
    let mut edges: [Vec<Vec<usize>>; 3] = Default::default();
    let mut refs: [Vec<VisitRef>; 3] = Default::default();
    let mut empty = [0usize; 3];
    for p in corpus.patients_in(Split::Train) {
        for (pos, v) in p.visits.iter().enumerate() {
            for d in Domain::ALL {
                let k = d as usize;
                let codes = v.codes(d);
                if codes.is_empty() {
                    empty[k] += 1;
                    continue;
                }
                edges[k].push(codes.to_vec());
                refs[k].push(VisitRef {
                    patient_id: p.patient_id.clone(),
                    position: pos,
                });
            }
        }
    }
    for d in Domain::ALL {
        if empty[d as usize] > 0 {
            log::info!("{} training visits have no {} codes", empty[d as usize], d);
        }
    }
    let [ed, ep, em] = edges;
    let [rd, rp, rm] = refs;
    let build = |d: Domain, e, r| {
        Hypergraph::from_edges(d, sizes[d as usize], e, r).expect("validated corpus gives valid hyperedges")
    };
    DomainHypergraphs {
        graphs: [
            build(Domain::Diag, ed, rd),
            build(Domain::Proc, ep, rp),
            build(Domain::Med, em, rm),
        ],
        empty_visits: empty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropRates {
    pub node: f64,
    pub incidence: f64,
    pub feature: f64,
}

impl Default for DropRates {
    fn default() -> Self {
        Self {
            node: 0.2,
            incidence: 0.2,
            feature: 0.2,
        }
    }
}

impl DropRates {
    pub const NONE: DropRates = DropRates {
        node: 0.0,
        incidence: 0.0,
        feature: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("node", self.node), ("incidence", self.incidence), ("feature", self.feature)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{name} drop rate {r} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// A stochastic subgraph: masks over nodes, incidences and feature
/// dimensions. Dropped elements keep their slots so two views of the same
/// hypergraph stay index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView<'h> {
    base: &'h Hypergraph,
    kept_nodes: Vec<bool>,
    /// Aligned with [`Hypergraph::incidences`].
    kept_incidences: Vec<bool>,
    feature_mask: Vec<bool>,
    seed: u64,
}

/// Draws a view. Masks are a pure function of `(h, rates, dim, seed)`.
pub fn augment<'h>(h: &'h Hypergraph, rates: DropRates, dim: usize, seed: u64) -> Result<AugmentedView<'h>> {
    rates.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = |rate: f64| rng.random::<f64>() >= rate;
    let kept_nodes = (0..h.num_nodes()).map(|_| keep(rates.node)).collect();
    let kept_incidences = (0..h.num_incidences()).map(|_| keep(rates.incidence)).collect();
    let feature_mask = (0..dim).map(|_| keep(rates.feature)).collect();
    Ok(AugmentedView {
        base: h,
        kept_nodes,
        kept_incidences,
        feature_mask,
        seed,
    })
}

impl<'h> AugmentedView<'h> {
    /// The unaugmented view.
    pub fn full(h: &'h Hypergraph, dim: usize) -> Self {
        Self {
            base: h,
            kept_nodes: vec![true; h.num_nodes()],
            kept_incidences: vec![true; h.num_incidences()],
            feature_mask: vec![true; dim],
            seed: 0,
        }
    }

    pub fn base(&self) -> &'h Hypergraph {
        self.base
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kept_nodes(&self) -> &[bool] {
        &self.kept_nodes
    }

    pub fn kept_incidences(&self) -> &[bool] {
        &self.kept_incidences
    }

    pub fn feature_mask(&self) -> &[bool] {
        &self.feature_mask
    }

    /// Incidences that carry messages: kept themselves and attached to a
    /// kept node.
    pub fn surviving_incidences(&self) -> Vec<(usize, usize)> {
        self.base
            .incidences()
            .iter()
            .zip(&self.kept_incidences)
            .filter(|(&(n, _), &k)| k && self.kept_nodes[n])
            .map(|(&ne, _)| ne)
            .collect()
    }

    /// Per hyperedge: does it keep at least one surviving incidence.
    pub fn alive_hyperedges(&self) -> Vec<bool> {
        let mut alive = vec![false; self.base.num_hyperedges()];
        for (_, e) in self.surviving_incidences() {
            alive[e] = true;
        }
        alive
    }
}
