//! Planted-structure synthetic EHR generator.
//!
//! Each latent condition cluster owns a canonical diagnosis, procedure and
//! medication set. A patient has a home cluster; each visit either stays in
//! it or switches with `cluster_switch` probability, then every canonical
//! code is independently replaced by a uniformly random one with the
//! domain's noise probability. With zero medication noise a visit's
//! medications equal its cluster's canonical set exactly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_splits, CorpusStatistics, Domain, EhrCorpus, PatientRecord, Split, SplitConfig, Visit,
    Vocabularies,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_patients: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    pub num_diag_codes: usize,
    pub num_proc_codes: usize,
    pub num_med_codes: usize,
    pub num_clusters: usize,
    /// Target mean set sizes per visit.
    pub diag_per_visit: f64,
    pub proc_per_visit: f64,
    pub med_per_visit: f64,
    /// Per-code replacement probability for diagnoses and procedures.
    pub code_noise: f64,
    /// Per-code replacement probability for medications.
    pub med_noise: f64,
    pub cluster_switch: f64,
    /// Fraction of medication pairs that interact.
    pub ddi_density: f64,
    /// Probability that a cluster's canonical code is drawn from its own
    /// hierarchy chapter rather than the whole vocabulary.
    pub chapter_affinity: f64,
    pub train_fraction: f64,
    /// Lay clusters out on a grid and build each cluster's diagnosis and
    /// procedure sets as the union of a row part and a column part shared
    /// with the other clusters in that row or column. Medications stay
    /// specific to the cluster, so only the combination of codes identifies
    /// them.
    pub compositional: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_patients: 200,
            min_visits: 2,
            max_visits: 4,
            num_diag_codes: 120,
            num_proc_codes: 60,
            num_med_codes: 60,
            num_clusters: 8,
            diag_per_visit: 6.0,
            proc_per_visit: 3.0,
            med_per_visit: 6.0,
            code_noise: 0.1,
            med_noise: 0.05,
            cluster_switch: 0.1,
            ddi_density: 0.05,
            chapter_affinity: 0.8,
            train_fraction: 2.0 / 3.0,
            compositional: false,
        }
    }
}

/// Generated corpus plus the side files a pipeline run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub corpus: EhrCorpus,
    /// `parent -> child` edges per domain, in `Domain::ALL` order.
    pub hierarchies: [Vec<(String, String)>; 3],
    pub ddi_pairs: Vec<(String, String)>,
    /// Cluster of every generated visit, by patient.
    pub visit_clusters: BTreeMap<String, Vec<usize>>,
    /// Canonical medication set per cluster.
    pub canonical_meds: Vec<Vec<usize>>,
    pub stats: CorpusStatistics,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let sizes = [self.num_diag_codes, self.num_proc_codes, self.num_med_codes];
        if self.num_clusters == 0 {
            return Err(Error::config("num_clusters must be positive"));
        }
        for (d, n) in Domain::ALL.into_iter().zip(sizes) {
            if self.num_clusters > n {
                return Err(Error::config(format!(
                    "num_clusters ({}) exceeds {d} vocabulary size ({n})",
                    self.num_clusters
                )));
            }
        }
        for (name, p) in [
            ("code_noise", self.code_noise),
            ("med_noise", self.med_noise),
            ("cluster_switch", self.cluster_switch),
            ("ddi_density", self.ddi_density),
            ("chapter_affinity", self.chapter_affinity),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.min_visits == 0 || self.min_visits > self.max_visits {
            return Err(Error::config("need 1 <= min_visits <= max_visits"));
        }
        if self.diag_per_visit < 1.0 || self.med_per_visit < 1.0 || self.proc_per_visit < 0.0 {
            return Err(Error::config(
                "diag_per_visit and med_per_visit must be >= 1, proc_per_visit >= 0",
            ));
        }
        for (d, (target, n)) in Domain::ALL.into_iter().zip(
            [self.diag_per_visit, self.proc_per_visit, self.med_per_visit]
                .into_iter()
                .zip(sizes),
        ) {
            if target.ceil() as usize > n {
                return Err(Error::config(format!(
                    "{d} set size {target} exceeds vocabulary size {n}"
                )));
            }
        }
        Ok(())
    }
}

fn code_name(domain: Domain, i: usize) -> String {
    let prefix = match domain {
        Domain::Diag => 'D',
        Domain::Proc => 'P',
        Domain::Med => 'M',
    };
    format!("{prefix}{i:04}")
}

/// Size with expectation `target`: floor or ceil.
fn sample_size(rng: &mut ChaCha8Rng, target: f64) -> usize {
    let base = target.floor();
    let extra = if rng.random::<f64>() < target - base { 1 } else { 0 };
    base as usize + extra
}

/// Chapter `c` of a vocabulary of size `n` split into `k` contiguous blocks.
fn chapter_range(n: usize, k: usize, c: usize) -> std::ops::Range<usize> {
    (c * n / k)..((c + 1) * n / k)
}

fn canonical_set(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    cluster: usize,
    size: usize,
    affinity: f64,
) -> Vec<usize> {
    let mut own: Vec<usize> = chapter_range(n, k, cluster).collect();
    own.shuffle(rng);
    let mut set = Vec::with_capacity(size);
    let mut own_iter = own.into_iter();
    while set.len() < size {
        let pick = if rng.random::<f64>() < affinity {
            own_iter.next()
        } else {
            None
        };
        let code = pick.unwrap_or_else(|| rng.random_range(0..n));
        if !set.contains(&code) {
            set.push(code);
        }
    }
    set.sort_unstable();
    set
}

/// Cluster `c` sits at `(c / cols, c % cols)` and gets the union of its row
/// part and column part, each about half the target size.
fn compositional_sets(rng: &mut ChaCha8Rng, n: usize, k: usize, target: f64, min: usize, affinity: f64) -> Vec<Vec<usize>> {
    let rows = (k as f64).sqrt().ceil() as usize;
    let cols = k.div_ceil(rows);
    let mut part = |chapter: usize| {
        let size = sample_size(rng, target / 2.0).max(min).min(n);
        if size == 0 {
            Vec::new()
        } else {
            canonical_set(rng, n, k, chapter % k, size, affinity)
        }
    };
    let row_parts: Vec<Vec<usize>> = (0..rows).map(&mut part).collect();
    let col_parts: Vec<Vec<usize>> = (0..cols).map(|j| part(rows + j)).collect();
    (0..k)
        .map(|c| {
            let mut set = row_parts[c / cols].clone();
            set.extend(&col_parts[c % cols]);
            set.sort_unstable();
            set.dedup();
            set
        })
        .collect()
}

fn noisy(rng: &mut ChaCha8Rng, canonical: &[usize], n: usize, noise: f64) -> Vec<usize> {
    canonical
        .iter()
        .map(|&c| {
            if noise > 0.0 && rng.random::<f64>() < noise {
                rng.random_range(0..n)
            } else {
                c
            }
        })
        .collect()
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sizes = [config.num_diag_codes, config.num_proc_codes, config.num_med_codes];
    let targets = [config.diag_per_visit, config.proc_per_visit, config.med_per_visit];
    let k = config.num_clusters;

    // canonical[domain][cluster]
    let canonical: Vec<Vec<Vec<usize>>> = (0..3)
        .map(|d| {
            if config.compositional && d < 2 {
                return compositional_sets(&mut rng, sizes[d], k, targets[d], usize::from(d == 0), config.chapter_affinity);
            }
            (0..k)
                .map(|c| {
                    let size = sample_size(&mut rng, targets[d]).min(sizes[d]);
                    let size = if d == 1 { size } else { size.max(1) };
                    canonical_set(&mut rng, sizes[d], k, c, size, config.chapter_affinity)
                })
                .collect()
        })
        .collect();

    let mut patients = Vec::with_capacity(config.num_patients);
    let mut visit_clusters = BTreeMap::new();
    for p in 0..config.num_patients {
        let home = rng.random_range(0..k);
        let n_visits = rng.random_range(config.min_visits..=config.max_visits);
        let mut visits = Vec::with_capacity(n_visits);
        let mut clusters = Vec::with_capacity(n_visits);
        for _ in 0..n_visits {
            let c = if rng.random::<f64>() < config.cluster_switch {
                rng.random_range(0..k)
            } else {
                home
            };
            let diag = noisy(&mut rng, &canonical[0][c], sizes[0], config.code_noise);
            let proc = noisy(&mut rng, &canonical[1][c], sizes[1], config.code_noise);
            let med = noisy(&mut rng, &canonical[2][c], sizes[2], config.med_noise);
            visits.push(Visit::new(diag, proc, med));
            clusters.push(c);
        }
        let id = format!("P{p:06}");
        visit_clusters.insert(id.clone(), clusters);
        patients.push(PatientRecord {
            patient_id: id,
            visits,
        });
    }

    let vocab = Vocabularies::new(
        (0..sizes[0]).map(|i| code_name(Domain::Diag, i)).collect(),
        (0..sizes[1]).map(|i| code_name(Domain::Proc, i)).collect(),
        (0..sizes[2]).map(|i| code_name(Domain::Med, i)).collect(),
    )?;
    let splits = patients
        .iter()
        .map(|p| (p.patient_id.clone(), Split::Train))
        .collect();
    let mut corpus = EhrCorpus::new(vocab, patients, splits)?;
    assign_splits(
        &mut corpus,
        &SplitConfig {
            train_fraction: config.train_fraction,
        },
    )?;

    let hierarchies = Domain::ALL.map(|d| {
        let di = d as usize;
        let mut edges = Vec::new();
        for c in 0..k {
            let chapter = format!("{}-CH{c:02}", d.name().to_uppercase());
            edges.push(("ROOT".to_string(), chapter.clone()));
            for code in chapter_range(sizes[di], k, c) {
                edges.push((chapter.clone(), code_name(d, code)));
            }
        }
        edges
    });

    let mut ddi_pairs = Vec::new();
    for i in 0..sizes[2] {
        for j in i + 1..sizes[2] {
            if rng.random::<f64>() < config.ddi_density {
                ddi_pairs.push((code_name(Domain::Med, i), code_name(Domain::Med, j)));
            }
        }
    }

    let stats = corpus.statistics();
    Ok(SyntheticBundle {
        corpus,
        hierarchies,
        ddi_pairs,
        visit_clusters,
        canonical_meds: canonical[2].clone(),
        stats,
    })
}
