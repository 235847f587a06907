use std::rc::Rc;

use ndarray::Array2;

use crate::autograd::Mat;
use crate::corpus::{CodeHierarchy, CodeVocabulary};
use crate::error::{Error, Result};

/// Clipped tree distances between all codes of one domain. The learnable
/// per-bucket values live in the encoder's parameters (one `heads x buckets`
/// table per layer); this type only maps code pairs to buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBias {
    distance: Array2<usize>,
    max_path_distance: usize,
}

pub fn build_knowledge_bias(
    hierarchy: &CodeHierarchy,
    vocab: &CodeVocabulary,
    max_path_distance: usize,
) -> Result<KnowledgeBias> {
    if hierarchy.num_codes() != vocab.len() {
        return Err(Error::Dimension(format!(
            "{} hierarchy covers {} codes, vocabulary has {}",
            vocab.domain(),
            hierarchy.num_codes(),
            vocab.len()
        )));
    }
    let n = vocab.len();
    let mut distance = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = hierarchy.distance(i, j).min(max_path_distance);
            distance[[i, j]] = d;
            distance[[j, i]] = d;
        }
    }
    Ok(KnowledgeBias {
        distance,
        max_path_distance,
    })
}

impl KnowledgeBias {
    /// Builds directly from a (clipped, symmetric) distance matrix.
    pub fn from_distances(distance: Array2<usize>, max_path_distance: usize) -> Self {
        let distance = distance.mapv(|d| d.min(max_path_distance));
        Self {
            distance,
            max_path_distance,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.distance.nrows()
    }

    pub fn max_path_distance(&self) -> usize {
        self.max_path_distance
    }

    pub fn num_buckets(&self) -> usize {
        self.max_path_distance + 1
    }

    pub fn distance(&self, i: usize, j: usize) -> usize {
        self.distance[[i, j]]
    }

    pub fn bucket(&self, i: usize, j: usize) -> usize {
        self.distance[[i, j]]
    }

    pub fn distances(&self) -> &Array2<usize> {
        &self.distance
    }

    /// Row-major flat indices into a `heads x buckets` table for head `h`.
    pub fn flat_indices(&self, head: usize) -> Rc<Vec<usize>> {
        let b = self.num_buckets();
        Rc::new(self.distance.iter().map(|&d| head * b + d).collect())
    }

    /// Dense bias matrix of one head given a `heads x buckets` table.
    pub fn omega(&self, table: &Mat, head: usize) -> Mat {
        self.distance.mapv(|d| table[[head, d]])
    }
}
