//! ICD/ATC-style code trees read from `parent<TAB>child` edge lists.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{CodeVocabulary, Domain};
use crate::error::{Error, Result};

/// Name of the synthesized root when an edge list has zero or several
/// parentless nodes.
pub const ROOT_CODE: &str = "<root>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeHierarchy {
    domain: Domain,
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    root: usize,
    /// Tree node of each vocabulary code, by vocabulary index.
    code_node: Vec<usize>,
}

pub fn parse_edges(text: &str) -> Result<Vec<(String, String)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(c), None) if !p.is_empty() && !c.is_empty() => {
                edges.push((p.to_string(), c.to_string()))
            }
            _ => {
                return Err(Error::Parse {
                    file: "<hierarchy>".into(),
                    line: lineno + 1,
                    message: "expected `parent<TAB>child`".into(),
                })
            }
        }
    }
    Ok(edges)
}

pub fn load_hierarchy(path: &Path, vocab: &CodeVocabulary) -> Result<CodeHierarchy> {
    let text = fs::read_to_string(path)?;
    let edges = parse_edges(&text).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            file: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })?;
    build_hierarchy(&edges, vocab)
}

/// Builds the tree. Vocabulary codes absent from `edges` hang directly off
/// the root.
pub fn build_hierarchy(edges: &[(String, String)], vocab: &CodeVocabulary) -> Result<CodeHierarchy> {
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut intern = |name: &str, names: &mut Vec<String>| -> usize {
        *ids.entry(name.to_string()).or_insert_with(|| {
            names.push(name.to_string());
            names.len() - 1
        })
    };
    let mut parent: Vec<Option<usize>> = Vec::new();
    for (p, c) in edges {
        let pi = intern(p, &mut names);
        let ci = intern(c, &mut names);
        parent.resize(names.len(), None);
        match parent[ci] {
            Some(existing) if existing != pi => {
                return Err(Error::config(format!(
                    "{} hierarchy: `{c}` has two parents (`{}` and `{p}`)",
                    vocab.domain(),
                    names[existing]
                )))
            }
            _ => parent[ci] = Some(pi),
        }
    }
    detect_cycle(&names, &parent)?;

    let roots: Vec<usize> = (0..names.len()).filter(|&i| parent[i].is_none()).collect();
    let root = if roots.len() == 1 {
        roots[0]
    } else {
        let r = intern(ROOT_CODE, &mut names);
        parent.resize(names.len(), None);
        for &x in &roots {
            if x != r {
                parent[x] = Some(r);
            }
        }
        r
    };
    let mut code_node = Vec::with_capacity(vocab.len());
    for code in vocab.codes() {
        let n = intern(code, &mut names);
        parent.resize(names.len(), None);
        if n != root && parent[n].is_none() {
            parent[n] = Some(root);
        }
        code_node.push(n);
    }

    let mut depth = vec![usize::MAX; names.len()];
    depth[root] = 0;
    for start in 0..names.len() {
        let mut chain = Vec::new();
        let mut cur = start;
        while depth[cur] == usize::MAX {
            chain.push(cur);
            cur = parent[cur].expect("non-root node has a parent");
        }
        let mut d = depth[cur];
        for &n in chain.iter().rev() {
            d += 1;
            depth[n] = d;
        }
    }
    Ok(CodeHierarchy {
        domain: vocab.domain(),
        names,
        parent,
        depth,
        root,
        code_node,
    })
}

fn detect_cycle(names: &[String], parent: &[Option<usize>]) -> Result<()> {
    // 0 = unvisited, 1 = on current chain, 2 = known acyclic
    let mut state = vec![0u8; names.len()];
    for start in 0..names.len() {
        let mut chain: Vec<usize> = Vec::new();
        let mut cur = Some(start);
        while let Some(n) = cur {
            match state[n] {
                2 => break,
                1 => {
                    let pos = chain.iter().position(|&x| x == n).expect("on chain");
                    let mut cycle: Vec<String> =
                        chain[pos..].iter().rev().map(|&i| names[i].clone()).collect();
                    cycle.push(names[n].clone());
                    return Err(Error::HierarchyCycle(cycle));
                }
                _ => {
                    state[n] = 1;
                    chain.push(n);
                    cur = parent[n];
                }
            }
        }
        for n in chain {
            state[n] = 2;
        }
    }
    Ok(())
}

impl CodeHierarchy {
    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn root_name(&self) -> &str {
        &self.names[self.root]
    }

    pub fn num_codes(&self) -> usize {
        self.code_node.len()
    }

    /// Depth of vocabulary code `idx` (root has depth 0).
    pub fn depth(&self, idx: usize) -> usize {
        self.depth[self.code_node[idx]]
    }

    /// Parent name of vocabulary code `idx`, `None` when the code is the
    /// root itself.
    pub fn parent(&self, idx: usize) -> Option<&str> {
        self.parent[self.code_node[idx]].map(|p| self.names[p].as_str())
    }

    /// Tree path length between two vocabulary codes through their lowest
    /// common ancestor.
    pub fn distance(&self, a: usize, b: usize) -> usize {
        let (mut x, mut y) = (self.code_node[a], self.code_node[b]);
        let mut steps = 0;
        while self.depth[x] > self.depth[y] {
            x = self.parent[x].expect("deeper node has parent");
            steps += 1;
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent[y].expect("deeper node has parent");
            steps += 1;
        }
        while x != y {
            x = self.parent[x].expect("below root");
            y = self.parent[y].expect("below root");
            steps += 2;
        }
        steps
    }
}
