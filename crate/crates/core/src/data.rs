//! Propagation trees, path extraction and path embeddings.
//!
//! A rumor is a reply tree rooted at the source post. Every root-to-leaf path is
//! embedded by max-pooling the word vectors of all posts along it, giving the
//! per-rumor path matrix the encoder consumes.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dimension of the pretrained word vectors used on real data.
pub const DEFAULT_DIM: usize = 300;
pub const DEFAULT_MAX_PATHS: usize = 64;
pub const OOV_TOKEN: &str = "<unk>";
pub const URL_TOKEN: &str = "<url>";
pub const USER_TOKEN: &str = "<user>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostNode {
    pub tokens: Vec<String>,
    pub parent: Option<usize>,
    /// Ordering hint; the position of the post in its record.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationTree {
    pub id: String,
    pub domain: Domain,
    pub label: Option<usize>,
    pub nodes: Vec<PostNode>,
    pub root: usize,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub id: String,
    pub label: Option<usize>,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub text: String,
    pub parent: Option<usize>,
}

/// Lowercases, splits on whitespace, and maps URLs and user mentions to
/// placeholder tokens. An empty post becomes a single OOV token.
pub fn tokenize(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|raw| {
            let w = raw.to_lowercase();
            if w.starts_with("http://") || w.starts_with("https://") || w.starts_with("www.") {
                URL_TOKEN.to_string()
            } else if w.starts_with('@') && w.len() > 1 {
                USER_TOKEN.to_string()
            } else {
                w
            }
        })
        .collect();
    if tokens.is_empty() {
        vec![OOV_TOKEN.to_string()]
    } else {
        tokens
    }
}

impl PropagationTree {
    pub fn from_record(record: TreeRecord, domain: Domain) -> Result<Self> {
        let nodes = record
            .nodes
            .into_iter()
            .enumerate()
            .map(|(rank, n)| PostNode {
                tokens: tokenize(&n.text),
                parent: n.parent,
                rank,
            })
            .collect();
        let tree = PropagationTree {
            id: record.id,
            domain,
            label: record.label,
            nodes,
            root: 0,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn to_record(&self) -> TreeRecord {
        TreeRecord {
            id: self.id.clone(),
            label: self.label,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    text: n.tokens.join(" "),
                    parent: n.parent,
                })
                .collect(),
        }
    }

    fn invalid(&self, detail: String) -> Error {
        Error::Validation {
            tree: self.id.clone(),
            detail,
        }
    }

    /// Checks the single-root, in-range-parent and acyclicity invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(self.invalid("no nodes".into()));
        }
        if self.root != 0 || self.nodes[0].parent.is_some() {
            return Err(self.invalid("node 0 must be the root (parent null)".into()));
        }
        if self.domain == Domain::Source && self.label.is_none() {
            return Err(self.invalid("source-domain tree without a label".into()));
        }
        for (i, node) in self.nodes.iter().enumerate().skip(1) {
            match node.parent {
                None => return Err(self.invalid(format!("node {i} is a second root"))),
                Some(p) if p >= n => {
                    return Err(self.invalid(format!("node {i} has out-of-range parent {p}")))
                }
                Some(p) if p == i => return Err(self.invalid(format!("node {i} is its own parent"))),
                Some(_) => {}
            }
        }
        // Every node must reach the root within n hops.
        for start in 1..n {
            let mut cur = start;
            let mut hops = 0;
            while let Some(p) = self.nodes[cur].parent {
                cur = p;
                hops += 1;
                if hops > n {
                    return Err(self.invalid(format!("cycle through node {start}")));
                }
            }
        }
        Ok(())
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                children[p].push(i);
            }
        }
        children
    }

    pub fn leaves(&self) -> Vec<usize> {
        let children = self.children();
        let mut leaves: Vec<usize> = (0..self.nodes.len()).filter(|&i| children[i].is_empty()).collect();
        leaves.sort_by_key(|&i| (self.nodes[i].rank, i));
        leaves
    }
}

/// Root-to-leaf node sequences, one per leaf, ordered by leaf rank then index.
pub fn extract_paths(tree: &PropagationTree) -> Result<Vec<Vec<usize>>> {
    tree.validate()?;
    Ok(tree
        .leaves()
        .into_iter()
        .map(|leaf| {
            let mut path = vec![leaf];
            let mut cur = leaf;
            while let Some(p) = tree.nodes[cur].parent {
                path.push(p);
                cur = p;
            }
            path.reverse();
            path
        })
        .collect())
}

/// Keeps the `max` longest paths (ties by leaf order), preserving leaf order.
pub fn truncate_paths(paths: Vec<Vec<usize>>, max: usize) -> Vec<Vec<usize>> {
    if paths.len() <= max {
        return paths;
    }
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.sort_by(|&a, &b| paths[b].len().cmp(&paths[a].len()).then(a.cmp(&b)));
    let mut keep = order[..max].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| paths[i].clone()).collect()
}

/// Word vectors with a fallback row for unknown words.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: HashMap<String, usize>,
    vectors: Vec<f64>,
    oov: Vec<f64>,
}

fn word_hash(seed: u64, word: &str) -> u64 {
    // FNV-1a, seeded.
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn uniform_row(seed: u64, word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(word_hash(seed, word));
    (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect()
}

impl EmbeddingTable {
    /// Seeded uniform(-0.1, 0.1) rows. Each word's vector depends only on the
    /// seed and the word, so tables built from different vocabularies agree on
    /// shared words.
    pub fn random<'a>(vocab: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Self {
        let mut table = EmbeddingTable {
            dim,
            vocab: HashMap::new(),
            vectors: Vec::new(),
            oov: uniform_row(seed, "\0oov", dim),
        };
        for word in vocab {
            if !table.vocab.contains_key(word) {
                let row = uniform_row(seed, word, dim);
                table.push(word.to_string(), &row);
            }
        }
        table
    }

    /// Random table covering every token that appears in `trees`.
    pub fn random_for_trees(trees: &[PropagationTree], dim: usize, seed: u64) -> Self {
        let words: std::collections::BTreeSet<&str> = trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .flat_map(|n| n.tokens.iter().map(String::as_str))
            .collect();
        Self::random(words, dim, seed)
    }

    /// Text format: `word v1 ... v_dim` per line. Unknown words map to zeros.
    pub fn load(path: &Path, expected_dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = EmbeddingTable {
            dim: expected_dim,
            vocab: HashMap::new(),
            vectors: Vec::new(),
            oov: vec![0.0; expected_dim],
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })?;
            if values.len() != expected_dim {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: format!("expected {expected_dim} values, found {}", values.len()),
                });
            }
            if !table.vocab.contains_key(word) {
                table.push(word.to_string(), &values);
            }
        }
        Ok(table)
    }

    fn push(&mut self, word: String, row: &[f64]) {
        self.vocab.insert(word, self.vectors.len() / self.dim.max(1));
        self.vectors.extend_from_slice(row);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of known words (excluding the OOV row).
    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vocab.contains_key(word)
    }

    pub fn lookup(&self, word: &str) -> &[f64] {
        match self.vocab.get(word) {
            Some(&i) => &self.vectors[i * self.dim..(i + 1) * self.dim],
            None => &self.oov,
        }
    }

    pub fn oov(&self) -> &[f64] {
        &self.oov
    }
}

/// Elementwise max over the vectors of every word of every post on the path.
pub fn embed_path(path: &[usize], tree: &PropagationTree, table: &EmbeddingTable) -> Result<Vec<f64>> {
    if path.is_empty() {
        return Err(Error::Contract("embed_path on an empty path".into()));
    }
    let mut out = vec![f64::NEG_INFINITY; table.dim()];
    for &node in path {
        let post = tree.nodes.get(node).ok_or_else(|| Error::Validation {
            tree: tree.id.clone(),
            detail: format!("path references missing node {node}"),
        })?;
        for word in &post.tokens {
            for (o, v) in out.iter_mut().zip(table.lookup(word)) {
                *o = o.max(*v);
            }
        }
    }
    Ok(out)
}

/// Per-rumor path embedding matrix, row `j` for path `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub rumor_id: String,
    pub dim: usize,
    rows: Vec<f64>,
}

impl PathSet {
    pub fn from_rows(rumor_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Contract("a path set needs at least one row of equal width".into()));
        }
        Ok(PathSet {
            rumor_id: rumor_id.into(),
            dim,
            rows: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.dim..(j + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.rows
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.dim], self.rows.clone()).expect("path set shape is consistent")
    }

    /// Rows reordered by `perm` (row `k` of the result is row `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&j| self.row(j).to_vec()).collect();
        PathSet::from_rows(self.rumor_id.clone(), &rows).expect("permutation of a valid path set")
    }

    /// Every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        PathSet {
            rumor_id: self.rumor_id.clone(),
            dim: self.dim,
            rows: self.rows.iter().map(|x| x * c).collect(),
        }
    }
}

pub fn build_pathset(tree: &PropagationTree, table: &EmbeddingTable, max_paths: usize) -> Result<PathSet> {
    let paths = truncate_paths(extract_paths(tree)?, max_paths.max(1));
    let rows = paths
        .iter()
        .map(|p| embed_path(p, tree, table))
        .collect::<Result<Vec<_>>>()?;
    PathSet::from_rows(tree.id.clone(), &rows)
}

/// Reads a line-delimited dataset file. Blank lines are ignored.
pub fn load_dataset(path: &Path, domain: Domain) -> Result<Vec<PropagationTree>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trees = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TreeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        trees.push(PropagationTree::from_record(record, domain)?);
    }
    let counts = label_counts(&trees);
    log::info!("{}: {} trees, label counts {:?}", path.display(), trees.len(), counts);
    Ok(trees)
}

pub fn write_dataset(path: &Path, records: &[TreeRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Label → count, with unlabeled trees under `None`.
pub fn label_counts(trees: &[PropagationTree]) -> BTreeMap<Option<usize>, usize> {
    let mut counts = BTreeMap::new();
    for t in trees {
        *counts.entry(t.label).or_insert(0) += 1;
    }
    counts
}
