//! Layer-aligned topic taxonomies built from hypernym edge lists.
//!
//! A [`TopicTree`] of depth `T` has `T + 1` layers: layer 0 holds words and
//! layer `T` holds the roots. Every node below the roots has exactly one
//! parent in the next layer up, and every topic node has at least one child.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

/// Raw `child -> parent` relation as read from an edge list.
#[derive(Debug, Clone, Default)]
pub struct HypernymGraph {
    nodes: Vec<String>,
    node_index: HashMap<String, usize>,
    edges: Vec<(usize, usize)>,
}

impl HypernymGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.node_index.get(name) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(name.to_string());
        self.node_index.insert(name.to_string(), i);
        i
    }

    pub fn add_edge(&mut self, child: &str, parent: &str) -> Result<()> {
        if child == parent {
            return Err(Error::Taxonomy(format!("self-loop on '{child}'")));
        }
        let c = self.intern(child);
        let p = self.intern(parent);
        self.edges.push((c, p));
        Ok(())
    }

    pub fn from_edges<'a>(edges: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut g = Self::new();
        for (c, p) in edges {
            g.add_edge(c, p)?;
        }
        Ok(g)
    }

    /// Reads `child<TAB>parent` lines. Blank lines and `#` comments are skipped.
    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut g = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (child, parent) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: "expected 'child<TAB>parent'".into(),
            })?;
            if child.is_empty() || parent.is_empty() || parent.contains('\t') {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: "expected exactly two non-empty fields".into(),
                });
            }
            g.add_edge(child, parent).map_err(|e| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Non-fatal events recorded while building a tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeWarning {
    /// A node listed several parents; only the first one in edge order is kept.
    ExtraParentDropped { node: String, kept: String, dropped: String },
    /// A topic node ended up without any descendants in the word layer.
    ChildlessTopicDropped { node: String, layer: usize },
}

impl fmt::Display for TreeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeWarning::ExtraParentDropped { node, kept, dropped } => {
                write!(f, "'{node}' has several parents; kept '{kept}', dropped '{dropped}'")
            }
            TreeWarning::ChildlessTopicDropped { node, layer } => {
                write!(f, "topic '{node}' at layer {layer} has no descendants and was dropped")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicTree {
    layers: Vec<Vec<String>>,
    /// `parents[t][i]` is the index in layer `t + 1` of node `i` of layer `t`.
    parents: Vec<Vec<usize>>,
    /// `children[t][j]` lists layer `t - 1` indices; empty for `t = 0`.
    children: Vec<Vec<Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    depth: usize,
    layers: Vec<Vec<String>>,
    parent: BTreeMap<String, String>,
    layer_sizes: Vec<usize>,
}

impl TopicTree {
    /// Builds a tree from explicit layers and parent indices, validating every
    /// structural invariant.
    pub fn from_layers(layers: Vec<Vec<String>>, parents: Vec<Vec<usize>>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Taxonomy("a tree needs at least one topic layer".into()));
        }
        if parents.len() != layers.len() - 1 {
            return Err(Error::Taxonomy("parent table does not match layer count".into()));
        }
        let mut seen = HashMap::new();
        for (t, layer) in layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::Taxonomy(format!("layer {t} is empty")));
            }
            for name in layer {
                if let Some(prev) = seen.insert(name.as_str(), t) {
                    return Err(Error::Taxonomy(format!(
                        "node '{name}' appears in layers {prev} and {t}"
                    )));
                }
            }
        }
        let mut children = vec![Vec::new(); layers.len()];
        for t in 1..layers.len() {
            children[t] = vec![Vec::new(); layers[t].len()];
        }
        for (t, ps) in parents.iter().enumerate() {
            if ps.len() != layers[t].len() {
                return Err(Error::Taxonomy(format!("layer {t} has an incomplete parent table")));
            }
            for (i, &p) in ps.iter().enumerate() {
                if p >= layers[t + 1].len() {
                    return Err(Error::Taxonomy(format!(
                        "parent index {p} of '{}' out of range",
                        layers[t][i]
                    )));
                }
                children[t + 1][p].push(i);
            }
        }
        for t in 1..layers.len() {
            if let Some(j) = children[t].iter().position(Vec::is_empty) {
                return Err(Error::Taxonomy(format!(
                    "topic '{}' at layer {t} has no children",
                    layers[t][j]
                )));
            }
        }
        Ok(Self {
            layers,
            parents,
            children,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[Vec<String>] {
        &self.layers
    }

    pub fn layer(&self, t: usize) -> &[String] {
        &self.layers[t]
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Index in layer `t + 1` of the parent of node `i` of layer `t`.
    pub fn parent(&self, t: usize, i: usize) -> Option<usize> {
        self.parents.get(t).map(|p| p[i])
    }

    /// Children (layer `t - 1` indices) of node `j` of layer `t >= 1`.
    pub fn children(&self, t: usize, j: usize) -> &[usize] {
        &self.children[t][j]
    }

    /// Parent name for every non-root node.
    pub fn parent_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        for (t, ps) in self.parents.iter().enumerate() {
            for (i, &p) in ps.iter().enumerate() {
                map.insert(self.layers[t][i].clone(), self.layers[t + 1][p].clone());
            }
        }
        map
    }

    /// Number of (child, parent) edges across all adjacent layer pairs.
    pub fn num_edges(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> String {
        let doc = TreeJson {
            depth: self.depth(),
            layers: self.layers.clone(),
            parent: self.parent_map(),
            layer_sizes: self.layer_sizes(),
        };
        serde_json::to_string_pretty(&doc).expect("tree serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TreeJson = serde_json::from_str(text)?;
        if doc.layers.len() != doc.depth + 1 {
            return Err(Error::Taxonomy("depth does not match number of layers".into()));
        }
        let mut index: Vec<HashMap<&str, usize>> = Vec::new();
        for layer in &doc.layers {
            index.push(layer.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect());
        }
        let mut parents = Vec::new();
        for t in 0..doc.depth {
            let mut ps = Vec::with_capacity(doc.layers[t].len());
            for name in &doc.layers[t] {
                let parent = doc
                    .parent
                    .get(name)
                    .ok_or_else(|| Error::Taxonomy(format!("'{name}' has no parent")))?;
                let p = index[t + 1].get(parent.as_str()).ok_or_else(|| {
                    Error::Taxonomy(format!("parent '{parent}' of '{name}' is not in layer {}", t + 1))
                })?;
                ps.push(*p);
            }
            parents.push(ps);
        }
        let tree = Self::from_layers(doc.layers, parents)?;
        if tree.layer_sizes() != doc.layer_sizes {
            return Err(Error::Taxonomy("layer_sizes disagree with layers".into()));
        }
        Ok(tree)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Maps the tree onto model indices: word-layer nodes become vocabulary
    /// ids, topic layers keep their tree order.
    pub fn index(&self, vocab: &Vocabulary) -> Result<TreeIndex> {
        let word_ids = self.layers[0]
            .iter()
            .map(|w| {
                vocab
                    .id(w)
                    .ok_or_else(|| Error::Taxonomy(format!("word '{w}' is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TreeIndex {
            tree: self.clone(),
            word_ids,
        })
    }
}

/// A tree bound to a vocabulary, addressing nodes by model index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeIndex {
    tree: TopicTree,
    word_ids: Vec<usize>,
}

impl TreeIndex {
    /// Binds a tree whose word layer is already expressed as model ids.
    pub fn from_word_ids(tree: TopicTree, word_ids: Vec<usize>) -> Result<Self> {
        if word_ids.len() != tree.layers[0].len() {
            return Err(Error::Taxonomy("word id table does not match the word layer".into()));
        }
        Ok(Self { tree, word_ids })
    }

    pub fn tree(&self) -> &TopicTree {
        &self.tree
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    /// Model index of node `i` of tree layer `t`.
    pub fn model_index(&self, t: usize, i: usize) -> usize {
        if t == 0 {
            self.word_ids[i]
        } else {
            i
        }
    }

    /// Model indices of every node of layer `t` present in the tree.
    pub fn members(&self, t: usize) -> Vec<usize> {
        (0..self.tree.layers[t].len()).map(|i| self.model_index(t, i)).collect()
    }

    /// Positive and negative sets for topic `j` of layer `layer`, in model
    /// indices of layer `layer - 1`.
    pub fn pair_sets(&self, layer: usize, j: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let (pos, neg) = positive_negative_sets(&self.tree, layer, j)?;
        let below = layer - 1;
        Ok((
            pos.into_iter().map(|i| self.model_index(below, i)).collect(),
            neg.into_iter().map(|i| self.model_index(below, i)).collect(),
        ))
    }

    /// Every `(child model index, parent model index)` pair between layers
    /// `t - 1` and `t`.
    pub fn edges(&self, t: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, ch) in self.tree.children[t].iter().enumerate() {
            for &i in ch {
                out.push((self.model_index(t - 1, i), j));
            }
        }
        out
    }
}

fn resolve_parents(graph: &HypernymGraph, warnings: &mut Vec<TreeWarning>) -> Vec<Option<usize>> {
    let mut parent: Vec<Option<usize>> = vec![None; graph.nodes.len()];
    for &(c, p) in &graph.edges {
        match parent[c] {
            None => parent[c] = Some(p),
            Some(kept) if kept != p => {
                let w = TreeWarning::ExtraParentDropped {
                    node: graph.nodes[c].clone(),
                    kept: graph.nodes[kept].clone(),
                    dropped: graph.nodes[p].clone(),
                };
                log::warn!("{w}");
                warnings.push(w);
            }
            Some(_) => {}
        }
    }
    parent
}

fn node_depths(graph: &HypernymGraph, parent: &[Option<usize>]) -> Result<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = graph.nodes.len();
    let mut depth = vec![UNSEEN; n];
    let mut on_path = vec![false; n];
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = start;
        while depth[cur] == UNSEEN {
            if on_path[cur] {
                return Err(Error::Cycle(graph.nodes[cur].clone()));
            }
            on_path[cur] = true;
            path.push(cur);
            match parent[cur] {
                Some(p) => cur = p,
                None => {
                    depth[cur] = 0;
                    path.pop();
                    on_path[cur] = false;
                    break;
                }
            }
        }
        while let Some(node) = path.pop() {
            on_path[node] = false;
            depth[node] = depth[parent[node].expect("non-root on path")] + 1;
        }
    }
    Ok(depth)
}

/// Prunes topic nodes without children layer by layer, bottom-up, and
/// re-indexes parents. `keep0` selects the surviving word-layer nodes.
fn prune(
    layers: Vec<Vec<String>>,
    parents: Vec<Vec<usize>>,
    keep0: &[bool],
    warn_on_drop: bool,
    warnings: &mut Vec<TreeWarning>,
) -> Result<TopicTree> {
    let depth = layers.len() - 1;
    let mut keep: Vec<Vec<bool>> = vec![keep0.to_vec()];
    for t in 1..=depth {
        let mut alive = vec![false; layers[t].len()];
        for (i, &p) in parents[t - 1].iter().enumerate() {
            if keep[t - 1][i] {
                alive[p] = true;
            }
        }
        if warn_on_drop {
            for (j, &a) in alive.iter().enumerate() {
                if !a {
                    let w = TreeWarning::ChildlessTopicDropped {
                        node: layers[t][j].clone(),
                        layer: t,
                    };
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
        }
        keep.push(alive);
    }
    let remap: Vec<Vec<Option<usize>>> = keep
        .iter()
        .map(|k| {
            let mut next = 0;
            k.iter()
                .map(|&alive| {
                    alive.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        })
        .collect();
    let new_layers: Vec<Vec<String>> = layers
        .into_iter()
        .zip(&keep)
        .map(|(layer, k)| layer.into_iter().zip(k).filter(|(_, &a)| a).map(|(n, _)| n).collect())
        .collect();
    if new_layers.iter().any(Vec::is_empty) {
        return Err(Error::NoOverlap);
    }
    let new_parents = parents
        .iter()
        .enumerate()
        .map(|(t, ps)| {
            ps.iter()
                .enumerate()
                .filter(|(i, _)| keep[t][*i])
                .map(|(_, &p)| remap[t + 1][p].expect("parent of a surviving node survives"))
                .collect()
        })
        .collect();
    TopicTree::from_layers(new_layers, new_parents)
}

/// Keeps the top `depth` levels of the graph as topic layers and turns
/// everything deeper into the word layer, attached to its nearest kept
/// ancestor. Returns the tree together with any warnings raised.
pub fn top_down_truncate(graph: &HypernymGraph, depth: usize) -> Result<(TopicTree, Vec<TreeWarning>)> {
    if depth == 0 {
        return Err(Error::InvalidArgument("tree depth must be >= 1".into()));
    }
    let mut warnings = Vec::new();
    let parent = resolve_parents(graph, &mut warnings);
    let levels = node_depths(graph, &parent)?;
    if !parent.iter().any(Option::is_none) {
        return Err(Error::Taxonomy("graph has no root".into()));
    }

    // Layer of each node; graph level d < depth maps to layer depth - d.
    let layer_of = |d: usize| depth.saturating_sub(d);
    let mut layers: Vec<Vec<String>> = vec![Vec::new(); depth + 1];
    let mut slot = vec![usize::MAX; graph.nodes.len()];
    for (node, &d) in levels.iter().enumerate() {
        let t = layer_of(d);
        slot[node] = layers[t].len();
        layers[t].push(graph.nodes[node].clone());
    }
    let mut parents: Vec<Vec<usize>> = layers.iter().take(depth).map(|l| vec![0; l.len()]).collect();
    for (node, &d) in levels.iter().enumerate() {
        if d == 0 {
            continue;
        }
        let t = layer_of(d);
        // Climb to the ancestor on level depth - 1 for deep nodes.
        let mut anc = parent[node].expect("non-root has a parent");
        if d > depth {
            for _ in 0..(d - depth) {
                anc = parent[anc].expect("ancestor chain reaches the root");
            }
        }
        debug_assert_eq!(layer_of(levels[anc]), t + 1);
        parents[t][slot[node]] = slot[anc];
    }
    let keep0 = vec![true; layers[0].len()];
    if layers[0].is_empty() {
        return Err(Error::Taxonomy(format!("graph is shallower than depth {depth}")));
    }
    let tree = prune(layers, parents, &keep0, true, &mut warnings)?;
    Ok((tree, warnings))
}

/// Restricts the word layer to `vocab` and drops topics left without
/// descendants.
pub fn down_top_restrict(tree: &TopicTree, vocab: &Vocabulary) -> Result<TopicTree> {
    let keep0: Vec<bool> = tree.layers[0].iter().map(|w| vocab.contains(w)).collect();
    if !keep0.iter().any(|&k| k) {
        return Err(Error::NoOverlap);
    }
    let mut warnings = Vec::new();
    prune(tree.layers.clone(), tree.parents.clone(), &keep0, false, &mut warnings)
}

/// Summary of a restriction run: `intersection` words survive and the tree
/// has `layer_sizes` nodes per layer, bottom to top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictionReport {
    pub intersection: usize,
    pub layer_sizes: Vec<usize>,
}

impl fmt::Display for RestrictionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        write!(f, "intersection {} words; layer sizes [{}]", self.intersection, sizes.join(","))
    }
}

impl RestrictionReport {
    pub fn of(tree: &TopicTree) -> Self {
        Self {
            intersection: tree.layer(0).len(),
            layer_sizes: tree.layer_sizes(),
        }
    }
}

/// Hyponyms `D` of topic `j` at layer `layer` and the remaining nodes of
/// layer `layer - 1`, both as tree indices.
pub fn positive_negative_sets(tree: &TopicTree, layer: usize, j: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if layer == 0 || layer > tree.depth() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside 1..={}",
            tree.depth()
        )));
    }
    if j >= tree.layers[layer].len() {
        return Err(Error::InvalidArgument(format!("topic {j} not in layer {layer}")));
    }
    let mut is_pos = vec![false; tree.layers[layer - 1].len()];
    for &i in tree.children(layer, j) {
        is_pos[i] = true;
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..is_pos.len()).partition(|&i| is_pos[i]);
    Ok((pos, neg))
}
