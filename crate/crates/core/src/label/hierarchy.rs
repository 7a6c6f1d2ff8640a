use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::LabelError;

/// One node as it appears in a hierarchy file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default)]
    pub children: Vec<String>,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub descriptors: Vec<String>,
}

/// `{"nodes":[...]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    name: String,
    parents: Vec<usize>,
    children: Vec<usize>,
    synonyms: Vec<String>,
    descriptors: Vec<String>,
}

/// Lexical graph of class labels. Parent and child edges are kept mutually
/// inverse; declaring an edge on either endpoint is enough.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelHierarchy {
    nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
}

impl LabelHierarchy {
    pub fn from_spec(spec: &HierarchySpec) -> Result<Self, LabelError> {
        let mut index = BTreeMap::new();
        let mut nodes = Vec::with_capacity(spec.nodes.len());
        for n in &spec.nodes {
            if n.name.is_empty() {
                return Err(LabelError::InvalidHierarchy("empty node name".into()));
            }
            if index.insert(n.name.clone(), nodes.len()).is_some() {
                return Err(LabelError::InvalidHierarchy(format!("duplicate node '{}'", n.name)));
            }
            nodes.push(Node {
                name: n.name.clone(),
                parents: Vec::new(),
                children: Vec::new(),
                synonyms: n.synonyms.clone(),
                descriptors: n.descriptors.clone(),
            });
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| LabelError::InvalidHierarchy(format!("edge endpoint '{name}' is not a node")))
        };
        let mut edges: Vec<(usize, usize)> = Vec::new(); // (child, parent)
        for (i, n) in spec.nodes.iter().enumerate() {
            for p in &n.parents {
                edges.push((i, lookup(p)?));
            }
            for c in &n.children {
                edges.push((lookup(c)?, i));
            }
        }
        for (child, parent) in edges {
            if child == parent {
                return Err(LabelError::InvalidHierarchy(format!("self-loop on '{}'", nodes[child].name)));
            }
            if !nodes[child].parents.contains(&parent) {
                nodes[child].parents.push(parent);
                nodes[parent].children.push(child);
            }
        }
        let h = Self { nodes, index };
        h.check_acyclic()?;
        Ok(h)
    }

    fn check_acyclic(&self) -> Result<(), LabelError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = alloc::vec![0u8; self.nodes.len()];
        for start in 0..self.nodes.len() {
            if state[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = alloc::vec![(start, 0)];
            state[start] = 1;
            while let Some((node, next)) = stack.pop() {
                if let Some(&p) = self.nodes[node].parents.get(next) {
                    stack.push((node, next + 1));
                    match state[p] {
                        0 => {
                            state[p] = 1;
                            stack.push((p, 0));
                        }
                        1 => {
                            return Err(LabelError::InvalidHierarchy(format!(
                                "cycle through '{}'",
                                self.nodes[p].name
                            )))
                        }
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    pub fn parents(&self, label: &str) -> Option<Vec<&str>> {
        let n = &self.nodes[*self.index.get(label)?];
        Some(n.parents.iter().map(|&p| self.nodes[p].name.as_str()).collect())
    }

    pub fn children(&self, label: &str) -> Option<Vec<&str>> {
        let n = &self.nodes[*self.index.get(label)?];
        Some(n.children.iter().map(|&c| self.nodes[c].name.as_str()).collect())
    }

    pub fn to_spec(&self) -> HierarchySpec {
        HierarchySpec {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    name: n.name.clone(),
                    parents: n.parents.iter().map(|&p| self.nodes[p].name.clone()).collect(),
                    children: Vec::new(),
                    synonyms: n.synonyms.clone(),
                    descriptors: n.descriptors.clone(),
                })
                .collect(),
        }
    }
}

/// The target class followed by its related labels, without duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedLabelSet {
    target: String,
    expansion: Vec<String>,
}

impl AugmentedLabelSet {
    /// Builds a set with `target` first; later duplicates are dropped.
    pub fn new(target: impl Into<String>, related: impl IntoIterator<Item = String>) -> Self {
        let target = target.into();
        let mut seen = BTreeSet::new();
        seen.insert(target.clone());
        let mut expansion = alloc::vec![target.clone()];
        for term in related {
            if seen.insert(term.clone()) {
                expansion.push(term);
            }
        }
        Self { target, expansion }
    }

    /// The plain (unaugmented) set `{c}`.
    pub fn singleton(target: impl Into<String>) -> Self {
        Self::new(target, core::iter::empty())
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    /// All labels, target first.
    pub fn labels(&self) -> &[String] {
        &self.expansion
    }

    pub fn len(&self) -> usize {
        self.expansion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expansion.is_empty()
    }
}

/// Collects the target, its parents and children up to `depth` hops
/// (breadth-first, parents before children), then the synonyms of every
/// collected node, then descriptor-prefixed copies of all of those terms.
pub fn expand_labels(
    h: &LabelHierarchy,
    target: &str,
    depth: usize,
    use_descriptors: bool,
) -> Result<AugmentedLabelSet, LabelError> {
    let &start = h.index.get(target).ok_or_else(|| LabelError::UnknownLabel(target.to_string()))?;

    let mut order = alloc::vec![start];
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([(start, 0usize)]);
    while let Some((node, dist)) = queue.pop_front() {
        if dist >= depth {
            continue;
        }
        let n = &h.nodes[node];
        for &next in n.parents.iter().chain(n.children.iter()) {
            if seen.insert(next) {
                order.push(next);
                queue.push_back((next, dist + 1));
            }
        }
    }

    let mut terms: Vec<String> = order.iter().map(|&i| h.nodes[i].name.clone()).collect();
    if depth > 0 {
        for &i in &order {
            terms.extend(h.nodes[i].synonyms.iter().cloned());
        }
    }
    if use_descriptors {
        let base = terms.clone();
        for d in &h.nodes[start].descriptors {
            for t in &base {
                terms.push(format!("{d} {t}"));
            }
        }
    }
    Ok(AugmentedLabelSet::new(target, terms.into_iter().skip(1)))
}
