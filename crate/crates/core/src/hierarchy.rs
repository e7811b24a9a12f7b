//! Superclass → subclass label maps and the tree taxonomies they are cut from.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("label map has no superclasses")]
    NoSuperclasses,
    #[error("superclass {0:?} has an empty subclass set")]
    EmptySet(String),
    #[error("duplicate superclass {0:?}")]
    DuplicateSuperclass(String),
    #[error("duplicate subclass {text:?} under superclass {superclass:?}")]
    DuplicateSubclass { superclass: String, text: String },
    #[error("empty name in hierarchy")]
    EmptyName,
    #[error("unknown superclass {0:?}")]
    UnknownSuperclass(String),
    #[error("entry ({parent}, {text:?}) does not belong to this map")]
    ForeignEntry { parent: usize, text: String },
    #[error("label set for {0:?} is empty after post-processing")]
    EmptyLabelSet(String),
    #[error("node name {0:?} appears more than once (multiple parents are not supported)")]
    DuplicateNode(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("empty slice: no node at depth {0}")]
    EmptySlice(usize),
    #[error("depth must be at least 1")]
    ZeroDepth,
}

fn read(path: &Path) -> Result<String, HierarchyError> {
    fs::read_to_string(path).map_err(|source| HierarchyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: String) -> Result<(), HierarchyError> {
    fs::write(path, text).map_err(|source| HierarchyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(path: &Path, e: serde_json::Error) -> HierarchyError {
    HierarchyError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// One member of a label set. Identity is `(parent, text)`: the same caption
/// text may appear under several superclasses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubclassEntry {
    pub parent: usize,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelMapFile {
    superclasses: Vec<SuperclassRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SuperclassRecord {
    name: String,
    subclasses: Vec<String>,
}

/// The mapping from each superclass to its ordered subclass set, plus the
/// flattened union used as the subclass prediction space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    superclasses: Vec<String>,
    sets: Vec<Vec<String>>,
    // offsets[i]..offsets[i + 1] is superclass i's range in the union
    offsets: Vec<usize>,
}

impl LabelMap {
    pub fn new<S, I, T>(sets: I) -> Result<Self, HierarchyError>
    where
        I: IntoIterator<Item = (S, Vec<T>)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut superclasses = Vec::new();
        let mut all = Vec::new();
        let mut seen_sup = HashSet::new();
        for (name, subs) in sets {
            let name = name.into();
            if name.is_empty() {
                return Err(HierarchyError::EmptyName);
            }
            if !seen_sup.insert(name.clone()) {
                return Err(HierarchyError::DuplicateSuperclass(name));
            }
            let subs: Vec<String> = subs.into_iter().map(Into::into).collect();
            if subs.is_empty() {
                return Err(HierarchyError::EmptySet(name));
            }
            let mut seen = HashSet::new();
            for text in &subs {
                if text.is_empty() {
                    return Err(HierarchyError::EmptyName);
                }
                if !seen.insert(text.as_str()) {
                    return Err(HierarchyError::DuplicateSubclass {
                        superclass: name.clone(),
                        text: text.clone(),
                    });
                }
            }
            superclasses.push(name);
            all.push(subs);
        }
        if superclasses.is_empty() {
            return Err(HierarchyError::NoSuperclasses);
        }
        let mut offsets = Vec::with_capacity(all.len() + 1);
        offsets.push(0);
        for s in &all {
            offsets.push(offsets.last().unwrap() + s.len());
        }
        Ok(Self {
            superclasses,
            sets: all,
            offsets,
        })
    }

    /// Map in which every superclass's set is just itself.
    pub fn identity<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, HierarchyError> {
        Self::new(names.into_iter().map(|n| {
            let n = n.into();
            (n.clone(), vec![n])
        }))
    }

    pub fn superclasses(&self) -> &[String] {
        &self.superclasses
    }

    pub fn num_superclasses(&self) -> usize {
        self.superclasses.len()
    }

    /// Σ mᵢ, the size of the union subclass space.
    pub fn num_subclasses(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn set_sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }

    pub fn superclass_index(&self, name: &str) -> Option<usize> {
        self.superclasses.iter().position(|s| s == name)
    }

    /// Subclass texts of superclass `index`, in file order.
    pub fn set(&self, index: usize) -> &[String] {
        &self.sets[index]
    }

    /// Flat index range of superclass `index` within the union.
    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        self.offsets[index]..self.offsets[index + 1]
    }

    /// G(c): the subclass entries of a named superclass.
    pub fn subclasses_of(&self, superclass: &str) -> Result<Vec<SubclassEntry>, HierarchyError> {
        let i = self
            .superclass_index(superclass)
            .ok_or_else(|| HierarchyError::UnknownSuperclass(superclass.to_string()))?;
        Ok(self.sets[i]
            .iter()
            .map(|t| SubclassEntry {
                parent: i,
                text: t.clone(),
            })
            .collect())
    }

    /// G⁻¹(e): the superclass name owning an entry.
    pub fn parent_of(&self, entry: &SubclassEntry) -> Result<&str, HierarchyError> {
        match self.sets.get(entry.parent) {
            Some(set) if set.iter().any(|t| *t == entry.text) => {
                Ok(&self.superclasses[entry.parent])
            }
            _ => Err(HierarchyError::ForeignEntry {
                parent: entry.parent,
                text: entry.text.clone(),
            }),
        }
    }

    /// Superclass index owning flat union index `flat`.
    pub fn parent_of_flat(&self, flat: usize) -> usize {
        assert!(flat < self.num_subclasses(), "flat index {flat} out of range");
        // offsets is sorted; the owner is the last offset <= flat
        self.offsets.partition_point(|&o| o <= flat) - 1
    }

    /// Entry at flat union index `flat`.
    pub fn entry(&self, flat: usize) -> SubclassEntry {
        let parent = self.parent_of_flat(flat);
        SubclassEntry {
            parent,
            text: self.sets[parent][flat - self.offsets[parent]].clone(),
        }
    }

    /// All entries, superclass-major.
    pub fn union_subclasses(&self) -> Vec<SubclassEntry> {
        self.sets
            .iter()
            .enumerate()
            .flat_map(|(parent, set)| {
                set.iter().map(move |t| SubclassEntry {
                    parent,
                    text: t.clone(),
                })
            })
            .collect()
    }

    /// Distinct subclass texts in first-appearance order.
    pub fn distinct_texts(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.sets
            .iter()
            .flatten()
            .map(String::as_str)
            .filter(|t| seen.insert(*t))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = LabelMapFile {
            superclasses: self
                .superclasses
                .iter()
                .zip(&self.sets)
                .map(|(name, subs)| SuperclassRecord {
                    name: name.clone(),
                    subclasses: subs.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("label map serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: LabelMapFile = serde_json::from_str(text)?;
        Self::new(file.superclasses.into_iter().map(|r| (r.name, r.subclasses)))
            .map_err(serde::de::Error::custom)
    }
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap, HierarchyError> {
    let path = path.as_ref();
    let file: LabelMapFile = serde_json::from_str(&read(path)?).map_err(|e| malformed(path, e))?;
    LabelMap::new(file.superclasses.into_iter().map(|r| (r.name, r.subclasses)))
}

pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<(), HierarchyError> {
    write(path.as_ref(), map.to_json())
}

/// True if `needle` occurs in `haystack` bounded by non-alphanumeric
/// characters or the string ends, ignoring case.
pub fn contains_whole_word(haystack: &str, needle: &str) -> bool {
    let hay = haystack.to_lowercase();
    let needle = needle.to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = hay[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Cleans a generated label set: optionally suffixes the superclass name onto
/// labels that lack it, drops duplicates (first wins), and optionally appends
/// the superclass itself.
pub fn postprocess_label_set(
    superclass: &str,
    raw: &[String],
    append_superclass: bool,
    include_superclass: bool,
) -> Result<Vec<String>, HierarchyError> {
    let mut out: Vec<String> = Vec::with_capacity(raw.len() + 1);
    for item in raw {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let label = if append_superclass && !contains_whole_word(item, superclass) {
            format!("{item} {superclass}")
        } else {
            item.to_string()
        };
        if !out.contains(&label) {
            out.push(label);
        }
    }
    if include_superclass && !out.iter().any(|l| l.eq_ignore_ascii_case(superclass)) {
        out.push(superclass.to_string());
    }
    if out.is_empty() {
        return Err(HierarchyError::EmptyLabelSet(superclass.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNodeFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<DagNodeFile>,
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    children: Vec<usize>,
    depth: usize,
}

/// A rooted tree taxonomy. Node 0 is the root; nodes are stored in
/// depth-first pre-order.
#[derive(Debug, Clone)]
pub struct HierarchyDag {
    nodes: Vec<Node>,
    by_name: HashMap<String, usize>,
}

impl HierarchyDag {
    pub fn from_tree(root: &DagNodeFile) -> Result<Self, HierarchyError> {
        let mut dag = Self {
            nodes: Vec::new(),
            by_name: HashMap::new(),
        };
        dag.insert(root, 0)?;
        Ok(dag)
    }

    fn insert(&mut self, node: &DagNodeFile, depth: usize) -> Result<usize, HierarchyError> {
        if node.name.is_empty() {
            return Err(HierarchyError::EmptyName);
        }
        let id = self.nodes.len();
        if self.by_name.insert(node.name.clone(), id).is_some() {
            return Err(HierarchyError::DuplicateNode(node.name.clone()));
        }
        self.nodes.push(Node {
            name: node.name.clone(),
            children: Vec::with_capacity(node.children.len()),
            depth,
        });
        for child in &node.children {
            let c = self.insert(child, depth + 1)?;
            self.nodes[id].children.push(c);
        }
        Ok(id)
    }

    pub fn to_tree(&self) -> DagNodeFile {
        self.subtree(0)
    }

    fn subtree(&self, id: usize) -> DagNodeFile {
        DagNodeFile {
            name: self.nodes[id].name.clone(),
            children: self.nodes[id].children.iter().map(|&c| self.subtree(c)).collect(),
        }
    }

    pub fn root(&self) -> &str {
        &self.nodes[0].name
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Greatest root distance of any node.
    pub fn height(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn depth_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).map(|&i| self.nodes[i].depth)
    }

    pub fn children_of(&self, name: &str) -> Option<Vec<&str>> {
        self.by_name.get(name).map(|&i| {
            self.nodes[i]
                .children
                .iter()
                .map(|&c| self.nodes[c].name.as_str())
                .collect()
        })
    }

    fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_empty()
    }

    /// All leaf names in depth-first order.
    pub fn leaves(&self) -> Vec<&str> {
        (0..self.nodes.len())
            .filter(|&i| self.is_leaf(i))
            .map(|i| self.nodes[i].name.as_str())
            .collect()
    }

    fn descendant_leaves(&self, id: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if self.is_leaf(n) {
                out.push(self.nodes[n].name.clone());
            } else {
                stack.extend(self.nodes[n].children.iter().rev());
            }
        }
        out
    }

    /// Descendant leaves of a named node (a leaf yields itself).
    pub fn leaves_under(&self, name: &str) -> Result<Vec<String>, HierarchyError> {
        let id = *self
            .by_name
            .get(name)
            .ok_or_else(|| HierarchyError::UnknownNode(name.to_string()))?;
        Ok(self.descendant_leaves(id))
    }

    /// Cuts the tree at `depth`: every node at that root distance becomes a
    /// superclass over its descendant leaves, and shallower leaves become
    /// their own class.
    pub fn slice_at_depth(&self, depth: usize) -> Result<LabelMap, HierarchyError> {
        if depth == 0 {
            return Err(HierarchyError::ZeroDepth);
        }
        if !self.nodes.iter().any(|n| n.depth == depth) {
            return Err(HierarchyError::EmptySlice(depth));
        }
        // pre-order storage means index order is depth-first order
        let picked = (0..self.nodes.len()).filter(|&i| {
            let n = &self.nodes[i];
            n.depth == depth || (n.depth < depth && self.is_leaf(i))
        });
        LabelMap::new(
            picked
                .map(|i| (self.nodes[i].name.clone(), self.descendant_leaves(i)))
                .collect::<Vec<_>>(),
        )
    }

    /// Maps each named node to every leaf beneath it.
    pub fn expand_noisy<S: AsRef<str>>(&self, superclasses: &[S]) -> Result<LabelMap, HierarchyError> {
        let sets = superclasses
            .iter()
            .map(|s| Ok((s.as_ref().to_string(), self.leaves_under(s.as_ref())?)))
            .collect::<Result<Vec<_>, HierarchyError>>()?;
        LabelMap::new(sets)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_tree()).expect("dag serializes");
        s.push('\n');
        s
    }
}

pub fn load_dag(path: impl AsRef<Path>) -> Result<HierarchyDag, HierarchyError> {
    let path = path.as_ref();
    let tree: DagNodeFile = serde_json::from_str(&read(path)?).map_err(|e| malformed(path, e))?;
    HierarchyDag::from_tree(&tree)
}

pub fn save_dag(dag: &HierarchyDag, path: impl AsRef<Path>) -> Result<(), HierarchyError> {
    write(path.as_ref(), dag.to_json())
}
