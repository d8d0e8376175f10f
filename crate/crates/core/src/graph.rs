//! The two-edge-type dependency graph and its path compilation.
//!
//! An upper-to-lower (`u2l`) edge `i -> j` means the cost of `j` reads the
//! current parameters of `i`. A lower-to-upper (`l2u`) edge `i -> j` means the
//! cost of `j` reads the approximate optimum of `i`, and that `i` calls `j`
//! after each completed unroll.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Adjacency = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DependencyGraph {
    pub u2l: Adjacency,
    pub l2u: Adjacency,
}

impl DependencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_u2l(mut self, from: &str, to: &[&str]) -> Self {
        self.u2l
            .entry(from.to_string())
            .or_default()
            .extend(to.iter().map(|s| s.to_string()));
        self
    }

    pub fn with_l2u(mut self, from: &str, to: &[&str]) -> Self {
        self.l2u
            .entry(from.to_string())
            .or_default()
            .extend(to.iter().map(|s| s.to_string()));
        self
    }

    fn edges(adj: &Adjacency) -> impl Iterator<Item = (&str, &str)> {
        adj.iter()
            .flat_map(|(from, tos)| tos.iter().map(move |to| (from.as_str(), to.as_str())))
    }

    pub fn u2l_edges(&self) -> impl Iterator<Item = (&str, &str)> {
        Self::edges(&self.u2l)
    }

    pub fn l2u_edges(&self) -> impl Iterator<Item = (&str, &str)> {
        Self::edges(&self.l2u)
    }

    pub fn has_u2l(&self, from: &str, to: &str) -> bool {
        self.u2l.get(from).is_some_and(|s| s.contains(to))
    }

    pub fn has_l2u(&self, from: &str, to: &str) -> bool {
        self.l2u.get(from).is_some_and(|s| s.contains(to))
    }

    /// Sources of `u2l` edges into `name`.
    pub fn uppers_of(&self, name: &str) -> BTreeSet<String> {
        self.u2l_edges()
            .filter(|&(_, to)| to == name)
            .map(|(from, _)| from.to_string())
            .collect()
    }

    /// Sources of `l2u` edges into `name`: the problems that must finish an
    /// unroll before `name` steps.
    pub fn lowers_of(&self, name: &str) -> BTreeSet<String> {
        self.l2u_edges()
            .filter(|&(_, to)| to == name)
            .map(|(from, _)| from.to_string())
            .collect()
    }

    /// Targets of `l2u` edges out of `name`.
    pub fn callees_of(&self, name: &str) -> BTreeSet<String> {
        self.l2u.get(name).cloned().unwrap_or_default()
    }

    /// Check endpoints, self-edges, `l2u` acyclicity and level ordering.
    pub fn validate(&self, names: &BTreeSet<String>) -> Result<()> {
        for (from, to) in self.u2l_edges().chain(self.l2u_edges()) {
            for n in [from, to] {
                if !names.contains(n) {
                    return Err(Error::Lookup(format!(
                        "edge {from} -> {to} names unknown problem `{n}`"
                    )));
                }
            }
            if from == to {
                return Err(Error::invalid(format!("self-edge on `{from}`")));
            }
        }
        if let Some(cycle) = find_cycle(names, |n| {
            self.l2u.get(n).into_iter().flatten().cloned().collect()
        }) {
            return Err(Error::GraphCycle(cycle));
        }
        // An upper problem must come after every lower it constrains.
        let combined = |n: &str| -> Vec<String> {
            let mut out: Vec<String> = self.l2u.get(n).into_iter().flatten().cloned().collect();
            out.extend(self.uppers_of(n));
            out
        };
        if let Some(cycle) = find_cycle(names, combined) {
            return Err(Error::Hierarchy(format!(
                "no level ordering satisfies the u2l edges: {}",
                cycle.join(" -> ")
            )));
        }
        Ok(())
    }
}

/// Depth-first cycle search; returns the cycle with its first node repeated at the end.
fn find_cycle(names: &BTreeSet<String>, succ: impl Fn(&str) -> Vec<String>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit(
        n: &str,
        succ: &dyn Fn(&str) -> Vec<String>,
        marks: &mut BTreeMap<String, Mark>,
        stack: &mut Vec<String>,
    ) -> Option<Vec<String>> {
        marks.insert(n.to_string(), Mark::Active);
        stack.push(n.to_string());
        for m in succ(n) {
            match marks.get(&m).copied().unwrap_or(Mark::New) {
                Mark::Active => {
                    let start = stack
                        .iter()
                        .position(|s| *s == m)
                        .expect("active node on stack");
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(m);
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(c) = visit(&m, succ, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks.insert(n.to_string(), Mark::Done);
        None
    }
    let mut marks: BTreeMap<String, Mark> = names.iter().map(|n| (n.clone(), Mark::New)).collect();
    for n in names {
        if marks[n] == Mark::New {
            if let Some(c) = visit(n, &succ, &mut marks, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

/// A path `k -> q1 -> ... -> qm`: first edge `u2l`, the rest `l2u`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Path(pub Vec<String>);

impl Path {
    pub fn nodes(&self) -> &[String] {
        &self.0
    }

    pub fn source(&self) -> &str {
        &self.0[0]
    }

    pub fn target(&self) -> &str {
        self.0.last().expect("paths are nonempty")
    }

    /// Number of edges.
    pub fn len(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" -> "))
    }
}

/// Paths `Q_{k,l}` for every problem `k` and every `l` that `k` reads as an
/// optimum. Pairs without a connection map to an empty list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledPaths {
    map: BTreeMap<String, BTreeMap<String, Vec<Path>>>,
}

impl CompiledPaths {
    pub fn get(&self, k: &str, l: &str) -> &[Path] {
        self.map
            .get(k)
            .and_then(|m| m.get(l))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// All `(l, Q_{k,l})` for a problem `k`, sorted by `l`.
    pub fn for_problem(&self, k: &str) -> impl Iterator<Item = (&str, &[Path])> {
        self.map
            .get(k)
            .into_iter()
            .flatten()
            .map(|(l, q)| (l.as_str(), q.as_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[Path])> {
        self.map.iter().flat_map(|(k, m)| {
            m.iter()
                .map(move |(l, q)| (k.as_str(), l.as_str(), q.as_slice()))
        })
    }

    pub fn total(&self) -> usize {
        self.iter().map(|(_, _, q)| q.len()).sum()
    }
}

/// Modified depth-first search: from each `u2l` edge out of `k`, extend only
/// along `l2u` edges, recording every simple path that ends at a lower of `k`.
pub fn compile_paths(graph: &DependencyGraph, names: &BTreeSet<String>) -> CompiledPaths {
    fn extend(
        graph: &DependencyGraph,
        targets: &BTreeSet<String>,
        stack: &mut Vec<String>,
        found: &mut BTreeMap<String, Vec<Path>>,
    ) {
        let last = stack.last().expect("nonempty").clone();
        if targets.contains(&last) {
            found
                .entry(last.clone())
                .or_default()
                .push(Path(stack.clone()));
        }
        for next in graph.l2u.get(&last).into_iter().flatten() {
            if !stack.contains(next) {
                stack.push(next.clone());
                extend(graph, targets, stack, found);
                stack.pop();
            }
        }
    }

    let mut map = BTreeMap::new();
    for k in names {
        let targets = graph.lowers_of(k);
        let mut found: BTreeMap<String, Vec<Path>> =
            targets.iter().map(|l| (l.clone(), Vec::new())).collect();
        for first in graph.u2l.get(k).into_iter().flatten() {
            let mut stack = vec![k.clone(), first.clone()];
            extend(graph, &targets, &mut stack, &mut found);
        }
        for paths in found.values_mut() {
            paths.sort();
        }
        map.insert(k.clone(), found);
    }
    CompiledPaths { map }
}
