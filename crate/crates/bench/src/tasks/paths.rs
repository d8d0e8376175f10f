//! Compiled hypergradient paths against exhaustive enumeration.

use std::collections::{BTreeMap, BTreeSet};

use mlo_core::graph::{compile_paths, CompiledPaths, DependencyGraph, Path};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{BenchConfig, GraphSpec, Task};
use crate::error::{BenchError, Result};
use crate::report::RunReport;

/// Paths from `k` to each source of an l2u edge into `k`, found by walking
/// every simple path over both edge kinds and keeping those whose first edge
/// is u2l and whose remaining edges are l2u.
pub fn brute_force_paths(
    graph: &DependencyGraph,
    names: &BTreeSet<String>,
) -> BTreeMap<(String, String), Vec<Path>> {
    let mut adj: BTreeMap<&str, Vec<(&str, bool)>> = BTreeMap::new();
    for (a, b) in graph.u2l_edges() {
        adj.entry(a).or_default().push((b, true));
    }
    for (a, b) in graph.l2u_edges() {
        adj.entry(a).or_default().push((b, false));
    }

    fn walk<'a>(
        adj: &BTreeMap<&'a str, Vec<(&'a str, bool)>>,
        stack: &mut Vec<(&'a str, bool)>,
        out: &mut Vec<Vec<(&'a str, bool)>>,
    ) {
        out.push(stack.clone());
        let (here, _) = *stack.last().expect("walk starts nonempty");
        for &(next, is_u2l) in adj.get(here).into_iter().flatten() {
            if stack.iter().any(|&(n, _)| n == next) {
                continue;
            }
            stack.push((next, is_u2l));
            walk(adj, stack, out);
            stack.pop();
        }
    }

    let mut result = BTreeMap::new();
    for k in names {
        let lowers: BTreeSet<&str> = graph
            .l2u_edges()
            .filter(|&(_, to)| to == k)
            .map(|(f, _)| f)
            .collect();
        for &l in &lowers {
            result.insert((k.clone(), l.to_string()), Vec::new());
        }
        let mut walks = Vec::new();
        walk(&adj, &mut vec![(k.as_str(), false)], &mut walks);
        for w in walks {
            let Some(&(last, _)) = w.last() else { continue };
            let shape_ok = w.len() >= 2 && w[1].1 && w[2..].iter().all(|&(_, u2l)| !u2l);
            if shape_ok && lowers.contains(last) {
                let p = Path(w.iter().map(|&(n, _)| n.to_string()).collect());
                result
                    .get_mut(&(k.clone(), last.to_string()))
                    .expect("seeded")
                    .push(p);
            }
        }
    }
    for v in result.values_mut() {
        v.sort();
        v.dedup();
    }
    result
}

/// Compiled paths in the same keyed form as [`brute_force_paths`].
pub fn compiled_map(paths: &CompiledPaths) -> BTreeMap<(String, String), Vec<Path>> {
    paths
        .iter()
        .map(|(k, l, ps)| {
            let mut v = ps.to_vec();
            v.sort();
            ((k.to_string(), l.to_string()), v)
        })
        .collect()
}

/// A random valid hierarchy: a shuffled level order, l2u edges only go up a
/// level and u2l edges only go down.
pub fn random_hierarchy(
    rng: &mut impl Rng,
    n: usize,
    p: f64,
) -> (BTreeSet<String>, DependencyGraph) {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let names: Vec<String> = order.iter().map(|i| format!("P{}", i + 1)).collect();
    let mut g = DependencyGraph::new();
    for lo in 0..n {
        for hi in lo + 1..n {
            if rng.random_bool(p) {
                g = g.with_l2u(&names[lo], &[&names[hi]]);
            }
            if rng.random_bool(p) {
                g = g.with_u2l(&names[hi], &[&names[lo]]);
            }
        }
    }
    (names.into_iter().collect(), g)
}

fn listing(paths: &CompiledPaths) -> Value {
    let mut m = serde_json::Map::new();
    for (k, l, ps) in paths.iter() {
        let shown: Vec<String> = ps.iter().map(|p| p.to_string()).collect();
        m.insert(format!("Q({k},{l})"), json!(shown));
    }
    Value::Object(m)
}

fn builtin_graphs() -> Vec<(&'static str, GraphSpec)> {
    let spec = |names: &[&str], g: DependencyGraph| GraphSpec {
        problems: names.iter().map(|s| s.to_string()).collect(),
        u2l: g.u2l,
        l2u: g.l2u,
    };
    vec![
        (
            "four_problem",
            spec(
                &["P1", "P2", "P3", "P4"],
                DependencyGraph::new()
                    .with_u2l("P4", &["P3", "P1"])
                    .with_l2u("P1", &["P3"])
                    .with_l2u("P3", &["P4"]),
            ),
        ),
        (
            "bilevel",
            spec(
                &["P1", "P2"],
                DependencyGraph::new()
                    .with_u2l("P2", &["P1"])
                    .with_l2u("P1", &["P2"]),
            ),
        ),
        (
            "three_level_chain",
            spec(
                &["P1", "P2", "P3"],
                DependencyGraph::new()
                    .with_u2l("P3", &["P1"])
                    .with_l2u("P1", &["P2"])
                    .with_l2u("P2", &["P3"]),
            ),
        ),
    ]
}

fn path(nodes: &[&str]) -> Path {
    Path(nodes.iter().map(|s| s.to_string()).collect())
}

pub fn run(config: &BenchConfig) -> Result<RunReport> {
    let cfg = &config.paths;
    let mut report = RunReport::new(Task::Paths, config.clone());

    let mut graphs = builtin_graphs();
    if let Some(inline) = &cfg.graph {
        graphs.push(("inline", inline.clone()));
    }
    for (label, spec) in &graphs {
        let names = spec.names();
        let graph = spec.graph();
        graph
            .validate(&names)
            .map_err(|e| BenchError::config(format!("paths.graph ({label}): {e}")))?;
        let compiled = compile_paths(&graph, &names);
        report.metric(format!("{label}.total_paths"), compiled.total() as f64);
        report
            .details
            .insert(format!("{label}.paths"), listing(&compiled));
        report.check_flag(
            format!("paths.{label}.matches_brute_force"),
            compiled_map(&compiled) == brute_force_paths(&graph, &names),
        );
        match *label {
            "four_problem" => {
                let q = compiled.get("P4", "P3");
                report.metric("four_problem.q_p4_p3", q.len() as f64);
                report.check_flag(
                    "paths.four_problem.two_paths",
                    q == [path(&["P4", "P1", "P3"]), path(&["P4", "P3"])],
                );
            }
            "bilevel" => report.check_flag("paths.bilevel.one_path", compiled.total() == 1),
            _ => {}
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mismatches = 0usize;
    let mut total_paths = 0usize;
    let mut first_mismatch = None;
    for i in 0..cfg.random_graphs {
        let n = rng.random_range(cfg.min_problems..=cfg.max_problems);
        let (names, graph) = random_hierarchy(&mut rng, n, cfg.edge_probability);
        graph.validate(&names)?;
        let compiled = compile_paths(&graph, &names);
        total_paths += compiled.total();
        if compiled_map(&compiled) != brute_force_paths(&graph, &names) {
            mismatches += 1;
            first_mismatch.get_or_insert(i);
        }
    }
    report.metric("random.graphs", cfg.random_graphs as f64);
    report.metric("random.total_paths", total_paths as f64);
    report.metric("random.mismatches", mismatches as f64);
    if let Some(i) = first_mismatch {
        report
            .details
            .insert("random.first_mismatch".into(), json!(i));
    }
    report.check_at_most("paths.random.mismatches", mismatches as f64, 0.0);
    Ok(report)
}
