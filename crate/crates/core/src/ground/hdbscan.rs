//! Density-based clustering of feature vectors (HDBSCAN, excess-of-mass
//! flavor).
//!
//! The stages: per-point core distances (distance to the
//! `min_samples`-th nearest neighbor, the point itself included), a
//! minimum spanning tree of the mutual-reachability graph built with
//! Prim's algorithm so no N x N matrix is ever materialized, a
//! single-linkage merge tree, a condensed tree that drops components
//! smaller than `min_cluster_size`, and cluster selection by stability
//! with an optional distance floor (`cluster_selection_epsilon`).
//! Everything is deterministic: ties in the tree construction break on
//! point index, and cluster labels count up in tree-node order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClusterParams {
    /// Smallest group that counts as a cluster (at least 2).
    pub min_cluster_size: usize,
    /// Neighbor count for core distances; defaults to `min_cluster_size`
    /// in the callers.
    pub min_samples: usize,
    /// Merge flat clusters born closer than this distance into their
    /// ancestors; 0 disables the floor.
    pub cluster_selection_epsilon: f64,
    /// Permit the tree root itself to be the sole cluster.
    pub allow_single_cluster: bool,
}

/// One row of the condensed tree. Node ids: points are `0..n`, the root
/// cluster is `n`, and further clusters count up from `n + 1`. `lambda`
/// is the inverse merge distance at which `child` leaves `parent`.
#[derive(Debug, Clone, Copy)]
struct CondensedRow {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

/// Clusters `n` points of width `dim` (row-major flat slice); returns one
/// label per point, `-1` for noise. Fewer than two points is all noise.
pub fn cluster(points: &[f64], dim: usize, params: &ClusterParams) -> Result<Vec<i32>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Invalid(format!(
            "point buffer of {} values is not a multiple of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if params.min_cluster_size < 2 {
        return Err(Error::Invalid("min_cluster_size must be at least 2".to_string()));
    }
    if params.min_samples == 0 {
        return Err(Error::Invalid("min_samples must be at least 1".to_string()));
    }
    if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "point {} has a non-finite coordinate",
            bad / dim
        )));
    }
    if n < 2 {
        return Ok(vec![-1; n]);
    }
    if params.min_samples > n {
        return Err(Error::Invalid(format!(
            "min_samples {} exceeds point count {n}",
            params.min_samples
        )));
    }

    let dist = |i: usize, j: usize| -> f64 {
        let (a, b) = (&points[i * dim..(i + 1) * dim], &points[j * dim..(j + 1) * dim]);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    // Core distance: k-th nearest neighbor with self included, so the
    // sorted distance list starts at d(i, i) = 0.
    let k = params.min_samples;
    let core: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).map(|j| dist(i, j)).collect();
            let (_, kth, _) =
                ds.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite"));
            *kth
        })
        .collect();

    // Prim's MST over mutual reachability, one O(n) relax-and-pick pass
    // per added vertex; ties go to the lowest point index.
    let mreach = |i: usize, j: usize| dist(i, j).max(core[i]).max(core[j]);
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    let mut current = 0usize;
    in_tree[0] = true;
    for _ in 1..n {
        let mut pick = usize::MAX;
        let mut pick_d = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = mreach(current, j);
            if d < best[j] {
                best[j] = d;
                parent[j] = current;
            }
            if best[j] < pick_d {
                pick_d = best[j];
                pick = j;
            }
        }
        let (a, b) = (parent[pick].min(pick), parent[pick].max(pick));
        edges.push((best[pick], a, b));
        in_tree[pick] = true;
        current = pick;
    }
    edges.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .expect("finite weights")
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });

    // Single-linkage merge tree: points are nodes 0..n, each merge step
    // creates node n + step.
    let mut uf = UnionFind::new(2 * n - 1);
    let mut link_size = vec![1usize; 2 * n - 1];
    // (left child, right child, merge distance, size)
    let mut linkage: Vec<(usize, usize, f64, usize)> = Vec::with_capacity(n - 1);
    for (step, &(w, a, b)) in edges.iter().enumerate() {
        let (ra, rb) = (uf.find(a), uf.find(b));
        let node = n + step;
        let size = link_size[ra] + link_size[rb];
        linkage.push((ra, rb, w, size));
        link_size[node] = size;
        uf.attach(ra, node);
        uf.attach(rb, node);
    }

    let condensed = condense(&linkage, n, params.min_cluster_size);
    let selected = select_clusters(&condensed, n, params);
    Ok(label_points(&condensed, n, &selected, params))
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn attach(&mut self, root: usize, under: usize) {
        self.parent[root] = under;
    }
}

/// Walks the merge tree top-down, keeping only components of
/// `min_cluster_size` or more. Smaller split-offs fall out as point rows
/// at the split's lambda; when one side survives it keeps its parent's
/// cluster identity.
fn condense(
    linkage: &[(usize, usize, f64, usize)],
    n: usize,
    min_cluster_size: usize,
) -> Vec<CondensedRow> {
    let root = 2 * n - 2;
    let node_size = |id: usize| if id < n { 1 } else { linkage[id - n].3 };
    let mut relabel = vec![usize::MAX; 2 * n - 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut rows = Vec::new();
    let mut queue = VecDeque::from([root]);

    // Collects the points of a subtree that fell below the size floor.
    let dump_points = |top: usize, parent_label: usize, lambda: f64, rows: &mut Vec<CondensedRow>| {
        let mut stack = vec![top];
        while let Some(id) = stack.pop() {
            if id < n {
                rows.push(CondensedRow { parent: parent_label, child: id, lambda, size: 1 });
            } else {
                let (l, r, _, _) = linkage[id - n];
                stack.push(l);
                stack.push(r);
            }
        }
    };

    while let Some(node) = queue.pop_front() {
        debug_assert!(node >= n);
        let label = relabel[node];
        let (left, right, d, _) = linkage[node - n];
        let lambda = if d > 0.0 { 1.0 / d } else { f64::INFINITY };
        let (lc, rc) = (node_size(left), node_size(right));
        if lc >= min_cluster_size && rc >= min_cluster_size {
            for side in [(left, lc), (right, rc)] {
                relabel[side.0] = next_label;
                rows.push(CondensedRow {
                    parent: label,
                    child: next_label,
                    lambda,
                    size: side.1,
                });
                next_label += 1;
                if side.0 >= n {
                    queue.push_back(side.0);
                }
            }
        } else if lc < min_cluster_size && rc < min_cluster_size {
            dump_points(left, label, lambda, &mut rows);
            dump_points(right, label, lambda, &mut rows);
        } else {
            let (keep, drop) = if lc < min_cluster_size { (right, left) } else { (left, right) };
            dump_points(drop, label, lambda, &mut rows);
            relabel[keep] = label;
            if keep >= n {
                queue.push_back(keep);
            } else {
                // A surviving single point can only happen with
                // min_cluster_size <= 1, which is rejected up front.
                unreachable!("cluster shrank to one point");
            }
        }
    }
    rows
}

/// Cluster stability: sum over members of (exit lambda - birth lambda),
/// where the root is born at lambda 0.
fn compute_stability(rows: &[CondensedRow], n: usize) -> BTreeMap<usize, f64> {
    let mut births: BTreeMap<usize, f64> = BTreeMap::new();
    for r in rows {
        births.insert(r.child, r.lambda);
    }
    let mut stability: BTreeMap<usize, f64> = BTreeMap::new();
    for r in rows {
        let birth = if r.parent == n { 0.0 } else { births[&r.parent] };
        *stability.entry(r.parent).or_insert(0.0) += (r.lambda - birth) * r.size as f64;
    }
    stability
}

fn bfs_clusters(children_of: &BTreeMap<usize, Vec<usize>>, start: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut queue = VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        out.push(c);
        if let Some(kids) = children_of.get(&c) {
            queue.extend(kids.iter().copied());
        }
    }
    out
}

/// Excess-of-mass selection: walking clusters deepest-first, a cluster
/// survives if it is at least as stable as its child clusters combined;
/// otherwise the children's stability propagates upward. The root only
/// competes when `allow_single_cluster` is set. A nonzero
/// `cluster_selection_epsilon` then merges clusters born below that
/// distance into their first ancestor born at or above it.
fn select_clusters(rows: &[CondensedRow], n: usize, params: &ClusterParams) -> BTreeSet<usize> {
    let mut stability = compute_stability(rows, n);
    if stability.is_empty() {
        return BTreeSet::new();
    }
    let mut children_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut cluster_parent: BTreeMap<usize, usize> = BTreeMap::new();
    let mut birth_lambda: BTreeMap<usize, f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.size > 1) {
        children_of.entry(r.parent).or_default().push(r.child);
        cluster_parent.insert(r.child, r.parent);
        birth_lambda.insert(r.child, r.lambda);
    }

    // Deepest clusters first (ids grow downward); the root is the
    // smallest id and is skipped entirely unless single-cluster output
    // is allowed.
    let mut node_list: Vec<usize> = stability.keys().rev().copied().collect();
    if !params.allow_single_cluster {
        node_list.pop();
    }
    let mut is_cluster: BTreeMap<usize, bool> = node_list.iter().map(|&c| (c, true)).collect();
    for &node in &node_list {
        let subtree: f64 = children_of
            .get(&node)
            .map(|kids| kids.iter().map(|c| stability[c]).sum())
            .unwrap_or(0.0);
        if subtree > stability[&node] {
            is_cluster.insert(node, false);
            stability.insert(node, subtree);
        } else {
            for sub in bfs_clusters(&children_of, node) {
                if sub != node {
                    is_cluster.insert(sub, false);
                }
            }
        }
    }
    let mut selected: BTreeSet<usize> =
        is_cluster.iter().filter(|(_, &v)| v).map(|(&c, _)| c).collect();

    if params.cluster_selection_epsilon != 0.0 && !cluster_parent.is_empty() {
        let only_root = selected.len() == 1 && selected.contains(&n);
        if only_root {
            if !params.allow_single_cluster {
                selected.clear();
            }
        } else {
            selected = epsilon_search(
                &selected,
                &children_of,
                &cluster_parent,
                &birth_lambda,
                n,
                params,
            );
        }
    }
    selected
}

/// Replaces clusters born below the epsilon distance with their first
/// ancestor born at or above it (the root only when single-cluster
/// output is allowed), deduplicating nested picks.
fn epsilon_search(
    leaves: &BTreeSet<usize>,
    children_of: &BTreeMap<usize, Vec<usize>>,
    cluster_parent: &BTreeMap<usize, usize>,
    birth_lambda: &BTreeMap<usize, f64>,
    root: usize,
    params: &ClusterParams,
) -> BTreeSet<usize> {
    let eps = params.cluster_selection_epsilon;
    let birth_distance = |c: usize| 1.0 / birth_lambda[&c];
    let mut selected = BTreeSet::new();
    let mut processed = BTreeSet::new();
    for &leaf in leaves {
        if birth_distance(leaf) >= eps {
            selected.insert(leaf);
            continue;
        }
        if processed.contains(&leaf) {
            continue;
        }
        let mut at = leaf;
        let target = loop {
            let parent = cluster_parent[&at];
            if parent == root {
                break if params.allow_single_cluster { root } else { at };
            }
            if birth_distance(parent) > eps {
                break parent;
            }
            at = parent;
        };
        selected.insert(target);
        if target != root {
            for sub in bfs_clusters(children_of, target) {
                if sub != target {
                    processed.insert(sub);
                }
            }
        }
    }
    selected
}

/// Final labels: each point takes the first selected cluster on its path
/// to the root, numbered in ascending cluster-id order. Points whose path
/// has no selected cluster are noise. When the root itself is the sole
/// selected cluster, membership additionally requires the point to have
/// persisted past the epsilon distance (or, with no epsilon, to the very
/// end of the merge sequence).
fn label_points(
    rows: &[CondensedRow],
    n: usize,
    selected: &BTreeSet<usize>,
    params: &ClusterParams,
) -> Vec<i32> {
    let label_of: BTreeMap<usize, i32> =
        selected.iter().enumerate().map(|(i, &c)| (c, i as i32)).collect();
    let mut point_parent: Vec<(usize, f64)> = vec![(usize::MAX, 0.0); n];
    let mut cluster_parent: BTreeMap<usize, usize> = BTreeMap::new();
    let mut root_max_lambda = f64::NEG_INFINITY;
    for r in rows {
        if r.size == 1 && r.child < n {
            point_parent[r.child] = (r.parent, r.lambda);
        } else {
            cluster_parent.insert(r.child, r.parent);
        }
        if r.parent == n {
            root_max_lambda = root_max_lambda.max(r.lambda);
        }
    }
    let root_is_sole = selected.len() == 1 && selected.contains(&n);

    (0..n)
        .map(|pt| {
            let (first, lambda) = point_parent[pt];
            debug_assert_ne!(first, usize::MAX, "point missing from condensed tree");
            let mut at = first;
            loop {
                if selected.contains(&at) {
                    if at == n {
                        // Root membership only exists in the sole-cluster
                        // case; everything else attached here is noise.
                        if !(root_is_sole && params.allow_single_cluster) {
                            return -1;
                        }
                        let pass = if params.cluster_selection_epsilon != 0.0 {
                            lambda >= 1.0 / params.cluster_selection_epsilon
                        } else {
                            lambda >= root_max_lambda
                        };
                        return if pass { label_of[&at] } else { -1 };
                    }
                    return label_of[&at];
                }
                match cluster_parent.get(&at) {
                    Some(&p) => at = p,
                    None => return -1,
                }
            }
        })
        .collect()
}
