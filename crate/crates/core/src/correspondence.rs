//! Distance-tolerant fusion of per-labeler boundary maps.
//!
//! Pixels from two maps are paired by an exact minimum-cost,
//! maximum-cardinality bipartite matching over the edges no longer than
//! `d_max`. The tolerance keeps the graph sparse, so the matching is solved
//! independently on each connected component with successive shortest
//! augmenting paths (Dijkstra with Johnson potentials).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_model::{LabelerMap, MasterMap, MasterPixel, Position};

/// Default tolerance as a fraction of the image diagonal.
pub const DEFAULT_TOLERANCE: f64 = 0.0075;

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("no labeler maps to merge")]
    NoLabelers,
    #[error(
        "labeler {labeler} has image {found_image} {found_w}x{found_h}, expected {image} {width}x{height}"
    )]
    DimensionMismatch {
        labeler: String,
        image: String,
        width: u32,
        height: u32,
        found_image: String,
        found_w: u32,
        found_h: u32,
    },
    #[error("invalid matching distance {0}")]
    InvalidDistance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub ref_index: usize,
    pub new_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Sorted by `ref_index`.
    pub matched: Vec<MatchedPair>,
    pub unmatched_ref: Vec<usize>,
    pub unmatched_new: Vec<usize>,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.matched.iter().map(|m| m.distance).sum()
    }
}

/// Matching distance in pixels for an image: `ceil(fraction * diagonal)`.
pub fn tolerance_pixels(fraction: f64, width: u32, height: u32) -> f64 {
    let diag = f64::from(width).hypot(f64::from(height));
    (fraction * diag).ceil()
}

fn distance(a: Position, b: Position) -> f64 {
    let dr = f64::from(a.0) - f64::from(b.0);
    let dc = f64::from(a.1) - f64::from(b.1);
    dr.hypot(dc)
}

/// Min-cost maximum-cardinality matching between two pixel sets, restricted
/// to pairs within Euclidean distance `d_max`.
pub fn match_maps(reference: &[Position], new: &[Position], d_max: f64) -> Result<MatchResult, MergeError> {
    if !(d_max >= 0.0) || !d_max.is_finite() {
        return Err(MergeError::InvalidDistance(d_max));
    }
    let edges = candidate_edges(reference, new, d_max);

    let mut ref_match: Vec<Option<(usize, f64)>> = vec![None; reference.len()];
    for component in components(reference.len(), new.len(), &edges) {
        let local = solve_component(&component, &edges);
        for (r, n, d) in local {
            ref_match[r] = Some((n, d));
        }
    }

    let mut result = MatchResult::default();
    let mut new_used = vec![false; new.len()];
    for (r, m) in ref_match.iter().enumerate() {
        match m {
            Some((n, d)) => {
                new_used[*n] = true;
                result.matched.push(MatchedPair {
                    ref_index: r,
                    new_index: *n,
                    distance: *d,
                });
            }
            None => result.unmatched_ref.push(r),
        }
    }
    result.unmatched_new = (0..new.len()).filter(|&n| !new_used[n]).collect();
    Ok(result)
}

/// Adjacency of reference pixels: `edges[r]` lists `(new_index, distance)`.
fn candidate_edges(reference: &[Position], new: &[Position], d_max: f64) -> Vec<Vec<(usize, f64)>> {
    let reach = d_max.floor() as i64;
    let mut grid: HashMap<Position, Vec<usize>> = HashMap::with_capacity(new.len());
    for (i, &p) in new.iter().enumerate() {
        grid.entry(p).or_default().push(i);
    }
    reference
        .iter()
        .map(|&r| {
            let mut adj = Vec::new();
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let row = i64::from(r.0) + dr;
                    let col = i64::from(r.1) + dc;
                    if row < 0 || col < 0 || row > i64::from(u32::MAX) || col > i64::from(u32::MAX) {
                        continue;
                    }
                    if let Some(ids) = grid.get(&(row as u32, col as u32)) {
                        for &n in ids {
                            let d = distance(r, new[n]);
                            if d <= d_max {
                                adj.push((n, d));
                            }
                        }
                    }
                }
            }
            adj.sort_by(|a, b| a.0.cmp(&b.0));
            adj
        })
        .collect()
}

struct Component {
    refs: Vec<usize>,
    news: Vec<usize>,
}

fn components(n_ref: usize, n_new: usize, edges: &[Vec<(usize, f64)>]) -> Vec<Component> {
    // union-find over ref nodes [0, n_ref) and new nodes [n_ref, n_ref + n_new)
    let mut parent: Vec<usize> = (0..n_ref + n_new).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (r, adj) in edges.iter().enumerate() {
        for &(n, _) in adj {
            let a = find(&mut parent, r);
            let b = find(&mut parent, n_ref + n);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: HashMap<usize, Component> = HashMap::new();
    for r in 0..n_ref {
        if edges[r].is_empty() {
            continue;
        }
        let root = find(&mut parent, r);
        groups
            .entry(root)
            .or_insert_with(|| Component { refs: Vec::new(), news: Vec::new() })
            .refs
            .push(r);
    }
    for n in 0..n_new {
        let root = find(&mut parent, n_ref + n);
        if let Some(g) = groups.get_mut(&root) {
            g.news.push(n);
        }
    }
    let mut out: Vec<Component> = groups.into_values().collect();
    out.sort_by_key(|c| c.refs[0]);
    out
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Successive shortest paths on one component. Returns `(ref, new, distance)`.
///
/// Node layout: source, refs, news, sink. Every augmentation adds one unit
/// of flow along a cheapest path, so the final flow has maximum cardinality
/// and, among those, minimum total distance.
fn solve_component(comp: &Component, edges: &[Vec<(usize, f64)>]) -> Vec<(usize, usize, f64)> {
    let nr = comp.refs.len();
    let nn = comp.news.len();
    let source = 0;
    let sink = 1 + nr + nn;
    let n_nodes = sink + 1;
    let new_local: HashMap<usize, usize> = comp.news.iter().enumerate().map(|(i, &n)| (n, i)).collect();

    // residual graph in edge-list form; edge e and e ^ 1 are a pair
    let mut to = Vec::new();
    let mut cap = Vec::new();
    let mut cost = Vec::new();
    let mut head: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut add = |u: usize, v: usize, c: f64, head: &mut Vec<Vec<usize>>| {
        head[u].push(to.len());
        to.push(v);
        cap.push(1i32);
        cost.push(c);
        head[v].push(to.len());
        to.push(u);
        cap.push(0i32);
        cost.push(-c);
    };
    for (i, &r) in comp.refs.iter().enumerate() {
        add(source, 1 + i, 0.0, &mut head);
        for &(n, d) in &edges[r] {
            add(1 + i, 1 + nr + new_local[&n], d, &mut head);
        }
    }
    for j in 0..nn {
        add(1 + nr + j, sink, 0.0, &mut head);
    }

    let mut potential = vec![0.0f64; n_nodes];
    let mut dist = vec![f64::INFINITY; n_nodes];
    let mut prev_edge = vec![usize::MAX; n_nodes];
    loop {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev_edge.iter_mut().for_each(|p| *p = usize::MAX);
        dist[source] = 0.0;
        let mut heap = BinaryHeap::from([HeapItem { dist: 0.0, node: source }]);
        while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &e in &head[u] {
                if cap[e] == 0 {
                    continue;
                }
                let v = to[e];
                // reduced costs are nonnegative up to rounding
                let reduced = (cost[e] + potential[u] - potential[v]).max(0.0);
                let nd = d + reduced;
                if nd < dist[v] {
                    dist[v] = nd;
                    prev_edge[v] = e;
                    heap.push(HeapItem { dist: nd, node: v });
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        for v in 0..n_nodes {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        let mut v = sink;
        while v != source {
            let e = prev_edge[v];
            cap[e] -= 1;
            cap[e ^ 1] += 1;
            v = to[e ^ 1];
        }
    }

    let mut out = Vec::new();
    for (i, &r) in comp.refs.iter().enumerate() {
        for &e in &head[1 + i] {
            let v = to[e];
            if e % 2 == 0 && v > nr && v < sink && cap[e] == 0 {
                out.push((r, comp.news[v - 1 - nr], cost[e]));
            }
        }
    }
    out
}

/// Fuses labeler maps into a master map, anchored on the first labeler.
///
/// Each later labeler is matched against the current master positions;
/// matched pixels set that labeler's bit on the existing master pixel and
/// unmatched ones become new master pixels. The result depends on labeler
/// order when matches tie.
pub fn merge_labelers(maps: &[LabelerMap], d_max: f64) -> Result<MasterMap, MergeError> {
    let first = maps.first().ok_or(MergeError::NoLabelers)?;
    if !(d_max >= 0.0) || !d_max.is_finite() {
        return Err(MergeError::InvalidDistance(d_max));
    }
    for m in maps {
        if m.image_id != first.image_id || m.width != first.width || m.height != first.height {
            return Err(MergeError::DimensionMismatch {
                labeler: m.labeler_id.clone(),
                image: first.image_id.clone(),
                width: first.width,
                height: first.height,
                found_image: m.image_id.clone(),
                found_w: m.width,
                found_h: m.height,
            });
        }
    }
    let l = maps.len();
    let mut positions: Vec<Position> = Vec::new();
    let mut responses: Vec<Vec<u8>> = Vec::new();
    for (li, map) in maps.iter().enumerate() {
        let result = match_maps(&positions, map.pixels(), d_max)?;
        for m in &result.matched {
            responses[m.ref_index][li] = 1;
        }
        for &n in &result.unmatched_new {
            positions.push(map.pixels()[n]);
            let mut y = vec![0u8; l];
            y[li] = 1;
            responses.push(y);
        }
    }
    Ok(MasterMap {
        image_id: first.image_id.clone(),
        width: first.width,
        height: first.height,
        labeler_ids: maps.iter().map(|m| m.labeler_id.clone()).collect(),
        pixels: positions
            .into_iter()
            .zip(responses)
            .enumerate()
            .map(|(i, ((row, col), responses))| MasterPixel {
                pixel_id: i as u32,
                row,
                col,
                responses,
            })
            .collect(),
    })
}
