//! Road-network graphs: extraction from binary masks, simplification, and
//! the node machinery (control nodes, snapping, shortest paths) the path
//! based score is built on.
//!
//! Coordinates are planar pixel units, (x, y) = (col, row). Graphs are
//! undirected; parallel edges and positive-length self-loops are allowed.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use serde_json::{json, Value};
use thiserror::Error;

use crate::raster::{is_foreground, Raster};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("graph parse error: {0}")]
    ParseError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    /// Geometry from u to v. First and last points coincide with the node
    /// positions.
    pub polyline: Vec<(f64, f64)>,
    /// Stored length; normally the polyline arc length, but hand-built
    /// graphs may override it (never below the endpoint distance).
    pub length: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpatialGraph {
    nodes: BTreeMap<usize, (f64, f64)>,
    edges: BTreeMap<usize, Edge>,
    next_node: usize,
    next_edge: usize,
}

pub fn polyline_length(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

impl SpatialGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, x: f64, y: f64) -> usize {
        let id = self.next_node;
        self.next_node += 1;
        self.nodes.insert(id, (x, y));
        id
    }

    fn insert_node_with_id(&mut self, id: usize, pos: (f64, f64)) {
        self.nodes.insert(id, pos);
        self.next_node = self.next_node.max(id + 1);
    }

    /// Add an edge with explicit geometry; length is the arc length.
    pub fn add_edge(&mut self, u: usize, v: usize, polyline: Vec<(f64, f64)>) -> usize {
        let length = polyline_length(&polyline);
        self.add_edge_full(u, v, polyline, length)
    }

    /// Add a straight edge with an overridden length (test graphs, abstract
    /// road networks). Must not undercut the endpoint distance.
    pub fn add_edge_with_length(&mut self, u: usize, v: usize, length: f64) -> usize {
        let pu = self.nodes[&u];
        let pv = self.nodes[&v];
        self.add_edge_full(u, v, vec![pu, pv], length)
    }

    fn add_edge_full(
        &mut self,
        u: usize,
        v: usize,
        polyline: Vec<(f64, f64)>,
        length: f64,
    ) -> usize {
        assert!(self.nodes.contains_key(&u) && self.nodes.contains_key(&v));
        assert!(polyline.len() >= 2, "edge needs geometry");
        let chord = dist2(self.nodes[&u], self.nodes[&v]).sqrt();
        assert!(
            length >= chord - 1e-9,
            "edge length {length} below endpoint distance {chord}"
        );
        assert!(
            u != v || length > 1e-12,
            "zero-length self-loop at node {u}"
        );
        let id = self.next_edge;
        self.next_edge += 1;
        self.edges.insert(
            id,
            Edge {
                u,
                v,
                polyline,
                length,
            },
        );
        id
    }

    pub fn remove_edge(&mut self, id: usize) -> Option<Edge> {
        self.edges.remove(&id)
    }

    pub fn remove_node(&mut self, id: usize) {
        debug_assert_eq!(self.degree(id), 0, "removing node with incident edges");
        self.nodes.remove(&id);
    }

    pub fn node_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.keys().copied()
    }

    pub fn node_pos(&self, id: usize) -> Option<(f64, f64)> {
        self.nodes.get(&id).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().map(|(k, e)| (*k, e))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Incident edge-endpoint count; a self-loop contributes 2.
    pub fn degree(&self, id: usize) -> usize {
        self.edges
            .values()
            .map(|e| (e.u == id) as usize + (e.v == id) as usize)
            .sum()
    }

    pub fn total_length(&self) -> f64 {
        self.edges.values().map(|e| e.length).sum()
    }

    /// Dijkstra over edge lengths. `None` when disconnected.
    pub fn shortest_path_length(&self, a: usize, b: usize) -> Result<Option<f64>, GraphError> {
        if !self.nodes.contains_key(&b) {
            return Err(GraphError::UnknownNode(b));
        }
        Ok(self.distances_from(a)?.get(&b).copied())
    }

    /// Shortest-path lengths from `a` to every reachable node.
    pub fn distances_from(&self, a: usize) -> Result<BTreeMap<usize, f64>, GraphError> {
        if !self.nodes.contains_key(&a) {
            return Err(GraphError::UnknownNode(a));
        }
        let mut adj: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for e in self.edges.values() {
            adj.entry(e.u).or_default().push((e.v, e.length));
            adj.entry(e.v).or_default().push((e.u, e.length));
        }

        struct Item(f64, usize);
        impl PartialEq for Item {
            fn eq(&self, o: &Self) -> bool {
                self.0 == o.0 && self.1 == o.1
            }
        }
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> std::cmp::Ordering {
                // min-heap on distance; lengths are finite so unwrap is safe
                o.0.partial_cmp(&self.0)
                    .unwrap()
                    .then(o.1.cmp(&self.1))
            }
        }

        let mut dist: BTreeMap<usize, f64> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(a, 0.0);
        heap.push(Item(0.0, a));
        while let Some(Item(d, n)) = heap.pop() {
            if d > dist.get(&n).copied().unwrap_or(f64::INFINITY) {
                continue;
            }
            if let Some(nbrs) = adj.get(&n) {
                for &(m, w) in nbrs {
                    let nd = d + w;
                    if nd < dist.get(&m).copied().unwrap_or(f64::INFINITY) {
                        dist.insert(m, nd);
                        heap.push(Item(nd, m));
                    }
                }
            }
        }
        Ok(dist)
    }
}

const NBR8: [(i64, i64); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

/// Zhang–Suen thinning to a 1-pixel-wide 8-connected skeleton. Idempotent;
/// never adds foreground.
pub fn skeletonize(mask: &Raster) -> Raster {
    assert_eq!(mask.channels, 1, "skeletonize needs a 1-channel mask");
    let (h, w) = (mask.height, mask.width);
    let mut grid: Vec<bool> = mask.data.iter().map(|&v| is_foreground(v)).collect();
    let at = |g: &[bool], r: i64, c: i64| -> u8 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0
        } else {
            g[r as usize * w + c as usize] as u8
        }
    };

    loop {
        let mut changed = false;
        for phase in 0..2 {
            let mut kill = Vec::new();
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    if !grid[r as usize * w + c as usize] {
                        continue;
                    }
                    // p2..p9 clockwise from north
                    let p = [
                        at(&grid, r - 1, c),
                        at(&grid, r - 1, c + 1),
                        at(&grid, r, c + 1),
                        at(&grid, r + 1, c + 1),
                        at(&grid, r + 1, c),
                        at(&grid, r + 1, c - 1),
                        at(&grid, r, c - 1),
                        at(&grid, r - 1, c - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8)
                        .filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1)
                        .count();
                    if a != 1 {
                        continue;
                    }
                    let ok = if phase == 0 {
                        p[0] * p[2] * p[4] == 0 && p[2] * p[4] * p[6] == 0
                    } else {
                        p[0] * p[2] * p[6] == 0 && p[0] * p[4] * p[6] == 0
                    };
                    if ok {
                        kill.push(r as usize * w + c as usize);
                    }
                }
            }
            if !kill.is_empty() {
                changed = true;
                for i in kill {
                    grid[i] = false;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut out = Raster::new(h, w, 1);
    out.geo = mask.geo.clone();
    for (i, &v) in grid.iter().enumerate() {
        out.data[i] = if v { 255 } else { 0 };
    }
    out
}

/// Graph extraction from a 1-pixel skeleton.
///
/// Node sites are 8-connected clusters of skeleton pixels whose neighbor
/// count differs from 2 (endpoints and junctions), placed at the cluster
/// centroid. Edges are the degree-2 chains between them; isolated cycles
/// keep one anchor node. Spurs (leaf edges) shorter than `spur_px` are
/// pruned, pass-through nodes merged away, and each polyline is simplified
/// by Douglas–Peucker at `simplify_tol` with the length recomputed from the
/// simplified geometry.
pub fn skeleton_to_graph(skel: &Raster, spur_px: f64, simplify_tol: f64) -> SpatialGraph {
    assert_eq!(skel.channels, 1);
    let (h, w) = (skel.height, skel.width);
    let fg = |r: i64, c: i64| -> bool {
        r >= 0
            && c >= 0
            && r < h as i64
            && c < w as i64
            && is_foreground(skel.data[r as usize * w + c as usize])
    };
    let nbrs = |r: i64, c: i64| -> Vec<(i64, i64)> {
        NBR8.iter()
            .map(|&(dr, dc)| (r + dr, c + dc))
            .filter(|&(rr, cc)| fg(rr, cc))
            .collect()
    };

    let mut pixels: Vec<(i64, i64)> = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if fg(r, c) {
                pixels.push((r, c));
            }
        }
    }
    let is_site = |r: i64, c: i64| nbrs(r, c).len() != 2;

    // cluster adjacent node sites; each cluster becomes one graph node
    let mut g = SpatialGraph::new();
    let mut site_cluster: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for &(r, c) in &pixels {
        if !is_site(r, c) || site_cluster.contains_key(&(r, c)) {
            continue;
        }
        let mut stack = vec![(r, c)];
        let mut members = Vec::new();
        while let Some(p) = stack.pop() {
            if site_cluster.contains_key(&p) {
                continue;
            }
            site_cluster.insert(p, usize::MAX);
            members.push(p);
            for q in nbrs(p.0, p.1) {
                if is_site(q.0, q.1) && !site_cluster.contains_key(&q) {
                    stack.push(q);
                }
            }
        }
        let cx = members.iter().map(|&(_, c)| c as f64).sum::<f64>() / members.len() as f64;
        let cy = members.iter().map(|&(r, _)| r as f64).sum::<f64>() / members.len() as f64;
        let id = g.add_node(cx, cy);
        for m in members {
            site_cluster.insert(m, id);
        }
    }

    let px = |p: (i64, i64)| (p.1 as f64, p.0 as f64);
    let mut used: BTreeSet<((i64, i64), (i64, i64))> = BTreeSet::new();
    let mut interior_done: BTreeSet<(i64, i64)> = BTreeSet::new();

    // walk chains out of every node site
    for (&site, &node) in &site_cluster {
        for first in nbrs(site.0, site.1) {
            if used.contains(&(site, first)) {
                continue;
            }
            if let Some(other) = site_cluster.get(&first) {
                // two adjacent sites; skip intra-cluster steps
                if *other == node && site_cluster[&site] == *other {
                    continue;
                }
                used.insert((site, first));
                used.insert((first, site));
                let mut poly = vec![px(site), px(first)];
                finish_polyline(&mut poly, &g, node, *other);
                g.add_edge(node, *other, poly);
                continue;
            }
            used.insert((site, first));
            let mut poly = vec![px(site)];
            let mut prev = site;
            let mut cur = first;
            loop {
                poly.push(px(cur));
                interior_done.insert(cur);
                if let Some(&end) = site_cluster.get(&cur) {
                    used.insert((cur, prev));
                    finish_polyline(&mut poly, &g, node, end);
                    g.add_edge(node, end, poly);
                    break;
                }
                let n = nbrs(cur.0, cur.1);
                debug_assert_eq!(n.len(), 2, "interior pixel degree must be 2");
                let next = if n[0] == prev { n[1] } else { n[0] };
                prev = cur;
                cur = next;
            }
        }
    }

    // leftover degree-2 pixels form isolated cycles; anchor each at its
    // first pixel in scan order
    for &(r, c) in &pixels {
        if is_site(r, c) || interior_done.contains(&(r, c)) {
            continue;
        }
        let anchor = g.add_node(c as f64, r as f64);
        let start = (r, c);
        interior_done.insert(start);
        let mut poly = vec![px(start)];
        let mut prev = start;
        let mut cur = nbrs(r, c)[0];
        while cur != start {
            poly.push(px(cur));
            interior_done.insert(cur);
            let n = nbrs(cur.0, cur.1);
            let next = if n[0] == prev { n[1] } else { n[0] };
            prev = cur;
            cur = next;
        }
        poly.push(px(start));
        g.add_edge(anchor, anchor, poly);
    }

    prune_spurs(&mut g, spur_px);
    merge_pass_through(&mut g);
    for e in g.edges.values_mut() {
        e.polyline = douglas_peucker(&e.polyline, simplify_tol);
        e.length = polyline_length(&e.polyline);
    }
    // A ring that fits inside the tolerance collapses onto its anchor.
    g.edges.retain(|_, e| e.u != e.v || e.length > 1e-12);
    g.nodes.retain(|id, _| {
        g.edges.values().any(|e| e.u == *id || e.v == *id)
    });
    g
}

/// Make polyline endpoints coincide with the node positions (cluster
/// centroids may sit off the starting pixel).
fn finish_polyline(poly: &mut Vec<(f64, f64)>, g: &SpatialGraph, u: usize, v: usize) {
    let pu = g.node_pos(u).unwrap();
    let pv = g.node_pos(v).unwrap();
    if dist2(poly[0], pu) > 1e-18 {
        poly.insert(0, pu);
    }
    if dist2(*poly.last().unwrap(), pv) > 1e-18 {
        poly.push(pv);
    }
}

fn prune_spurs(g: &mut SpatialGraph, spur_px: f64) {
    let doomed: Vec<usize> = g
        .edges
        .iter()
        .filter(|(_, e)| {
            e.length < spur_px && (g.degree(e.u) == 1 || g.degree(e.v) == 1)
        })
        .map(|(id, _)| *id)
        .collect();
    for id in doomed {
        g.edges.remove(&id);
    }
    let orphans: Vec<usize> = g
        .nodes
        .keys()
        .copied()
        .filter(|&n| g.degree(n) == 0)
        .collect();
    for n in orphans {
        g.nodes.remove(&n);
    }
}

/// Splice out nodes with exactly two distinct incident edges.
fn merge_pass_through(g: &mut SpatialGraph) {
    loop {
        let candidate = g.nodes.keys().copied().find(|&n| {
            let inc: Vec<usize> = g
                .edges
                .iter()
                .filter(|(_, e)| e.u == n || e.v == n)
                .map(|(id, _)| *id)
                .collect();
            inc.len() == 2 && {
                let a = &g.edges[&inc[0]];
                let b = &g.edges[&inc[1]];
                a.u != a.v && b.u != b.v
            }
        });
        let Some(n) = candidate else { break };
        let inc: Vec<usize> = g
            .edges
            .iter()
            .filter(|(_, e)| e.u == n || e.v == n)
            .map(|(id, _)| *id)
            .collect();
        let e1 = g.edges.remove(&inc[0]).unwrap();
        let e2 = g.edges.remove(&inc[1]).unwrap();
        let (a, mut poly1) = if e1.u == n {
            let mut p = e1.polyline;
            p.reverse();
            (e1.v, p)
        } else {
            (e1.u, e1.polyline)
        };
        let (b, poly2) = if e2.u == n {
            (e2.v, e2.polyline)
        } else {
            let mut p = e2.polyline;
            p.reverse();
            (e2.u, p)
        };
        poly1.extend_from_slice(&poly2[1..]);
        g.nodes.remove(&n);
        let length = e1.length + e2.length;
        let id = g.next_edge;
        g.next_edge += 1;
        g.edges.insert(
            id,
            Edge {
                u: a,
                v: b,
                polyline: poly1,
                length,
            },
        );
    }
}

fn douglas_peucker(pts: &[(f64, f64)], tol: f64) -> Vec<(f64, f64)> {
    if pts.len() <= 2 {
        return pts.to_vec();
    }
    let (a, b) = (pts[0], *pts.last().unwrap());
    let chord2 = dist2(a, b);
    let mut worst = 0.0;
    let mut worst_i = 0;
    for (i, &p) in pts.iter().enumerate().take(pts.len() - 1).skip(1) {
        let d = if chord2 < 1e-18 {
            dist2(p, a).sqrt()
        } else {
            let t = (((p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1)) / chord2)
                .clamp(0.0, 1.0);
            let c = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            dist2(p, c).sqrt()
        };
        if d > worst {
            worst = d;
            worst_i = i;
        }
    }
    if worst <= tol {
        return vec![a, b];
    }
    let mut left = douglas_peucker(&pts[..=worst_i], tol);
    let right = douglas_peucker(&pts[worst_i..], tol);
    left.pop();
    left.extend(right);
    left
}

/// Binary mask straight to a simplified road graph.
pub fn mask_to_graph(mask: &Raster, spur_px: f64, simplify_tol: f64) -> SpatialGraph {
    skeleton_to_graph(&skeletonize(mask), spur_px, simplify_tol)
}

/// Subdivide every edge so no inter-node gap exceeds `spacing`. Topology and
/// total length are preserved.
pub fn inject_control_nodes(g: &SpatialGraph, spacing: f64) -> SpatialGraph {
    assert!(spacing > 0.0);
    let mut out = SpatialGraph::new();
    for (id, pos) in &g.nodes {
        out.insert_node_with_id(*id, *pos);
    }
    for e in g.edges.values() {
        let geom_len = polyline_length(&e.polyline);
        let pieces = (e.length / spacing).ceil().max(1.0) as usize;
        if pieces <= 1 || geom_len < 1e-12 {
            out.add_edge_full(e.u, e.v, e.polyline.clone(), e.length);
            continue;
        }
        // cut at equal arc positions; overridden lengths scale uniformly
        let scale = e.length / geom_len;
        let step = geom_len / pieces as f64;
        let mut sub: Vec<Vec<(f64, f64)>> = Vec::with_capacity(pieces);
        let mut cur = vec![e.polyline[0]];
        let mut next_cut = step;
        let mut walked = 0.0;
        for wseg in e.polyline.windows(2) {
            let (p, q) = (wseg[0], wseg[1]);
            let seg = dist2(p, q).sqrt();
            let mut t0 = 0.0;
            while sub.len() + 1 < pieces && walked + seg >= next_cut - 1e-12 {
                let t = ((next_cut - walked) / seg).clamp(0.0, 1.0);
                let cut = (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
                if t > t0 {
                    cur.push(cut);
                }
                sub.push(std::mem::replace(&mut cur, vec![cut]));
                next_cut += step;
                t0 = t;
            }
            walked += seg;
            if dist2(*cur.last().unwrap(), q) > 1e-18 {
                cur.push(q);
            }
        }
        sub.push(cur);
        debug_assert_eq!(sub.len(), pieces);
        let mut prev_node = e.u;
        for (i, poly) in sub.iter().enumerate() {
            let last = i + 1 == sub.len();
            let next_node = if last {
                e.v
            } else {
                let p = *poly.last().unwrap();
                out.add_node(p.0, p.1)
            };
            out.add_edge_full(
                prev_node,
                next_node,
                poly.clone(),
                polyline_length(poly) * scale,
            );
            prev_node = next_node;
        }
    }
    out
}

/// Project `point` into the graph within `buffer`: onto the nearest edge
/// polyline (splitting that edge, conserving length), or the nearest
/// existing node when the projection lands on one. Ties on distance go to
/// the lower edge id.
pub fn snap_node(g: &mut SpatialGraph, point: (f64, f64), buffer: f64) -> Option<usize> {
    assert!(buffer > 0.0);
    let mut best: Option<(f64, usize, usize, f64)> = None; // dist, edge, seg, t
    for (id, e) in &g.edges {
        for (si, wseg) in e.polyline.windows(2).enumerate() {
            let (a, b) = (wseg[0], wseg[1]);
            let len2 = dist2(a, b);
            let t = if len2 < 1e-18 {
                0.0
            } else {
                (((point.0 - a.0) * (b.0 - a.0) + (point.1 - a.1) * (b.1 - a.1)) / len2)
                    .clamp(0.0, 1.0)
            };
            let c = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            let d = dist2(point, c).sqrt();
            let better = match best {
                None => true,
                Some((bd, ..)) => d < bd - 1e-12,
            };
            if better {
                best = Some((d, *id, si, t));
            }
        }
    }

    if let Some((d, eid, si, t)) = best {
        if d <= buffer {
            let e = g.edges[&eid].clone();
            let (a, b) = (e.polyline[si], e.polyline[si + 1]);
            let proj = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            // projection onto an endpoint selects the existing node
            if dist2(proj, g.nodes[&e.u]) < 1e-18 {
                return Some(e.u);
            }
            if dist2(proj, g.nodes[&e.v]) < 1e-18 {
                return Some(e.v);
            }
            let geom_len = polyline_length(&e.polyline);
            let scale = if geom_len < 1e-12 {
                1.0
            } else {
                e.length / geom_len
            };
            let mut first: Vec<(f64, f64)> = e.polyline[..=si].to_vec();
            if dist2(*first.last().unwrap(), proj) > 1e-18 {
                first.push(proj);
            }
            let mut second = vec![proj];
            second.extend_from_slice(&e.polyline[si + 1..]);
            let node = g.add_node(proj.0, proj.1);
            g.edges.remove(&eid);
            g.add_edge_full(e.u, node, first.clone(), polyline_length(&first) * scale);
            g.add_edge_full(node, e.v, second.clone(), polyline_length(&second) * scale);
            return Some(node);
        }
    }

    // no edge in range; fall back to bare nodes (isolated points)
    let mut best_node: Option<(f64, usize)> = None;
    for (&id, &pos) in &g.nodes {
        let d = dist2(point, pos).sqrt();
        if best_node.map_or(true, |(bd, _)| d < bd - 1e-12) {
            best_node = Some((d, id));
        }
    }
    match best_node {
        Some((d, id)) if d <= buffer => Some(id),
        _ => None,
    }
}

/// Serialize as a GeoJSON FeatureCollection, one LineString per edge with
/// properties {u, v, length}.
pub fn graph_to_geojson(g: &SpatialGraph) -> Value {
    let features: Vec<Value> = g
        .edges
        .values()
        .map(|e| {
            let coords: Vec<Value> = e.polyline.iter().map(|&(x, y)| json!([x, y])).collect();
            json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords},
                "properties": {"u": e.u, "v": e.v, "length": e.length},
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

pub fn graph_from_geojson(doc: &Value) -> Result<SpatialGraph, GraphError> {
    let bad = |m: &str| GraphError::ParseError(m.to_string());
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(bad("expected a FeatureCollection"));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing features array"))?;
    let mut g = SpatialGraph::new();
    for f in features {
        let geom = f.get("geometry").ok_or_else(|| bad("feature without geometry"))?;
        if geom.get("type").and_then(Value::as_str) != Some("LineString") {
            continue;
        }
        let coords = geom
            .get("coordinates")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing coordinates"))?;
        let mut poly = Vec::with_capacity(coords.len());
        for c in coords {
            let pair = c.as_array().ok_or_else(|| bad("coordinate not a pair"))?;
            if pair.len() < 2 {
                return Err(bad("coordinate not a pair"));
            }
            let x = pair[0].as_f64().ok_or_else(|| bad("non-numeric coordinate"))?;
            let y = pair[1].as_f64().ok_or_else(|| bad("non-numeric coordinate"))?;
            poly.push((x, y));
        }
        if poly.len() < 2 {
            return Err(bad("LineString with fewer than 2 points"));
        }
        let props = f.get("properties").cloned().unwrap_or(Value::Null);
        let u = props.get("u").and_then(Value::as_u64).ok_or_else(|| bad("edge missing u"))?
            as usize;
        let v = props.get("v").and_then(Value::as_u64).ok_or_else(|| bad("edge missing v"))?
            as usize;
        let length = props
            .get("length")
            .and_then(Value::as_f64)
            .unwrap_or_else(|| polyline_length(&poly));
        if !g.nodes.contains_key(&u) {
            g.insert_node_with_id(u, poly[0]);
        }
        if !g.nodes.contains_key(&v) {
            g.insert_node_with_id(v, *poly.last().unwrap());
        }
        g.add_edge_full(u, v, poly, length);
    }
    Ok(g)
}

pub fn write_graph(g: &SpatialGraph, path: &Path) -> Result<(), GraphError> {
    let doc = graph_to_geojson(g);
    std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(())
}

pub fn read_graph(path: &Path) -> Result<SpatialGraph, GraphError> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| GraphError::ParseError(e.to_string()))?;
    graph_from_geojson(&doc)
}
