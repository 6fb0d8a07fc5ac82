//! Exact reference solvers for small instances: Dinic max-flow on the
//! 6-connected voxel graph, and brute-force enumeration of all labelings.
//!
//! Capacities are quantized to integers at 1e-6 resolution so max-flow
//! terminates exactly; energies are summed in those integer units and
//! converted back to floating point, which makes energy comparisons between
//! the two oracles exact.

use std::collections::VecDeque;

use crate::cmf::CapacityField;
use crate::error::{Error, Result};
use crate::volume::{Grid, Volume3D};

const MODULE: &str = "oracle";

/// Integer units per unit of capacity.
pub const SCALE: f64 = 1e6;
/// Largest grid `min_cut` accepts (32³).
pub const MAX_CUT_VOXELS: usize = 32 * 32 * 32;
/// Largest grid `enumerate_min` accepts.
pub const MAX_ENUMERATE_VOXELS: usize = 20;

fn quantize(v: f64, what: &str) -> Result<i64> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::invalid(MODULE, format!("{what} must be finite and ≥ 0, got {v}")));
    }
    Ok((v * SCALE).round() as i64)
}

/// Voxel graph with terminal links and 6-neighbour links.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGraph {
    grid: Grid,
    source: Vec<i64>,
    sink: Vec<i64>,
    /// `edges[a][idx]` links voxel `idx` to its `+a` neighbour; unused on the last slice.
    edges: [Vec<i64>; 3],
}

impl GridGraph {
    pub fn new(grid: Grid, source: &[f64], sink: &[f64], edges: [&[f64]; 3]) -> Result<Self> {
        let n = grid.len();
        if source.len() != n || sink.len() != n || edges.iter().any(|e| e.len() != n) {
            return Err(Error::invalid(MODULE, "capacity arrays do not match the grid"));
        }
        let q = |vals: &[f64], what: &str| -> Result<Vec<i64>> {
            vals.iter().map(|&v| quantize(v, what)).collect()
        };
        let mut graph = GridGraph {
            grid,
            source: q(source, "source capacity")?,
            sink: q(sink, "sink capacity")?,
            edges: [q(edges[0], "edge")?, q(edges[1], "edge")?, q(edges[2], "edge")?],
        };
        // Links leaving the grid do not exist.
        for a in 0..3 {
            for idx in 0..n {
                if grid.coords(idx)[a] + 1 == grid.dims[a] {
                    graph.edges[a][idx] = 0;
                }
            }
        }
        Ok(graph)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Number of neighbour links: `3n` minus those that would leave the grid.
    pub fn edge_count(&self) -> usize {
        let [nx, ny, nz] = self.grid.dims;
        (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
    }

    pub fn source_capacity(&self, idx: usize) -> f64 {
        self.source[idx] as f64 / SCALE
    }

    pub fn sink_capacity(&self, idx: usize) -> f64 {
        self.sink[idx] as f64 / SCALE
    }

    pub fn edge_weight(&self, axis: usize, idx: usize) -> f64 {
        self.edges[axis][idx] as f64 / SCALE
    }

    fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.grid.dims[0],
            _ => self.grid.plane(),
        }
    }

    /// Iterates `(a, b, weight)` over existing neighbour links.
    fn links(&self) -> impl Iterator<Item = (usize, usize, i64)> + '_ {
        (0..3).flat_map(move |a| {
            let stride = self.stride(a);
            (0..self.len()).filter_map(move |idx| {
                (self.grid.coords(idx)[a] + 1 < self.grid.dims[a])
                    .then(|| (idx, idx + stride, self.edges[a][idx]))
            })
        })
    }

    /// Discrete energy in integer units: excluded voxels pay the source
    /// capacity, included voxels the sink capacity, and every link whose
    /// endpoints differ pays its weight.
    pub fn energy_units(&self, labels: &[bool]) -> i64 {
        assert_eq!(labels.len(), self.len(), "labeling does not match the graph");
        let terminal: i64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| if l { self.sink[i] } else { self.source[i] })
            .sum();
        let links: i64 = self
            .links()
            .filter(|&(a, b, _)| labels[a] != labels[b])
            .map(|(_, _, w)| w)
            .sum();
        terminal + links
    }

    pub fn energy(&self, labels: &[bool]) -> f64 {
        self.energy_units(labels) as f64 / SCALE
    }

    /// Energy of a binary mask volume.
    pub fn mask_energy(&self, mask: &Volume3D) -> Result<f64> {
        self.grid.ensure_same(mask.grid(), "mask")?;
        mask.ensure_binary(MODULE, "mask")?;
        Ok(self.energy(&mask_labels(mask)))
    }
}

/// Graph for a capacity field: terminal links weighted by the voxel volume,
/// neighbour links by the mean flow bound of the two endpoints times the
/// face-area-over-length factor `s_j s_k / s_i`.
pub fn discretize(caps: &CapacityField) -> Result<GridGraph> {
    let grid = *caps.grid();
    let vol = grid.voxel_volume();
    let s = grid.spacing;
    let alpha = caps.alpha().data();
    let n = grid.len();
    let source: Vec<f64> = caps.source().data().iter().map(|v| v * vol).collect();
    let sink: Vec<f64> = caps.sink().data().iter().map(|v| v * vol).collect();
    let mut edges = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (a, out) in edges.iter_mut().enumerate() {
        let factor = s[(a + 1) % 3] * s[(a + 2) % 3] / s[a];
        let stride = match a {
            0 => 1,
            1 => grid.dims[0],
            _ => grid.plane(),
        };
        for (idx, w) in out.iter_mut().enumerate() {
            if grid.coords(idx)[a] + 1 < grid.dims[a] {
                *w = 0.5 * (alpha[idx] + alpha[idx + stride]) * factor;
            }
        }
    }
    GridGraph::new(grid, &source, &sink, [&edges[0], &edges[1], &edges[2]])
}

pub fn mask_labels(mask: &Volume3D) -> Vec<bool> {
    mask.data().iter().map(|&v| v != 0.0).collect()
}

pub fn labels_to_mask(grid: Grid, labels: &[bool]) -> Volume3D {
    Volume3D::from_parts(grid, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect())
}

/// Result of an exact minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Cut {
    /// `true` = foreground (source side).
    pub labels: Vec<bool>,
    pub value: f64,
    pub units: i64,
}

/// [`Cut`] plus max-flow bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MinCut {
    pub cut: Cut,
    /// Max-flow value in integer units; equals `cut.units` by strong duality.
    pub flow_units: i64,
    /// Whether the minimal and maximal source sides coincide, i.e. the
    /// minimizing labeling is unique.
    pub unique: bool,
}

struct FlowNetwork {
    head: Vec<usize>,
    cap: Vec<i64>,
    adj: Vec<Vec<usize>>,
}

impl FlowNetwork {
    fn new(nodes: usize) -> Self {
        FlowNetwork {
            head: Vec::new(),
            cap: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    fn add(&mut self, u: usize, v: usize, forward: i64, backward: i64) {
        let e = self.head.len();
        self.head.push(v);
        self.cap.push(forward);
        self.head.push(u);
        self.cap.push(backward);
        self.adj[u].push(e);
        self.adj[v].push(e + 1);
    }

    fn levels(&self, s: usize) -> Vec<i32> {
        let mut level = vec![-1; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.head[e];
                if self.cap[e] > 0 && level[v] < 0 {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    }

    fn blocking_flow(&mut self, s: usize, t: usize, level: &mut [i32]) -> i64 {
        let mut next = vec![0usize; self.adj.len()];
        let mut path: Vec<usize> = Vec::new();
        let mut total = 0;
        let mut u = s;
        loop {
            if u == t {
                let push = path.iter().map(|&e| self.cap[e]).min().unwrap_or(0);
                for &e in &path {
                    self.cap[e] -= push;
                    self.cap[e ^ 1] += push;
                }
                total += push;
                path.clear();
                u = s;
                continue;
            }
            let mut advanced = false;
            while next[u] < self.adj[u].len() {
                let e = self.adj[u][next[u]];
                let v = self.head[e];
                if self.cap[e] > 0 && level[v] == level[u] + 1 {
                    path.push(e);
                    u = v;
                    advanced = true;
                    break;
                }
                next[u] += 1;
            }
            if !advanced {
                if u == s {
                    return total;
                }
                level[u] = -1;
                let e = path.pop().expect("retreat below the source");
                u = self.head[e ^ 1];
                next[u] += 1;
            }
        }
    }

    fn max_flow(&mut self, s: usize, t: usize) -> i64 {
        let mut flow = 0;
        loop {
            let mut level = self.levels(s);
            if level[t] < 0 {
                return flow;
            }
            flow += self.blocking_flow(s, t, &mut level);
        }
    }

    /// Nodes from which `t` is reachable in the residual graph.
    fn reaches(&self, t: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[t] = true;
        let mut queue = VecDeque::from([t]);
        while let Some(v) = queue.pop_front() {
            for &e in &self.adj[v] {
                // e is v -> u; its pair is u -> v.
                let u = self.head[e];
                if !seen[u] && self.cap[e ^ 1] > 0 {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen
    }
}

/// Exact minimum cut via Dinic's algorithm. Returns the minimal source side
/// as the foreground labeling.
pub fn min_cut(graph: &GridGraph) -> Result<MinCut> {
    let n = graph.len();
    if n > MAX_CUT_VOXELS {
        return Err(Error::TooLarge {
            voxels: n,
            limit: MAX_CUT_VOXELS,
        });
    }
    let (s, t) = (n, n + 1);
    let mut net = FlowNetwork::new(n + 2);
    for v in 0..n {
        if graph.source[v] > 0 {
            net.add(s, v, graph.source[v], 0);
        }
        if graph.sink[v] > 0 {
            net.add(v, t, graph.sink[v], 0);
        }
    }
    for (a, b, w) in graph.links() {
        if w > 0 {
            net.add(a, b, w, w);
        }
    }
    let flow_units = net.max_flow(s, t);

    let level = net.levels(s);
    let labels: Vec<bool> = (0..n).map(|v| level[v] >= 0).collect();
    let to_sink = net.reaches(t);
    let unique = (0..n).all(|v| labels[v] == !to_sink[v]);
    let units = graph.energy_units(&labels);
    Ok(MinCut {
        cut: Cut {
            labels,
            value: units as f64 / SCALE,
            units,
        },
        flow_units,
        unique,
    })
}

/// Brute-force minimum over all `2^n` labelings, visited in Gray-code order
/// so each step flips a single voxel.
pub fn enumerate_min(graph: &GridGraph) -> Result<Cut> {
    let n = graph.len();
    if n > MAX_ENUMERATE_VOXELS {
        return Err(Error::TooLarge {
            voxels: n,
            limit: MAX_ENUMERATE_VOXELS,
        });
    }
    let mut nbrs: Vec<Vec<(usize, i64)>> = vec![Vec::new(); n];
    for (a, b, w) in graph.links() {
        nbrs[a].push((b, w));
        nbrs[b].push((a, w));
    }
    let mut labels = vec![false; n];
    let mut energy: i64 = graph.source.iter().sum();
    let mut best = (energy, 0u32);
    let mut code = 0u32;
    for step in 1u32..(1u32 << n) {
        let v = step.trailing_zeros() as usize;
        let new = !labels[v];
        let mut delta = if new {
            graph.sink[v] - graph.source[v]
        } else {
            graph.source[v] - graph.sink[v]
        };
        for &(u, w) in &nbrs[v] {
            // the link is cut afterwards iff the labels now differ
            delta += if labels[u] != new { w } else { -w };
        }
        labels[v] = new;
        code ^= 1 << v;
        energy += delta;
        if energy < best.0 {
            best = (energy, code);
        }
    }
    let labels: Vec<bool> = (0..n).map(|v| best.1 >> v & 1 == 1).collect();
    Ok(Cut {
        labels,
        value: best.0 as f64 / SCALE,
        units: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(dims: [usize; 3], cs: &[f64], ct: &[f64], w: f64) -> GridGraph {
        let grid = Grid::unit(dims).unwrap();
        let e = vec![w; grid.len()];
        GridGraph::new(grid, cs, ct, [&e, &e, &e]).unwrap()
    }

    fn random_graph(dims: [usize; 3], rng: &mut impl Rng) -> GridGraph {
        let grid = Grid::unit(dims).unwrap();
        let n = grid.len();
        let mut draw = |hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..hi)).collect() };
        let cs = draw(2.0);
        let ct = draw(2.0);
        let e = [draw(1.0), draw(1.0), draw(1.0)];
        GridGraph::new(grid, &cs, &ct, [&e[0], &e[1], &e[2]]).unwrap()
    }

    /// Independent check: evaluate every labeling directly.
    fn naive_min(g: &GridGraph) -> i64 {
        (0u32..1 << g.len())
            .map(|code| {
                let labels: Vec<bool> = (0..g.len()).map(|v| code >> v & 1 == 1).collect();
                g.energy_units(&labels)
            })
            .min()
            .unwrap()
    }

    #[test]
    fn single_voxel() {
        let g = graph([1, 1, 1], &[2.0], &[1.0], 0.0);
        let cut = min_cut(&g).unwrap();
        assert_eq!(cut.cut.labels, vec![true]);
        assert_eq!(cut.cut.value, 1.0);
        assert_eq!(enumerate_min(&g).unwrap().value, 1.0);
    }

    #[test]
    fn two_voxels() {
        let g = graph([2, 1, 1], &[10.0, 0.0], &[0.0, 10.0], 3.0);
        let cut = min_cut(&g).unwrap();
        assert_eq!(cut.cut.labels, vec![true, false]);
        assert_eq!(cut.cut.value, 3.0);
        assert_eq!(cut.flow_units, cut.cut.units);
        assert!(cut.unique);
        let e = enumerate_min(&g).unwrap();
        assert_eq!(e.labels, vec![true, false]);
        assert_eq!(e.value, 3.0);
    }

    #[test]
    fn zero_capacities_cost_nothing() {
        let g = graph([2, 2, 2], &[0.0; 8], &[0.0; 8], 0.0);
        assert_eq!(enumerate_min(&g).unwrap().value, 0.0);
        assert_eq!(min_cut(&g).unwrap().cut.value, 0.0);
    }

    #[test]
    fn random_cubes_match_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..25 {
            let g = random_graph([2, 2, 2], &mut rng);
            let cut = min_cut(&g).unwrap();
            let expect = naive_min(&g);
            assert_eq!(cut.cut.units, expect);
            assert_eq!(cut.flow_units, expect);
            assert_eq!(enumerate_min(&g).unwrap().units, expect);
        }
    }

    #[test]
    fn discretization_weights() {
        let g = Grid::new([3, 3, 3], [1.0, 1.0, 2.0]).unwrap();
        let caps = CapacityField::new(
            Volume3D::filled(g, 1.0),
            Volume3D::filled(g, 0.5),
            Volume3D::filled(g, 1.0),
        )
        .unwrap();
        let gg = discretize(&caps).unwrap();
        let c = g.index(1, 1, 1);
        assert_eq!(gg.edge_weight(0, c), 2.0);
        assert_eq!(gg.edge_weight(1, c), 2.0);
        assert_eq!(gg.edge_weight(2, c), 0.5);
        assert_eq!(gg.edge_weight(2, g.index(1, 1, 2)), 0.0);
        // terminals carry the voxel volume
        assert_eq!(gg.source_capacity(c), 2.0);
        assert_eq!(gg.edge_count(), 3 * 27 - 27);

        let unit = Grid::unit([3, 3, 3]).unwrap();
        let caps = CapacityField::new(Volume3D::zeros(unit), Volume3D::zeros(unit), Volume3D::zeros(unit)).unwrap();
        let gg = discretize(&caps).unwrap();
        assert!((0..3).all(|a| (0..27).all(|i| gg.edge_weight(a, i) == 0.0)));
    }

    #[test]
    fn size_guards() {
        let big = Grid::unit([33, 32, 32]).unwrap();
        let z = vec![0.0; big.len()];
        let gg = GridGraph::new(big, &z, &z, [&z, &z, &z]).unwrap();
        assert!(matches!(min_cut(&gg), Err(Error::TooLarge { .. })));
        let g = graph([21, 1, 1], &[0.0; 21], &[0.0; 21], 0.0);
        assert!(matches!(enumerate_min(&g), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn ties_are_reported() {
        // cs == ct: both labelings cost the same.
        let g = graph([1, 1, 1], &[1.0], &[1.0], 0.0);
        assert!(!min_cut(&g).unwrap().unique);
    }
}
