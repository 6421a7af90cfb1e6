//! Random geometric graphs with shortest-path and min-cut oracles.
//!
//! Node 0 is the source and node `T - 1` the target.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;

pub const DEFAULT_ALPHA: f64 = 4.5;
pub const DEFAULT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoGraph {
    pub points: Vec<Vec<f64>>,
    pub radius: f64,
    pub directed: bool,
    /// Out-neighbours, sorted. Symmetric when undirected.
    pub adj: Vec<Vec<usize>>,
}

impl GeoGraph {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn source(&self) -> usize {
        0
    }

    pub fn target(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum()
    }

    /// Rebuilds adjacency from coordinates and the radius.
    pub fn from_points(points: Vec<Vec<f64>>, radius: f64, directed: bool) -> Self {
        let n = points.len();
        let mut adj = vec![Vec::new(); n];
        for a in 0..n {
            for b in a + 1..n {
                if dist(&points[a], &points[b]) <= radius {
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
        }
        if directed {
            let (s, t) = (0, n - 1);
            for (a, out) in adj.iter_mut().enumerate() {
                if a == t {
                    out.clear();
                } else {
                    out.retain(|&b| b != s);
                }
            }
        }
        GeoGraph { points, radius, directed, adj }
    }

    /// Same graph with nodes relabelled; `perm[new] = old`. Source and target
    /// must stay fixed.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let points = perm.iter().map(|&o| self.points[o].clone()).collect();
        let adj = perm
            .iter()
            .map(|&o| {
                let mut v: Vec<usize> = self.adj[o].iter().map(|&b| inv[b]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        GeoGraph { points, radius: self.radius, directed: self.directed, adj }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Volume of the unit ball in `dim` dimensions.
pub fn unit_ball_volume(dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    std::f64::consts::PI.powf(h) / libm::tgamma(h + 1.0)
}

/// Radius solving `alpha = (T - 1) vol(B_r) / 2^dim`, ignoring the boundary.
pub fn radius_for_degree(t: usize, alpha: f64, dim: usize) -> Result<f64, TaskError> {
    let r = (alpha * 2f64.powi(dim as i32) / ((t - 1) as f64 * unit_ball_volume(dim))).powf(1.0 / dim as f64);
    let diameter = 2.0 * (dim as f64).sqrt();
    if !r.is_finite() || r > diameter {
        return Err(TaskError::RadiusOverflow { radius: r, diameter });
    }
    Ok(r)
}

/// Points uniform in `[-1, 1]^dim`. The directed variant sends every source
/// edge out of the source and every target edge into the target; relay
/// edges go both ways.
pub fn gen_rgg<R: Rng + ?Sized>(t: usize, alpha: f64, dim: usize, directed: bool, rng: &mut R) -> Result<GeoGraph, TaskError> {
    if t < 2 {
        return Err(TaskError::TooShort { min: 2, got: t });
    }
    if !(alpha > 0.0 && alpha.is_finite()) || dim == 0 {
        return Err(TaskError::InvalidParams("alpha must be positive and dim at least 1".into()));
    }
    let r = radius_for_degree(t, alpha, dim)?;
    let points = (0..t)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    Ok(GeoGraph::from_points(points, r, directed))
}

/// BFS hop distance from source to target; `None` when disconnected.
pub fn spp_oracle(g: &GeoGraph) -> Option<usize> {
    let mut seen = vec![usize::MAX; g.len()];
    let mut queue = VecDeque::from([g.source()]);
    seen[g.source()] = 0;
    while let Some(v) = queue.pop_front() {
        if v == g.target() {
            return Some(seen[v]);
        }
        for &w in &g.adj[v] {
            if seen[w] == usize::MAX {
                seen[w] = seen[v] + 1;
                queue.push_back(w);
            }
        }
    }
    None
}

/// Maximum source-target flow with unit capacities (Dinic).
pub fn mincut_oracle(g: &GeoGraph) -> usize {
    Dinic::new(g).max_flow(g.source(), g.target())
}

struct Dinic {
    // Edge i and i ^ 1 are a forward/residual pair.
    to: Vec<usize>,
    cap: Vec<u32>,
    head: Vec<Vec<usize>>,
    level: Vec<usize>,
    next: Vec<usize>,
}

impl Dinic {
    fn new(g: &GeoGraph) -> Self {
        let n = g.len();
        let mut d = Dinic {
            to: Vec::new(),
            cap: Vec::new(),
            head: vec![Vec::new(); n],
            level: vec![0; n],
            next: vec![0; n],
        };
        for (a, out) in g.adj.iter().enumerate() {
            for &b in out {
                d.head[a].push(d.to.len());
                d.to.push(b);
                d.cap.push(1);
                d.head[b].push(d.to.len());
                d.to.push(a);
                d.cap.push(0);
            }
        }
        d
    }

    fn bfs(&mut self, s: usize, t: usize) -> bool {
        self.level.fill(usize::MAX);
        self.level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            for &e in &self.head[v] {
                let w = self.to[e];
                if self.cap[e] > 0 && self.level[w] == usize::MAX {
                    self.level[w] = self.level[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        self.level[t] != usize::MAX
    }

    fn dfs(&mut self, v: usize, t: usize) -> bool {
        if v == t {
            return true;
        }
        while self.next[v] < self.head[v].len() {
            let e = self.head[v][self.next[v]];
            let w = self.to[e];
            if self.cap[e] > 0 && self.level[w] == self.level[v] + 1 && self.dfs(w, t) {
                self.cap[e] -= 1;
                self.cap[e ^ 1] += 1;
                return true;
            }
            self.next[v] += 1;
        }
        false
    }

    fn max_flow(&mut self, s: usize, t: usize) -> usize {
        if s == t {
            return 0;
        }
        let mut flow = 0;
        while self.bfs(s, t) {
            self.next.fill(0);
            while self.dfs(s, t) {
                flow += 1;
            }
        }
        flow
    }
}
