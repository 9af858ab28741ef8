//! Spatially weighted POI graph and seeded random walks.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::knn::all_knn;
use crate::error::{Error, Result};

/// Undirected weighted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiGraph {
    pub adjacency: Vec<Vec<(usize, f64)>>,
}

impl PoiGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Invalid(format!("bad edge ({a}, {b})")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Invalid(format!("edge ({a}, {b}) needs a positive weight")));
            }
            if !adjacency[a].iter().any(|&(x, _)| x == b) {
                adjacency[a].push((b, w));
                adjacency[b].push((a, w));
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
        }
        Ok(Self { adjacency })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Each POI linked to its `k` nearest neighbors with weight `exp(−dist/σ)`.
/// `sigma = None` uses the median neighbor distance.
pub fn build_poi_graph(points: &[(f64, f64)], k: usize, sigma: Option<f64>) -> Result<PoiGraph> {
    if points.len() < 2 {
        return PoiGraph::from_edges(points.len(), &[]);
    }
    let k = k.min(points.len() - 1);
    let nbrs = all_knn(points, k)?;
    let dist = |a: usize, b: usize| ((points[a].0 - points[b].0).powi(2) + (points[a].1 - points[b].1).powi(2)).sqrt();
    let sigma = match sigma {
        Some(s) if s > 0.0 => s,
        Some(_) => return Err(Error::Invalid("sigma must be positive".into())),
        None => {
            let m = median(nbrs.iter().enumerate().flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j))).map(|(i, j)| dist(i, j)).collect());
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let edges: Vec<(usize, usize, f64)> = nbrs
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)))
        .map(|(i, j)| (i, j, (-dist(i, j) / sigma).exp().max(f64::MIN_POSITIVE)))
        .collect();
    PoiGraph::from_edges(points.len(), &edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkSet {
    pub sequences: Vec<Vec<usize>>,
    /// Start nodes without neighbors; their walks have length 1.
    pub isolated: Vec<usize>,
}

/// `walks_per_node` walks of `walk_length` nodes from every node, stepping to
/// a neighbor with probability proportional to the edge weight.
pub fn sample_random_walks(graph: &PoiGraph, walk_length: usize, walks_per_node: usize, seed: u64) -> Result<WalkSet> {
    if walk_length < 2 {
        return Err(Error::Invalid("walk length must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samplers: Vec<Option<WeightedIndex<f64>>> = graph
        .adjacency
        .iter()
        .map(|adj| {
            if adj.is_empty() {
                None
            } else {
                WeightedIndex::new(adj.iter().map(|&(_, w)| w)).ok()
            }
        })
        .collect();
    let mut sequences = Vec::with_capacity(graph.n_nodes() * walks_per_node);
    let isolated: Vec<usize> = (0..graph.n_nodes()).filter(|&i| graph.degree(i) == 0).collect();
    for _ in 0..walks_per_node {
        for start in 0..graph.n_nodes() {
            let mut walk = vec![start];
            let mut cur = start;
            while walk.len() < walk_length {
                let Some(sampler) = &samplers[cur] else { break };
                cur = graph.adjacency[cur][sampler.sample(&mut rng)].0;
                walk.push(cur);
            }
            sequences.push(walk);
        }
    }
    Ok(WalkSet { sequences, isolated })
}
