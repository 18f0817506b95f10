//! Undirected weighted token graph and its symmetric normalization.
//!
//! Nodes are token positions. Edge rules:
//! - unit edges between consecutive caption tokens and consecutive
//!   description tokens (objects carry no syntactic order, so none there);
//! - an edge from each source token to the first token of its concept,
//!   weighted by the concept's relevance;
//! - unit edges chaining the tokens of a multi-token concept.
//!
//! Separator and target tokens stay isolated. Every node gets a unit
//! self-loop in the adjacency, which also covers padding positions.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::enrich::{EnrichedSequence, SegmentKind};
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

pub const SELF_LOOP_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    #[serde(rename = "w")]
    pub weight: f64,
}

impl Edge {
    /// Stores the endpoints as `(min, max)`.
    pub fn new(a: usize, b: usize, weight: f64) -> Self {
        Self {
            u: a.min(b),
            v: a.max(b),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedGraph {
    pub node_count: usize,
    pub edges: Vec<Edge>,
}

impl WeightedGraph {
    /// Symmetric adjacency with unit self-loops, padded to `size` nodes.
    pub fn adjacency(&self, size: usize) -> Result<Matrix> {
        if size < self.node_count {
            return Err(CoreError::Shape {
                op: "adjacency",
                lhs: (self.node_count, self.node_count),
                rhs: (size, size),
            });
        }
        let mut a = Matrix::zeros(size, size);
        for i in 0..size {
            a[(i, i)] = SELF_LOOP_WEIGHT;
        }
        for e in &self.edges {
            a[(e.u, e.v)] = e.weight;
            a[(e.v, e.u)] = e.weight;
        }
        Ok(a)
    }

    /// Row sums of [`Self::adjacency`].
    pub fn degrees(&self, size: usize) -> Result<Vec<f64>> {
        let a = self.adjacency(size)?;
        Ok((0..size).map(|i| a.row(i).iter().sum()).collect())
    }

    /// Edges ordered by `(u, v)`.
    pub fn sorted_edges(&self) -> Vec<Edge> {
        let mut e = self.edges.clone();
        e.sort_by(|a, b| (a.u, a.v).cmp(&(b.u, b.v)));
        e
    }
}

fn push_chain(edges: &mut Vec<Edge>, start: usize, end: usize) {
    for i in start..end.saturating_sub(1) {
        edges.push(Edge::new(i, i + 1, 1.0));
    }
}

pub fn build_graph(seq: &EnrichedSequence) -> Result<WeightedGraph> {
    let mut edges = Vec::new();
    for seg in &seq.segments {
        if seg.end > seq.len() {
            return Err(CoreError::Config(alloc::format!("segment {:?} exceeds the sequence", seg.kind)));
        }
        match seg.kind {
            SegmentKind::Caption | SegmentKind::Description => push_chain(&mut edges, seg.start, seg.end),
            SegmentKind::CaptionConcepts | SegmentKind::DescriptionConcepts | SegmentKind::ObjectConcepts => {
                let source = seg
                    .kind
                    .source_of()
                    .and_then(|k| seq.segment(k))
                    .ok_or(CoreError::DanglingLink { source_index: 0 })?;
                for link in &seg.concept_links {
                    let in_span = link.concept_start < link.concept_end
                        && seg.start <= link.concept_start
                        && link.concept_end <= seg.end;
                    if !source.contains(link.source_index) || !in_span {
                        return Err(CoreError::DanglingLink {
                            source_index: link.source_index,
                        });
                    }
                    if !(link.relevance.is_finite() && link.relevance > 0.0) {
                        return Err(CoreError::InvalidWeight {
                            u: link.source_index,
                            v: link.concept_start,
                            weight: link.relevance,
                        });
                    }
                    edges.push(Edge::new(link.source_index, link.concept_start, link.relevance));
                    push_chain(&mut edges, link.concept_start, link.concept_end);
                }
            }
            SegmentKind::Objects | SegmentKind::Separator | SegmentKind::Target | SegmentKind::TargetConcepts => {}
        }
    }
    Ok(WeightedGraph {
        node_count: seq.len(),
        edges,
    })
}

/// `D̂^{-1/2} Â D̂^{-1/2}` with `D̂` the row sums of `Â`.
pub fn normalize(adjacency: &Matrix) -> Result<Matrix> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(CoreError::Shape {
            op: "normalize",
            lhs: adjacency.shape(),
            rhs: (n, n),
        });
    }
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = adjacency.row(i).iter().sum();
        if d <= 0.0 || !d.is_finite() {
            return Err(CoreError::ZeroDegree(i));
        }
        inv_sqrt.push(1.0 / libm::sqrt(d));
    }
    Ok(Matrix::from_fn(n, n, |i, j| (inv_sqrt[i] * inv_sqrt[j]) * adjacency[(i, j)]))
}

/// Normalized adjacency of `graph` padded to `size` nodes.
pub fn normalized_adjacency(graph: &WeightedGraph, size: usize) -> Result<Matrix> {
    normalize(&graph.adjacency(size)?)
}
