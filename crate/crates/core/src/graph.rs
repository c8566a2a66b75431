//! Symbolic states as featured graphs, and disjoint-union batching.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Feature widths and edge-type vocabulary shared by every graph of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GraphShape {
    pub node_width: usize,
    pub edge_width: usize,
    pub edge_types: usize,
    pub global_width: usize,
}

impl GraphShape {
    /// Width of the per-edge input seen by the message function: one-hot type then features.
    pub fn edge_input_width(&self) -> usize {
        self.edge_types + self.edge_width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: usize,
    pub features: Vec<f32>,
}

impl Edge {
    pub fn new(src: usize, dst: usize, kind: usize) -> Self {
        Self {
            src,
            dst,
            kind,
            features: Vec::new(),
        }
    }
}

/// Featured nodes, typed directed featured edges and a global context vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGraph {
    shape: GraphShape,
    node_count: usize,
    node_features: Vec<f32>,
    edges: Vec<Edge>,
    global_context: Vec<f32>,
}

impl StateGraph {
    pub fn build(
        shape: GraphShape,
        nodes: Vec<Vec<f32>>,
        edges: Vec<Edge>,
        global_context: Vec<f32>,
    ) -> Result<Self> {
        let mut node_features = Vec::with_capacity(nodes.len() * shape.node_width);
        for (i, n) in nodes.iter().enumerate() {
            if n.len() != shape.node_width {
                return Err(Error::Validation(format!(
                    "node {i} has {} features, expected {}",
                    n.len(),
                    shape.node_width
                )));
            }
            node_features.extend_from_slice(n);
        }
        let count = nodes.len();
        for (i, e) in edges.iter().enumerate() {
            if e.src >= count || e.dst >= count {
                return Err(Error::Validation(format!(
                    "edge {i} ({} -> {}) references a node outside 0..{count}",
                    e.src, e.dst
                )));
            }
            if e.kind >= shape.edge_types {
                return Err(Error::Validation(format!(
                    "edge {i} has type {} but the vocabulary has {} types",
                    e.kind, shape.edge_types
                )));
            }
            if e.features.len() != shape.edge_width {
                return Err(Error::Validation(format!(
                    "edge {i} has {} features, expected {}",
                    e.features.len(),
                    shape.edge_width
                )));
            }
        }
        if global_context.len() != shape.global_width {
            return Err(Error::Validation(format!(
                "global context has width {}, expected {}",
                global_context.len(),
                shape.global_width
            )));
        }
        Ok(Self {
            shape,
            node_count: count,
            node_features,
            edges,
            global_context,
        })
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn node_feature(&self, i: usize) -> &[f32] {
        let w = self.shape.node_width;
        &self.node_features[i * w..(i + 1) * w]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn global_context(&self) -> &[f32] {
        &self.global_context
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]` of the result.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.node_count();
        if perm.len() != n {
            return Err(Error::dim("permutation", n, perm.len()));
        }
        let mut nodes = vec![Vec::new(); n];
        for (i, &p) in perm.iter().enumerate() {
            nodes[p] = self.node_feature(i).to_vec();
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                kind: e.kind,
                features: e.features.clone(),
            })
            .collect();
        Self::build(self.shape, nodes, edges, self.global_context.clone())
    }

    /// Plain-text dump: node block, then one `src dst type [features…]` line per edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes {}", self.node_count());
        for i in 0..self.node_count() {
            let _ = writeln!(out, "{}", join(self.node_feature(i)));
        }
        let _ = writeln!(out, "edges {}", self.edges.len());
        for e in &self.edges {
            if e.features.is_empty() {
                let _ = writeln!(out, "{} {} {}", e.src, e.dst, e.kind);
            } else {
                let _ = writeln!(out, "{} {} {} {}", e.src, e.dst, e.kind, join(&e.features));
            }
        }
        let _ = writeln!(out, "global {}", join(&self.global_context));
        out
    }
}

fn join(values: &[f32]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Disjoint union of several graphs, with per-graph node and edge ranges.
#[derive(Clone, Debug)]
pub struct BatchedGraph {
    pub shape: GraphShape,
    graphs: Vec<StateGraph>,
    pub node_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    /// Graph id of every node.
    pub node_graph: Arc<[usize]>,
    pub edge_src: Arc<[usize]>,
    pub edge_dst: Vec<usize>,
}

impl BatchedGraph {
    pub fn union(graphs: Vec<StateGraph>) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::Validation("cannot batch zero graphs".into()));
        };
        let shape = first.shape;
        let mut node_offsets = vec![0];
        let mut edge_offsets = vec![0];
        let mut node_graph = Vec::new();
        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        for (g, graph) in graphs.iter().enumerate() {
            if graph.shape != shape {
                return Err(Error::Validation(format!(
                    "graph {g} has shape {:?}, batch expects {:?}",
                    graph.shape, shape
                )));
            }
            let offset = *node_offsets.last().expect("nonempty");
            node_graph.extend(std::iter::repeat_n(g, graph.node_count()));
            for e in &graph.edges {
                edge_src.push(e.src + offset);
                edge_dst.push(e.dst + offset);
            }
            node_offsets.push(offset + graph.node_count());
            edge_offsets.push(edge_src.len());
        }
        Ok(Self {
            shape,
            graphs,
            node_offsets,
            edge_offsets,
            node_graph: node_graph.into(),
            edge_src: edge_src.into(),
            edge_dst,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.graphs.len()
    }

    pub fn num_nodes(&self) -> usize {
        *self.node_offsets.last().expect("nonempty")
    }

    pub fn num_edges(&self) -> usize {
        self.edge_dst.len()
    }

    pub fn graph(&self, i: usize) -> &StateGraph {
        &self.graphs[i]
    }

    pub fn graphs(&self) -> &[StateGraph] {
        &self.graphs
    }

    pub fn node_range(&self, i: usize) -> std::ops::Range<usize> {
        self.node_offsets[i]..self.node_offsets[i + 1]
    }

    /// Recovers the `i`-th member graph.
    pub fn unbatch(&self, i: usize) -> StateGraph {
        self.graphs[i].clone()
    }

    pub fn node_matrix<T: Real>(&self) -> Matrix<T> {
        let w = self.shape.node_width;
        let mut m = Matrix::zeros(self.num_nodes(), w);
        for (g, graph) in self.graphs.iter().enumerate() {
            let start = self.node_offsets[g] * w;
            for (dst, src) in m.data[start..start + graph.node_features.len()]
                .iter_mut()
                .zip(&graph.node_features)
            {
                *dst = T::from_f64_lossy(*src as f64);
            }
        }
        m
    }

    /// One row per edge: one-hot edge type followed by the edge features.
    pub fn edge_matrix<T: Real>(&self) -> Matrix<T> {
        let width = self.shape.edge_input_width();
        let mut m = Matrix::zeros(self.num_edges(), width);
        let mut row = 0;
        for graph in &self.graphs {
            for e in &graph.edges {
                let r = m.row_mut(row);
                r[e.kind] = T::one();
                for (dst, src) in r[self.shape.edge_types..].iter_mut().zip(&e.features) {
                    *dst = T::from_f64_lossy(*src as f64);
                }
                row += 1;
            }
        }
        m
    }

    pub fn global_matrix<T: Real>(&self) -> Matrix<T> {
        let w = self.shape.global_width;
        let mut m = Matrix::zeros(self.num_graphs(), w);
        for (g, graph) in self.graphs.iter().enumerate() {
            for (dst, src) in m.row_mut(g).iter_mut().zip(&graph.global_context) {
                *dst = T::from_f64_lossy(*src as f64);
            }
        }
        m
    }

    /// Sub-batch of the given member graphs (in the given order), plus the
    /// row indices of their nodes in this batch.
    pub fn select(&self, members: &[usize]) -> Result<(BatchedGraph, Vec<usize>)> {
        let graphs = members.iter().map(|&i| self.graphs[i].clone()).collect();
        let rows = members.iter().flat_map(|&i| self.node_range(i)).collect();
        Ok((BatchedGraph::union(graphs)?, rows))
    }
}
