//! Skeleton graph construction and partitioned, degree-normalized adjacency.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to every degree before the inverse square root, so isolated partition rows stay finite.
pub const DEGREE_EPS: f64 = 1e-6;

/// How `A + I` is split into partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionStrategy {
    /// A single partition equal to `A + I`.
    Uniform,
    /// Self / centripetal / centrifugal partitions by hop distance to `center`.
    Spatial { center: usize },
}

/// Partitioned adjacency of a skeleton with `V` joints.
#[derive(Clone, Debug)]
pub struct SkeletonGraph {
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Tensor,
    partitions: Vec<Tensor>,
    normalized: Vec<Arc<Tensor>>,
}

impl SkeletonGraph {
    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// The symmetric 0/1 bone adjacency `A` (zero diagonal).
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// The raw partitions `A_j`, summing to `A + I`.
    pub fn partitions(&self) -> &[Tensor] {
        &self.partitions
    }

    /// `Λ_j^{-1/2} A_j Λ_j^{-1/2}` for each partition.
    pub fn normalized(&self) -> &[Arc<Tensor>] {
        &self.normalized
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    /// Number of nonzero entries summed over all partitions.
    pub fn nonzeros(&self) -> usize {
        self.partitions
            .iter()
            .map(|p| p.data().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }
}

/// `Λ^{-1/2} A Λ'^{-1/2}` with row degrees `Λ_ii = Σ_k A_ik + ε` on the left and
/// column degrees `Λ'_kk = Σ_i A_ik + ε` on the right. Both coincide for a
/// symmetric partition; for the directed spatial partitions the column degree
/// keeps a node without outgoing edges from contributing a `1/√ε` factor.
pub fn normalize_partition(a: &Tensor, eps: f64) -> Tensor {
    let v = a.shape()[0];
    let row: Vec<f64> = (0..v)
        .map(|i| 1.0 / ((0..v).map(|k| a.at2(i, k)).sum::<f64>() + eps).sqrt())
        .collect();
    let col: Vec<f64> = (0..v)
        .map(|k| 1.0 / ((0..v).map(|i| a.at2(i, k)).sum::<f64>() + eps).sqrt())
        .collect();
    Tensor::from_fn(&[v, v], |idx| {
        let (i, k) = (idx / v, idx % v);
        row[i] * a.at2(i, k) * col[k]
    })
}

fn hop_distances(v: usize, edges: &[(usize, usize)], center: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); v];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut dist = vec![None; v];
    dist[center] = Some(0);
    let mut queue = VecDeque::from([center]);
    while let Some(i) = queue.pop_front() {
        let di = dist[i].expect("queued nodes have a distance");
        for &k in &adj[i] {
            if dist[k].is_none() {
                dist[k] = Some(di + 1);
                queue.push_back(k);
            }
        }
    }
    dist
}

/// Builds the partitioned graph for `joint_count` joints and undirected `edges`.
pub fn build_graph(
    edges: &[(usize, usize)],
    joint_count: usize,
    strategy: PartitionStrategy,
) -> Result<SkeletonGraph> {
    if joint_count == 0 {
        return Err(Error::BadEdge("graph needs at least one joint".into()));
    }
    let v = joint_count;
    let mut seen = HashSet::new();
    let mut adjacency = Tensor::zeros(&[v, v]);
    for &(a, b) in edges {
        if a >= v || b >= v {
            return Err(Error::BadEdge(format!(
                "edge ({a},{b}) out of range for {v} joints"
            )));
        }
        if a == b {
            return Err(Error::BadEdge(format!("self-loop on joint {a}")));
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(Error::BadEdge(format!("duplicate edge ({a},{b})")));
        }
        adjacency.set2(a, b, 1.0);
        adjacency.set2(b, a, 1.0);
    }
    let mut a_plus_i = adjacency.clone();
    for i in 0..v {
        a_plus_i.set2(i, i, 1.0);
    }

    let partitions = match strategy {
        PartitionStrategy::Uniform => vec![a_plus_i],
        PartitionStrategy::Spatial { center } => {
            if center >= v {
                return Err(Error::BadEdge(format!(
                    "center joint {center} out of range"
                )));
            }
            let dist = hop_distances(v, edges, center);
            let mut parts = vec![Tensor::zeros(&[v, v]); 3];
            for i in 0..v {
                for k in 0..v {
                    if a_plus_i.at2(i, k) == 0.0 {
                        continue;
                    }
                    let j = match (dist[i], dist[k]) {
                        (Some(di), Some(dk)) if dk < di => 1,
                        (Some(di), Some(dk)) if dk > di => 2,
                        _ => 0,
                    };
                    parts[j].set2(i, k, 1.0);
                }
            }
            parts
        }
    };
    let normalized = partitions
        .iter()
        .map(|p| Arc::new(normalize_partition(p, DEGREE_EPS)))
        .collect();
    Ok(SkeletonGraph {
        joint_count: v,
        edges: edges.to_vec(),
        adjacency,
        partitions,
        normalized,
    })
}
