//! Skeleton graph topology: adjacency construction with self-loops,
//! symmetric degree normalization, BFS neighborhoods, and bone features.

use crate::error::{Error, Result};
use crate::pipeline::SkeletonSequence;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Immutable joint graph shared by both classifier branches.
#[derive(Debug, Clone)]
pub struct GraphTopology {
    pub joints: usize,
    pub edges: Vec<(usize, usize)>,
    /// Per-joint parent index; the root points at itself.
    pub parent: Vec<usize>,
    /// Adjacency with unit edge weights and self-loops.
    pub adjacency: Tensor<f32>,
    /// Symmetrically degree-normalized adjacency.
    pub adjacency_norm: Tensor<f32>,
}

/// On-disk topology schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyJson {
    #[serde(rename = "K")]
    pub joints: usize,
    pub edges: Vec<[usize; 2]>,
    pub parent: Vec<usize>,
}

/// Builds a symmetric adjacency with unit weights, optional self-loops, and
/// its degree-normalized form.
pub fn build_topology(
    edges: &[(usize, usize)],
    joints: usize,
    parent: Vec<usize>,
    self_loops: bool,
) -> Result<GraphTopology> {
    if parent.len() != joints {
        return Err(Error::Schema(format!(
            "parent map has {} entries for {} joints",
            parent.len(),
            joints
        )));
    }
    for (idx, &p) in parent.iter().enumerate() {
        if p >= joints {
            return Err(Error::Schema(format!("parent[{idx}] = {p} out of range")));
        }
    }
    let mut a = Tensor::<f32>::zeros(&[joints, joints]);
    for &(i, j) in edges {
        if i >= joints || j >= joints {
            return Err(Error::Schema(format!(
                "edge ({i}, {j}) out of range for {joints} joints"
            )));
        }
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
    }
    if self_loops {
        for i in 0..joints {
            a.set(&[i, i], 1.0);
        }
    }
    let adjacency_norm = normalize_adjacency(&a)?;
    Ok(GraphTopology {
        joints,
        edges: edges.to_vec(),
        parent,
        adjacency: a,
        adjacency_norm,
    })
}

/// Lambda^{-1/2} A Lambda^{-1/2} with Lambda(i,i) = row sum of A.
pub fn normalize_adjacency(a: &Tensor<f32>) -> Result<Tensor<f32>> {
    let k = a.shape()[0];
    if a.rank() != 2 || a.shape()[1] != k {
        return Err(Error::dim(format!("adjacency must be square, got {:?}", a.shape())));
    }
    let mut inv_sqrt = vec![0.0f32; k];
    for i in 0..k {
        let deg: f32 = (0..k).map(|j| a.at(&[i, j])).sum();
        if deg <= 0.0 {
            return Err(Error::Input(format!(
                "joint {i} has zero degree; enable self-loops"
            )));
        }
        inv_sqrt[i] = 1.0 / deg.sqrt();
    }
    let mut out = Tensor::zeros(&[k, k]);
    for i in 0..k {
        for j in 0..k {
            out.set(&[i, j], inv_sqrt[i] * a.at(&[i, j]) * inv_sqrt[j]);
        }
    }
    Ok(out)
}

impl GraphTopology {
    /// Joints within shortest-path distance `radius` of joint `i` (BFS).
    pub fn neighborhood(&self, i: usize, radius: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.joints];
        let mut queue = VecDeque::new();
        dist[i] = 0;
        queue.push_back(i);
        while let Some(u) = queue.pop_front() {
            if dist[u] == radius {
                continue;
            }
            for v in 0..self.joints {
                if v != u && self.adjacency.at(&[u, v]) > 0.0 && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (0..self.joints).filter(|&v| dist[v] <= radius).collect()
    }

    pub fn to_json(&self) -> TopologyJson {
        TopologyJson {
            joints: self.joints,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            parent: self.parent.clone(),
        }
    }

    pub fn from_json(json: &TopologyJson) -> Result<GraphTopology> {
        let edges: Vec<(usize, usize)> = json.edges.iter().map(|e| (e[0], e[1])).collect();
        build_topology(&edges, json.joints, json.parent.clone(), true)
    }
}

/// Second-order skeleton features: each joint's coordinate minus its
/// parent's, with the root bone fixed at zero. Same T x K x C x N layout as
/// the input coordinates.
pub fn bones(skel: &SkeletonSequence, topo: &GraphTopology) -> Result<Tensor<f32>> {
    let shape = skel.coords.shape();
    let (t_len, k, c, n) = (shape[0], shape[1], shape[2], shape[3]);
    if k != topo.joints {
        return Err(Error::Schema(format!(
            "skeleton has {k} joints, topology has {}",
            topo.joints
        )));
    }
    let mut out = Tensor::zeros(shape);
    for t in 0..t_len {
        for j in 0..k {
            let p = topo.parent[j];
            if p == j {
                continue; // root bone stays zero
            }
            for ch in 0..c {
                for person in 0..n {
                    let v = skel.coords.at(&[t, j, ch, person])
                        - skel.coords.at(&[t, p, ch, person]);
                    out.set(&[t, j, ch, person], v);
                }
            }
        }
    }
    Ok(out)
}

/// 18-joint 2D pose layout produced by common pose estimators
/// (nose, neck, shoulders/elbows/wrists, hips/knees/ankles, eyes, ears).
pub fn pose18_joint_names() -> Vec<String> {
    [
        "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
        "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear",
        "l_ear",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// 14-joint topology left after dropping eyes and ears from the 18-joint
/// layout. Parent map is rooted at the neck.
pub fn pose14_topology() -> GraphTopology {
    let edges = [
        (0, 1),  // nose-neck
        (1, 2),  // neck-r_shoulder
        (2, 3),  // r_shoulder-r_elbow
        (3, 4),  // r_elbow-r_wrist
        (1, 5),  // neck-l_shoulder
        (5, 6),
        (6, 7),
        (1, 8),  // neck-r_hip
        (8, 9),
        (9, 10),
        (1, 11), // neck-l_hip
        (11, 12),
        (12, 13),
    ];
    let parent = vec![1, 1, 1, 2, 3, 1, 5, 6, 1, 8, 9, 1, 11, 12];
    build_topology(&edges, 14, parent, true).expect("static topology is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::SkeletonSequence;
    use crate::rng::Rng;

    #[test]
    fn two_node_topology_matches_hand_normalization() {
        let topo = build_topology(&[(0, 1)], 2, vec![0, 0], true).unwrap();
        assert_eq!(topo.adjacency.data(), &[1.0, 1.0, 1.0, 1.0]);
        for &v in topo.adjacency_norm.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn edgeless_graph_normalizes_to_identity() {
        let topo = build_topology(&[], 3, vec![0, 1, 2], true).unwrap();
        assert_eq!(topo.adjacency, Tensor::<f32>::eye(3));
        assert!(topo.adjacency_norm.max_abs_diff(&Tensor::eye(3)) < 1e-6);
    }

    #[test]
    fn out_of_range_edge_is_schema_error() {
        assert!(matches!(
            build_topology(&[(0, 5)], 3, vec![0, 0, 0], true),
            Err(Error::Schema(_))
        ));
    }

    /// Power iteration as an independent spectral-radius oracle.
    fn spectral_radius(m: &Tensor<f32>) -> f64 {
        let k = m.shape()[0];
        let mut v: Vec<f64> = (0..k).map(|i| 1.0 + i as f64 * 0.01).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut next = vec![0.0f64; k];
            for i in 0..k {
                for j in 0..k {
                    next[i] += m.at(&[i, j]) as f64 * v[j];
                }
            }
            lambda = next.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
            if lambda == 0.0 {
                break;
            }
            for x in next.iter_mut() {
                *x /= lambda;
            }
            v = next;
        }
        lambda
    }

    #[test]
    fn pose14_normalization_properties() {
        let topo = pose14_topology();
        // row sums of A equal degree + 1 (self loop)
        for i in 0..14 {
            let deg = topo
                .edges
                .iter()
                .filter(|&&(a, b)| a == i || b == i)
                .count();
            let row: f32 = (0..14).map(|j| topo.adjacency.at(&[i, j])).sum();
            assert!((row - (deg as f32 + 1.0)).abs() < 1e-6);
        }
        // A_norm symmetric with spectral radius <= 1
        for i in 0..14 {
            for j in 0..14 {
                let d = topo.adjacency_norm.at(&[i, j]) - topo.adjacency_norm.at(&[j, i]);
                assert!(d.abs() < 1e-6);
            }
        }
        assert!(spectral_radius(&topo.adjacency_norm) <= 1.0 + 1e-6);
    }

    #[test]
    fn neighborhood_radius_zero_and_chain() {
        let topo = build_topology(&[(0, 1), (1, 2)], 3, vec![0, 0, 1], true).unwrap();
        assert_eq!(topo.neighborhood(1, 0), vec![1]);
        assert_eq!(topo.neighborhood(0, 1), vec![0, 1]);
    }

    #[test]
    fn neighborhood_full_diameter_covers_tree() {
        let mut rng = Rng::new(5);
        // random tree over 9 nodes
        let k = 9;
        let mut edges = Vec::new();
        let mut parent = vec![0usize; k];
        for i in 1..k {
            let p = rng.uniform_usize(i);
            edges.push((p, i));
            parent[i] = p;
        }
        let topo = build_topology(&edges, k, parent, true).unwrap();
        for i in 0..k {
            let hood = topo.neighborhood(i, k); // radius >= diameter
            assert_eq!(hood, (0..k).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rebuild_from_own_edges_is_idempotent() {
        let topo = pose14_topology();
        let rebuilt = build_topology(&topo.edges, topo.joints, topo.parent.clone(), true).unwrap();
        assert_eq!(topo.adjacency, rebuilt.adjacency);
        assert_eq!(topo.adjacency_norm, rebuilt.adjacency_norm);
    }

    fn skel_from(coords: Tensor<f32>) -> SkeletonSequence {
        let k = coords.shape()[1];
        SkeletonSequence {
            coords,
            joint_names: (0..k).map(|i| format!("j{i}")).collect(),
            person_mask: vec![vec![true]],
        }
    }

    #[test]
    fn bones_basic_and_translation_invariant() {
        let topo = build_topology(&[(0, 1)], 2, vec![0, 0], true).unwrap();
        // parent 0 at (0,0), child 1 at (3,4)
        let coords = Tensor::from_vec(&[1, 2, 2, 1], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let b = bones(&skel_from(coords.clone()), &topo).unwrap();
        assert_eq!(b.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(b.at(&[0, 1, 0, 0]), 3.0);
        assert_eq!(b.at(&[0, 1, 1, 0]), 4.0);

        // translate everything by (10, -2): bones unchanged
        let mut shifted = coords;
        for j in 0..2 {
            let x = shifted.at(&[0, j, 0, 0]);
            let y = shifted.at(&[0, j, 1, 0]);
            shifted.set(&[0, j, 0, 0], x + 10.0);
            shifted.set(&[0, j, 1, 0], y - 2.0);
        }
        let b2 = bones(&skel_from(shifted), &topo).unwrap();
        assert!(b.max_abs_diff(&b2) < 1e-6);
    }

    #[test]
    fn coincident_joints_give_zero_bones() {
        let topo = build_topology(&[(0, 1), (1, 2)], 3, vec![0, 0, 1], true).unwrap();
        let coords = Tensor::full(&[2, 3, 2, 1], 7.5);
        let b = bones(&skel_from(coords), &topo).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }
}
