//! Skeleton topologies and their multi-order adjacency matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Joints, bones, left/right pairs and root of a skeleton.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonTopology {
    pub num_joints: usize,
    pub edges: Vec<[usize; 2]>,
    pub flip_pairs: Vec<[usize; 2]>,
    pub root: usize,
}

const H36M17: &str = include_str!("../fixtures/h36m17.json");
const HUMANEVA15: &str = include_str!("../fixtures/humaneva15.json");
const TINY5: &str = include_str!("../fixtures/tiny5.json");

/// Names accepted by [`SkeletonTopology::builtin`].
pub const BUILTIN_TOPOLOGIES: [&str; 3] = ["h36m17", "humaneva15", "tiny5"];

impl SkeletonTopology {
    pub fn new(
        num_joints: usize,
        edges: Vec<[usize; 2]>,
        flip_pairs: Vec<[usize; 2]>,
        root: usize,
    ) -> Result<Self> {
        let t = Self {
            num_joints,
            edges,
            flip_pairs,
            root,
        };
        t.validate()?;
        Ok(t)
    }

    /// Shipped topologies: the 17-joint Human3.6M tree, the 15-joint
    /// HumanEva-I tree, and a 5-joint tree used by the gradient checks.
    pub fn builtin(name: &str) -> Option<Self> {
        let src = match name {
            "h36m17" => H36M17,
            "humaneva15" => HUMANEVA15,
            "tiny5" => TINY5,
            _ => return None,
        };
        Some(Self::from_json(src).expect("shipped topology fixtures are valid"))
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(src)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_json(&src).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })
    }

    /// A builtin name, or else a path to a topology JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(t) => Ok(t),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.num_joints;
        if j == 0 {
            return Err(Error::Config("topology needs at least one joint".into()));
        }
        if self.root >= j {
            return Err(Error::Config(format!("root {} out of range for {j} joints", self.root)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &[a, b] in &self.edges {
            if a >= j || b >= j {
                return Err(Error::Config(format!("edge ({a}, {b}) out of range for {j} joints")));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop edge ({a}, {a})")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Config(format!("duplicate edge ({a}, {b})")));
            }
        }
        let mut used = std::collections::BTreeSet::new();
        for &[l, r] in &self.flip_pairs {
            if l >= j || r >= j {
                return Err(Error::Config(format!("flip pair ({l}, {r}) out of range for {j} joints")));
            }
            if l == r || !used.insert(l) || !used.insert(r) {
                return Err(Error::Config(format!("flip pair ({l}, {r}) overlaps another pair")));
            }
        }
        Ok(())
    }

    /// Binary, symmetric bone adjacency matrix.
    pub fn adjacency(&self) -> Tensor {
        let j = self.num_joints;
        let mut a = Tensor::zeros(&[j, j]);
        for &[u, v] in &self.edges {
            a.set(&[u, v], 1.0);
            a.set(&[v, u], 1.0);
        }
        a
    }

    fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints];
        for &[u, v] in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Parent of every joint in the breadth-first tree rooted at `root`;
    /// `None` for the root and for joints unreachable from it.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let adj = self.neighbours();
        let mut parent = vec![None; self.num_joints];
        let mut visited = vec![false; self.num_joints];
        visited[self.root] = true;
        let mut queue = std::collections::VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        parent
    }

    /// Joints in breadth-first order from the root (reachable joints only).
    pub fn traversal_order(&self) -> Vec<usize> {
        let parents = self.parents();
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let u = order[i];
            order.extend((0..self.num_joints).filter(|&v| parents[v] == Some(u)));
            i += 1;
        }
        order
    }

    /// Permutation mapping each joint to its mirror partner.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_joints).collect();
        for &[l, r] in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }
}

/// Binary matrices `A⁰ … A^R` where `A^k[i][j] = 1` iff the shortest path
/// between joints `i` and `j` has exactly `k` bones. `A⁰` is the identity.
///
/// Computed by repeated frontier expansion with the bone adjacency matrix:
/// the pairs first reached at step `k` are exactly those at distance `k`.
pub fn build_khop_adjacency(topology: &SkeletonTopology, max_order: usize) -> Vec<Tensor> {
    let j = topology.num_joints;
    let bones = topology.adjacency();
    let mut reached = vec![false; j * j];
    let mut frontier = Tensor::eye(j);
    for i in 0..j {
        reached[i * j + i] = true;
    }
    let mut out = vec![frontier.clone()];
    for _ in 1..=max_order {
        let mut next = Tensor::zeros(&[j, j]);
        for src in 0..j {
            for mid in 0..j {
                if frontier.at(&[src, mid]) == 0.0 {
                    continue;
                }
                for dst in 0..j {
                    if bones.at(&[mid, dst]) != 0.0 && !reached[src * j + dst] {
                        next.set(&[src, dst], 1.0);
                    }
                }
            }
        }
        for (r, v) in reached.iter_mut().zip(next.data()) {
            *r |= *v != 0.0;
        }
        out.push(next.clone());
        frontier = next;
    }
    out
}

/// `D^(−1/2) · A · D^(−1/2)` with `D_ii = Σ_j A_ij`. Zero-degree rows and
/// columns stay zero.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("normalize_adjacency", format!("expected a square matrix, got {s:?}")));
    }
    let n = s[0];
    for i in 0..n {
        for j in 0..n {
            let v = a.at(&[i, j]);
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!("adjacency entry ({i}, {j}) = {v} is not binary")));
            }
            if v != a.at(&[j, i]) {
                return Err(Error::Contract(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| a.at(&[i, j])).sum();
            if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }
        })
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(&[i, j], inv_sqrt_deg[i] * a.at(&[i, j]) * inv_sqrt_deg[j]);
        }
    }
    Ok(out)
}

/// Normalized adjacency matrices `Ã⁰ … Ã^R` of one topology.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedAdjacencySet {
    matrices: Vec<Tensor>,
}

impl OrderedAdjacencySet {
    /// With `self_loops`, each `A^k` for `k ≥ 1` gets the identity added
    /// before normalization. Off by default: order 0 already carries the
    /// self-connection.
    pub fn new(topology: &SkeletonTopology, max_order: usize, self_loops: bool) -> Result<Self> {
        let j = topology.num_joints;
        let matrices = build_khop_adjacency(topology, max_order)
            .into_iter()
            .enumerate()
            .map(|(k, mut a)| {
                if self_loops && k > 0 {
                    for i in 0..j {
                        a.set(&[i, i], 1.0);
                    }
                }
                normalize_adjacency(&a)
            })
            .collect::<Result<_>>()?;
        Ok(Self { matrices })
    }

    pub fn max_order(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn num_joints(&self) -> usize {
        self.matrices[0].shape()[0]
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn order(&self, k: usize) -> &Tensor {
        &self.matrices[k]
    }
}

/// Number of joint pairs (unordered, self-pairs included) linked by some
/// order `0..=max_order`.
pub fn connection_count(topology: &SkeletonTopology, max_order: usize) -> usize {
    let j = topology.num_joints;
    let mats = build_khop_adjacency(topology, max_order);
    let mut n = 0;
    for i in 0..j {
        for k in i..j {
            if mats.iter().any(|m| m.at(&[i, k]) != 0.0) {
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SkeletonTopology {
        SkeletonTopology::new(3, vec![[0, 1], [1, 2]], vec![], 0).unwrap()
    }

    fn nonzero(t: &Tensor) -> Vec<(usize, usize)> {
        let n = t.shape()[0];
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if t.at(&[i, j]) != 0.0 {
                    v.push((i, j));
                }
            }
        }
        v
    }

    #[test]
    fn path_graph_orders() {
        let a = build_khop_adjacency(&path3(), 2);
        assert_eq!(a[0], Tensor::eye(3));
        assert_eq!(nonzero(&a[1]), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(nonzero(&a[2]), vec![(0, 2), (2, 0)]);
    }

    #[test]
    fn order_zero_is_identity_for_builtins() {
        for name in BUILTIN_TOPOLOGIES {
            let t = SkeletonTopology::builtin(name).unwrap();
            assert_eq!(build_khop_adjacency(&t, 0), vec![Tensor::eye(t.num_joints)]);
        }
    }

    #[test]
    fn normalize_simple_cases() {
        assert_eq!(normalize_adjacency(&Tensor::eye(4)).unwrap(), Tensor::eye(4));
        let swap = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(normalize_adjacency(&swap).unwrap(), swap);
    }

    #[test]
    fn normalize_star_graph() {
        let star = SkeletonTopology::new(5, vec![[0, 1], [0, 2], [0, 3], [0, 4]], vec![], 0).unwrap();
        let n = normalize_adjacency(&star.adjacency()).unwrap();
        for leaf in 1..5 {
            assert!((n.at(&[0, leaf]) - 0.5).abs() < 1e-15);
            assert!((n.at(&[leaf, 0]) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_asymmetric_and_handles_isolated() {
        let asym = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(normalize_adjacency(&asym), Err(Error::Contract(_))));
        let n = normalize_adjacency(&Tensor::zeros(&[3, 3])).unwrap();
        assert!(n.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_topologies_rejected() {
        assert!(SkeletonTopology::new(3, vec![[0, 3]], vec![], 0).is_err());
        assert!(SkeletonTopology::new(3, vec![[1, 1]], vec![], 0).is_err());
        assert!(SkeletonTopology::new(3, vec![[0, 1], [1, 0]], vec![], 0).is_err());
        assert!(SkeletonTopology::new(3, vec![[0, 1]], vec![[1, 2], [2, 0]], 0).is_err());
        assert!(SkeletonTopology::new(3, vec![[0, 1]], vec![], 3).is_err());
        assert!(SkeletonTopology::from_json(r#"{"num_joints":2,"edges":[],"flip_pairs":[],"root":0,"x":1}"#).is_err());
    }

    #[test]
    fn h36m_coverage_grows_with_order() {
        let t = SkeletonTopology::builtin("h36m17").unwrap();
        let counts: Vec<usize> = (0..=6).map(|r| connection_count(&t, r)).collect();
        assert_eq!(counts[0], 17);
        assert_eq!(counts[1], 17 + 16);
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn parents_follow_bfs_tree() {
        let t = SkeletonTopology::builtin("h36m17").unwrap();
        let p = t.parents();
        assert_eq!(p[0], None);
        assert_eq!(p[3], Some(2));
        assert_eq!(p[10], Some(9));
        assert_eq!(t.traversal_order().len(), 17);
    }
}
