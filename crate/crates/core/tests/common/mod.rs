//! Reference implementations written without the library's kernels, shared
//! by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// All-pairs hop distance by breadth-first search; `None` if unreachable.
pub fn bfs_distances(n: usize, edges: &[[usize; 2]]) -> Vec<Vec<Option<usize>>> {
    let mut adj = vec![Vec::new(); n];
    for &[a, b] in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    (0..n)
        .map(|s| {
            let mut dist = vec![None; n];
            dist[s] = Some(0);
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(dist[u].unwrap() + 1);
                        queue.push_back(v);
                    }
                }
            }
            dist
        })
        .collect()
}

/// `A^k[i][j] = 1` iff the BFS distance is exactly `k`, for `k = 0..=r`.
pub fn khop_oracle(n: usize, edges: &[[usize; 2]], r: usize) -> Vec<Vec<Vec<f64>>> {
    let dist = bfs_distances(n, edges);
    (0..=r)
        .map(|k| {
            (0..n)
                .map(|i| (0..n).map(|j| if dist[i][j] == Some(k) { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect()
}

/// A random spanning tree plus a few extra edges.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<[usize; 2]> {
    let mut edges = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.push([u, v]);
        seen.insert((u, v));
    }
    let extra = rng.random_range(0..=n / 2);
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let key = (a.min(b), a.max(b));
        if a != b && seen.insert(key) {
            edges.push([a, b]);
        }
    }
    edges
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Per-head query, key and value projections.
pub type HeadWeights = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Standard multi-head self-attention of one `T × G` sequence with scores
/// scaled by `1/√G`. Returns the output and each head's attention.
pub fn vanilla_mha(
    x: &[Vec<f64>],
    heads: &[HeadWeights],
    w_o: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let t = x.len();
    let scale = 1.0 / (x[0].len() as f64).sqrt();
    let mut concat = vec![Vec::new(); t];
    let mut maps = Vec::new();
    for (wq, wk, wv) in heads {
        let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
        let mut att = vec![vec![0.0; t]; t];
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..t {
                att[i][j] = exps[j] / z;
            }
        }
        let out = matmul(&att, &v);
        for i in 0..t {
            concat[i].extend_from_slice(&out[i]);
        }
        maps.push(att);
    }
    (matmul(&concat, w_o), maps)
}

pub fn naive_mpjpe(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut total = 0.0;
    for j in 0..a.len() {
        let mut sq = 0.0;
        for c in 0..3 {
            sq += (a[j][c] - b[j][c]).powi(2);
        }
        total += sq.sqrt();
    }
    total / a.len() as f64
}

/// Rotation matrix of a random unit quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        q.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            q.iter_mut().for_each(|c| *c /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn apply_similarity(pose: &[[f64; 3]], scale: f64, rot: &[[f64; 3]; 3], shift: [f64; 3]) -> Vec<[f64; 3]> {
    pose.iter()
        .map(|p| {
            let mut out = [0.0; 3];
            for r in 0..3 {
                out[r] = scale * (rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2]) + shift[r];
            }
            out
        })
        .collect()
}

pub fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Vec<[f64; 3]> {
    (0..joints)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

/// Learnable scalars of a model with `j` joints, width `d`, highest order
/// `r`, `blocks` transformer blocks and `t` frames, counted from layer
/// shapes. The head count does not change the total.
pub fn analytic_param_count(j: usize, d: usize, r: usize, blocks: usize, t: usize) -> usize {
    let g = j * d;
    let spatial = (r + 1) * 2 * d + 2 * d * d + d + 2 * g;
    let block = 2 * g            // layer norm before JWA
        + t * j                  // W^J
        + 2 * g                  // layer norm before BCMA
        + 3 * g * g              // per-head Q, K, V
        + g * g + 1              // W^O and W^F
        + 2 * g                  // batch norm
        + g * 2 * g + 2 * g      // MLP expand
        + 2 * g * g + g;         // MLP project
    let head = 2 * g + g * 3 * j + 3 * j;
    spatial + t * g + blocks * block + head
}
