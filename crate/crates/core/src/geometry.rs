//! Neighbourhood structure shared by the encoder and the click simulator.

use std::collections::HashMap;

use crate::scene::LabeledScene;
use crate::tensor::Tensor;

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// k nearest neighbours (self excluded) and the mean nearest-neighbour distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneIndex {
    pub knn: Vec<Vec<usize>>,
    pub mean_nn_distance: f64,
    pub centroid: [f64; 3],
}

impl SceneIndex {
    /// Exhaustive search; ties are broken by point index.
    pub fn build(scene: &LabeledScene, k: usize) -> Self {
        let n = scene.len();
        let k = k.min(n.saturating_sub(1));
        let xyz: Vec<[f64; 3]> = (0..n).map(|i| scene.xyz(i)).collect();
        let mut knn = Vec::with_capacity(n);
        let mut nn_sum = 0.0;
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            cand.clear();
            cand.extend((0..n).filter(|&j| j != i).map(|j| (dist2(xyz[i], xyz[j]), j)));
            let nearest = cand
                .iter()
                .copied()
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((d, _)) = nearest {
                nn_sum += d.sqrt();
            }
            if k > 0 {
                cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut best: Vec<(f64, usize)> = cand[..k].to_vec();
                best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                knn.push(best.into_iter().map(|(_, j)| j).collect());
            } else {
                knn.push(Vec::new());
            }
        }
        let mut centroid = [0.0; 3];
        for p in &xyz {
            for a in 0..3 {
                centroid[a] += p[a] / n as f64;
            }
        }
        let mean_nn_distance = if n > 1 { nn_sum / n as f64 } else { 0.0 };
        Self {
            knn,
            mean_nn_distance,
            centroid,
        }
    }

    /// Per-point encoder input: centred xyz, rgb, mean neighbour offset,
    /// mean neighbour rgb (`N x 12`).
    pub fn point_inputs(&self, scene: &LabeledScene) -> Tensor {
        let n = scene.len();
        let mut data = Vec::with_capacity(n * 12);
        for i in 0..n {
            let p = &scene.points[i];
            for a in 0..3 {
                data.push(p[a] - self.centroid[a]);
            }
            data.extend_from_slice(&p[3..6]);
            let nb = &self.knn[i];
            let mut off = [0.0; 3];
            let mut rgb = [0.0; 3];
            for &j in nb {
                let q = &scene.points[j];
                for a in 0..3 {
                    off[a] += q[a] - p[a];
                    rgb[a] += q[3 + a];
                }
            }
            let c = nb.len().max(1) as f64;
            for a in 0..3 {
                // offsets are a few centimetres; bring them to unit scale
                data.push(10.0 * off[a] / c);
            }
            for a in 0..3 {
                data.push(if nb.is_empty() { p[3 + a] } else { rgb[a] / c });
            }
        }
        Tensor::matrix(n, 12, data)
    }
}

/// Connected components of `members` under the graph linking points closer
/// than `radius`. Components are returned with indices in ascending order,
/// ordered by their smallest index.
pub fn radius_components(scene: &LabeledScene, members: &[usize], radius: f64) -> Vec<Vec<usize>> {
    if members.is_empty() {
        return Vec::new();
    }
    let cell = radius.max(1e-12);
    let key = |p: [f64; 3]| {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (slot, &i) in members.iter().enumerate() {
        grid.entry(key(scene.xyz(i))).or_default().push(slot);
    }
    let r2 = radius * radius;
    let mut comp = vec![usize::MAX; members.len()];
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by_key(|&s| members[s]);
    for &start in &order {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        comp[start] = id;
        let mut stack = vec![start];
        let mut acc = Vec::new();
        while let Some(s) = stack.pop() {
            acc.push(members[s]);
            let p = scene.xyz(members[s]);
            let c = key(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &t in bucket {
                                if comp[t] == usize::MAX && dist2(p, scene.xyz(members[t])) <= r2 {
                                    comp[t] = id;
                                    stack.push(t);
                                }
                            }
                        }
                    }
                }
            }
        }
        acc.sort_unstable();
        out.push(acc);
    }
    out
}

/// Index of the point in `members` nearest to their centroid (lowest index on ties).
pub fn nearest_to_centroid(scene: &LabeledScene, members: &[usize]) -> Option<usize> {
    if members.is_empty() {
        return None;
    }
    let mut c = [0.0; 3];
    for &i in members {
        let p = scene.xyz(i);
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= members.len() as f64;
    }
    members
        .iter()
        .map(|&i| (dist2(scene.xyz(i), c), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
}
