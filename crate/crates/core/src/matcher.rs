//! Zero-shot projection of query features onto unseen types: k-means
//! clustering, optimal cluster-to-label assignment and a deterministic 2-D
//! projection for plotting.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{clustering_metrics, MetricRecord};
use crate::rng::seeded_rng;

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub cluster_ids: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Number of times an empty cluster was re-seeded.
    pub reseeded: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(features: &[Vec<f64>], n_clusters: usize, seed: u64) -> Result<ClusteringResult> {
    let b = features.len();
    if n_clusters == 0 || b < n_clusters {
        return Err(Error::Contract(format!("kmeans needs at least {n_clusters} points, got {b}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Contract("kmeans points have mismatched dimensionality".into()));
    }
    let mut rng = seeded_rng(seed, &[0x6b_6d65616e73]);

    let mut chosen = vec![rng.gen_range(0..b)];
    let mut d2: Vec<f64> = features.iter().map(|p| sq_dist(p, &features[chosen[0]])).collect();
    while chosen.len() < n_clusters {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = b - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            (0..b).find(|i| !chosen.contains(i)).expect("b >= n_clusters")
        };
        chosen.push(next);
        for (i, p) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &features[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| features[i].clone()).collect();

    let mut ids = vec![usize::MAX; b];
    let mut reseeded = 0;
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITER {
        iterations = it + 1;
        let mut changed = false;
        for (i, p) in features.iter().enumerate() {
            let k = nearest(p, &centroids).0;
            if ids[i] != k {
                ids[i] = k;
                changed = true;
            }
        }
        // empty clusters take the point farthest from its own centroid
        for k in 0..n_clusters {
            if ids.iter().all(|&c| c != k) {
                let far = (0..b)
                    .filter(|&i| ids.iter().filter(|&&c| c == ids[i]).count() > 1)
                    .max_by(|&i, &j| {
                        let di = sq_dist(&features[i], &centroids[ids[i]]);
                        let dj = sq_dist(&features[j], &centroids[ids[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("some cluster has two points");
                ids[far] = k;
                reseeded += 1;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for (p, &k) in features.iter().zip(&ids) {
            counts[k] += 1;
            for (s, x) in sums[k].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for k in 0..n_clusters {
            let c: Vec<f64> = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            shift = shift.max(sq_dist(&c, &centroids[k]).sqrt());
            centroids[k] = c;
        }
        if !changed || shift < KMEANS_TOL {
            break;
        }
    }
    let inertia = features.iter().zip(&ids).map(|(p, &k)| sq_dist(p, &centroids[k])).sum();
    Ok(ClusteringResult {
        cluster_ids: ids,
        centroids,
        inertia,
        iterations,
        reseeded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Min,
    Max,
}

/// Square cost matrix of an assignment problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentProblem {
    pub cost: Vec<Vec<f64>>,
}

impl AssignmentProblem {
    pub fn new(cost: Vec<Vec<f64>>) -> Result<Self> {
        let n = cost.len();
        if cost.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("assignment cost matrix must be square".into()));
        }
        if cost.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Contract("assignment cost matrix has non-finite entries".into()));
        }
        Ok(Self { cost })
    }

    pub fn size(&self) -> usize {
        self.cost.len()
    }
}

/// Minimum-cost assignment of rows to columns by shortest augmenting paths
/// with potentials, O(n³).
fn solve_min(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    (assignment, total)
}

/// Optimal assignment `row → column` and its objective. Among optimal
/// assignments the lexicographically smallest is returned: rows are fixed in
/// order to the lowest column that still admits an optimal completion.
pub fn hungarian(problem: &AssignmentProblem, sense: Sense) -> Result<(Vec<usize>, f64)> {
    let problem = AssignmentProblem::new(problem.cost.clone())?;
    let n = problem.size();
    let cost: Vec<Vec<f64>> = match sense {
        Sense::Min => problem.cost.clone(),
        Sense::Max => problem.cost.iter().map(|r| r.iter().map(|x| -x).collect()).collect(),
    };
    let (_, best) = solve_min(&cost);
    let scale = cost.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale * n.max(1) as f64;

    let mut assignment = Vec::with_capacity(n);
    let mut free: Vec<usize> = (0..n).collect();
    let mut fixed = 0.0;
    for r in 0..n {
        let mut picked = None;
        for (pos, &c) in free.iter().enumerate() {
            let rest: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let sub: Vec<Vec<f64>> = ((r + 1)..n).map(|i| rest.iter().map(|&j| cost[i][j]).collect()).collect();
            let completion = fixed + cost[r][c] + solve_min(&sub).1;
            if completion <= best + tol {
                picked = Some((pos, c));
                break;
            }
        }
        let (pos, c) = picked.expect("an optimal completion always exists");
        fixed += cost[r][c];
        assignment.push(c);
        free.remove(pos);
    }
    let objective = assignment.iter().enumerate().map(|(r, &c)| problem.cost[r][c]).sum();
    Ok((assignment, objective))
}

/// Cluster → label mapping maximizing the overlap of relabeled clusters with
/// the gold labels.
pub fn assign_clusters_to_labels(cluster_ids: &[usize], gold: &[usize], n: usize) -> Result<Vec<usize>> {
    if cluster_ids.len() != gold.len() {
        return Err(Error::Contract("cluster ids and gold labels differ in length".into()));
    }
    if let Some(&x) = cluster_ids.iter().chain(gold).find(|&&x| x >= n) {
        return Err(Error::Contract(format!("id {x} out of range for {n} classes")));
    }
    let mut counts = vec![vec![0.0; n]; n];
    for (&c, &g) in cluster_ids.iter().zip(gold) {
        counts[c][g] += 1.0;
    }
    Ok(hungarian(&AssignmentProblem::new(counts)?, Sense::Max)?.0)
}

/// Fraction of exact matches; micro F1 when every example carries one label.
pub fn micro_f1(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract("predictions and gold labels differ in length".into()));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Clustering of features into `n` groups scored against gold labels: F1
/// after optimal relabeling, the rest on raw cluster ids.
pub fn zero_shot_metrics(features: &[Vec<f64>], gold: &[usize], n: usize, seed: u64) -> Result<(ClusteringResult, MetricRecord)> {
    let clustering = kmeans(features, n, seed)?;
    let record = score_clusters(&clustering.cluster_ids, gold, n)?;
    Ok((clustering, record))
}

pub fn score_clusters(cluster_ids: &[usize], gold: &[usize], n: usize) -> Result<MetricRecord> {
    let map = assign_clusters_to_labels(cluster_ids, gold, n)?;
    let relabeled: Vec<usize> = cluster_ids.iter().map(|&c| map[c]).collect();
    let f1 = micro_f1(&relabeled, gold)?;
    Ok(clustering_metrics(cluster_ids, gold)?.with_f1(f1))
}

/// Centers the rows and projects them onto the two leading principal axes.
/// Axis signs make each axis's largest-magnitude loading positive; axes beyond
/// the data's rank are zero.
pub fn project_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let b = features.len();
    if b < 2 {
        return Err(Error::Contract("projection needs at least two points".into()));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Contract("projection points have mismatched dimensionality".into()));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / b as f64;
        }
    }
    let x = DMatrix::from_fn(b, d, |i, j| features[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let top = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let rank_tol = top * 1e-10 * (b.max(d) as f64);

    let mut out = vec![[0.0; 2]; b];
    for (axis, &k) in order.iter().take(2).enumerate() {
        if svd.singular_values[k] <= rank_tol || top == 0.0 {
            continue;
        }
        let mut dir: Vec<f64> = vt.row(k).iter().copied().collect();
        let lead = dir
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(1.0, |(_, v)| *v);
        if lead < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, o) in out.iter_mut().enumerate() {
            o[axis] = (0..d).map(|j| x[(i, j)] * dir[j]).sum();
        }
    }
    Ok(out)
}
