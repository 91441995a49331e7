//! Clustering agreement metrics between predicted cluster ids and gold labels.
//!
//! Conventions follow the common reference implementations: natural log,
//! arithmetic-mean normalization for NMI and AMI, expected mutual information
//! under the hypergeometric permutation model, and the same degenerate-case
//! values (e.g. a single cluster against a single class scores 1).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Metric record of one evaluation episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub f1: f64,
    pub ami: f64,
    pub fm: f64,
    pub rand: f64,
    pub ari: f64,
    pub nmi: f64,
    pub homogeneity: f64,
}

impl MetricRecord {
    pub const KEYS: [&'static str; 7] = ["f1", "ami", "fm", "rand", "ari", "nmi", "homogeneity"];

    pub fn values(&self) -> [f64; 7] {
        [self.f1, self.ami, self.fm, self.rand, self.ari, self.nmi, self.homogeneity]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self {
            f1: v[0],
            ami: v[1],
            fm: v[2],
            rand: v[3],
            ari: v[4],
            nmi: v[5],
            homogeneity: v[6],
        }
    }

    /// Field-wise mean.
    pub fn mean(records: &[MetricRecord]) -> MetricRecord {
        let mut acc = [0.0; 7];
        for r in records {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = records.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }

    /// Field-wise population standard deviation.
    pub fn std(records: &[MetricRecord]) -> MetricRecord {
        let m = Self::mean(records).values();
        let mut acc = [0.0; 7];
        for r in records {
            for ((a, v), mu) in acc.iter_mut().zip(r.values()).zip(m) {
                *a += (v - mu) * (v - mu);
            }
        }
        let n = records.len().max(1) as f64;
        Self::from_values(acc.map(|a| (a / n).sqrt()))
    }
}

/// Clustering metrics without F1 (which needs a cluster-to-label matching).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    pub ami: f64,
    pub fm: f64,
    pub rand: f64,
    pub ari: f64,
    pub nmi: f64,
    pub homogeneity: f64,
}

impl ClusteringMetrics {
    pub fn with_f1(self, f1: f64) -> MetricRecord {
        MetricRecord {
            f1,
            ami: self.ami,
            fm: self.fm,
            rand: self.rand,
            ari: self.ari,
            nmi: self.nmi,
            homogeneity: self.homogeneity,
        }
    }
}

struct Contingency {
    n: usize,
    /// Nonzero cells as (count, gold marginal, cluster marginal).
    cells: Vec<(usize, usize, usize)>,
    gold: Vec<usize>,
    clusters: Vec<usize>,
}

fn contingency(clusters: &[usize], gold: &[usize]) -> Contingency {
    let mut g: BTreeMap<usize, usize> = BTreeMap::new();
    let mut c: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&k, &y) in clusters.iter().zip(gold) {
        *g.entry(y).or_default() += 1;
        *c.entry(k).or_default() += 1;
        *cells.entry((y, k)).or_default() += 1;
    }
    let c_of = |k: &usize| c[k];
    Contingency {
        n: gold.len(),
        cells: cells.iter().map(|(&(y, k), &c)| (c, g[&y], c_of(&k))).collect(),
        gold: g.into_values().collect(),
        clusters: c.into_values().collect(),
    }
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    if counts.len() <= 1 {
        return 0.0;
    }
    let nf = n as f64;
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / nf;
            p * ((c as f64).ln() - nf.ln())
        })
        .sum::<f64>()
}

fn mutual_info(t: &Contingency) -> f64 {
    if t.gold.len() == 1 || t.clusters.len() == 1 {
        return 0.0;
    }
    let n = t.n as f64;
    let mut mi = 0.0;
    for &(nij, a, b) in &t.cells {
        let nij = nij as f64;
        let outer = (a * b) as f64;
        let term = (nij / n) * (nij.ln() - n.ln()) + (nij / n) * (-outer.ln() + n.ln() + n.ln());
        if term.abs() >= f64::EPSILON {
            mi += term;
        }
    }
    mi.max(0.0)
}

/// Expected mutual information of two labelings with the given marginals
/// under random permutation.
fn expected_mutual_info(a: &[usize], b: &[usize], n: usize) -> f64 {
    if a.len() == 1 || b.len() == 1 {
        return 0.0;
    }
    let nf = n as f64;
    let lg = |x: f64| libm::lgamma(x);
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let start = 1.max((ai + bj).saturating_sub(n));
            let end = ai.min(bj);
            for nij in start..=end {
                let nijf = nij as f64;
                let term1 = nijf / nf;
                let term2 = (nf.ln() + nijf.ln()) - (ai as f64).ln() - (bj as f64).ln();
                let gln = lg(ai as f64 + 1.0) + lg(bj as f64 + 1.0) + lg((n - ai) as f64 + 1.0) + lg((n - bj) as f64 + 1.0)
                    - (lg(nijf + 1.0) + lg(nf + 1.0))
                    - lg((ai - nij) as f64 + 1.0)
                    - lg((bj - nij) as f64 + 1.0)
                    - lg((n + nij - ai - bj) as f64 + 1.0);
                emi += term1 * term2 * gln.exp();
            }
        }
    }
    emi
}

fn choose2(x: usize) -> u128 {
    (x as u128) * (x.saturating_sub(1) as u128) / 2
}

/// AMI, FM, Rand, ARI, NMI and homogeneity of `clusters` against `gold`.
pub fn clustering_metrics(clusters: &[usize], gold: &[usize]) -> Result<ClusteringMetrics> {
    if clusters.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} cluster ids for {} gold labels",
            clusters.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Contract("metrics need at least one example".into()));
    }
    let t = contingency(clusters, gold);
    let n = t.n;

    // pair counts
    let same_both: u128 = t.cells.iter().map(|&(c, _, _)| choose2(c)).sum();
    let same_cluster: u128 = t.clusters.iter().map(|&c| choose2(c)).sum();
    let same_gold: u128 = t.gold.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    let tp = same_both as f64;
    let fp = (same_cluster - same_both) as f64;
    let fn_ = (same_gold - same_both) as f64;
    let tn = total as f64 - tp - fp - fn_;

    let rand = if total == 0 || tp + tn == total as f64 { 1.0 } else { (tp + tn) / total as f64 };
    let ari = if fp == 0.0 && fn_ == 0.0 {
        1.0
    } else {
        2.0 * (tp * tn - fn_ * fp) / ((tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn))
    };
    let fm = if tp == 0.0 { 0.0 } else { (tp / (tp + fp)).sqrt() * (tp / (tp + fn_)).sqrt() };

    let h_gold = entropy(&t.gold, n);
    let h_clu = entropy(&t.clusters, n);
    let mi = mutual_info(&t);
    let homogeneity = if h_gold == 0.0 { 1.0 } else { mi / h_gold };

    let both_single = t.gold.len() == 1 && t.clusters.len() == 1;
    let nmi = if both_single {
        1.0
    } else if mi == 0.0 {
        0.0
    } else {
        mi / (0.5 * (h_gold + h_clu))
    };
    let ami = if both_single {
        1.0
    } else if t.gold.len() == 1 || t.clusters.len() == 1 {
        0.0
    } else {
        let emi = expected_mutual_info(&t.gold, &t.clusters, n);
        let mut den = 0.5 * (h_gold + h_clu) - emi;
        den = if den < 0.0 { den.min(-f64::EPSILON) } else { den.max(f64::EPSILON) };
        let mut num = mi - emi;
        num = if num < 0.0 { num.min(-f64::EPSILON) } else { num.max(f64::EPSILON) };
        num / den
    };
    Ok(ClusteringMetrics {
        ami,
        fm,
        rand,
        ari,
        nmi,
        homogeneity,
    })
}

/// Mean silhouette coefficient under Euclidean distance. Points in singleton
/// clusters score 0. Needs between 2 and `len − 1` distinct clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Contract("one label per point required".into()));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 || sizes.len() >= points.len() {
        return Err(Error::Contract(format!(
            "silhouette needs 2..{} clusters, got {}",
            points.len().saturating_sub(1),
            sizes.len()
        )));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                *sums.entry(labels[j]).or_default() += dist(p, q);
            }
        }
        let own = sizes[&labels[i]];
        if own == 1 {
            continue;
        }
        let a = sums.get(&labels[i]).copied().unwrap_or(0.0) / (own - 1) as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(l, s)| s / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / points.len() as f64)
}
