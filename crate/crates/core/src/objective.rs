//! Loss terms: event NLL, trigger NLL, Gaussian-kernel MMD, the inter-class
//! contrastive term and their weighted total.
//!
//! The plain functions work on values. [`EventObjective`] evaluates the total
//! loss of a batch on the autodiff tape and implements [`Objective`] for the
//! meta-optimizer.

use serde::{Deserialize, Serialize};

use crate::data::{Example, Task, TriggerSpan};
use crate::encoder::{Backbone, EventModel, TransformerBackbone};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::meta::{EpisodeObjective, MetaTask, Objective};
use crate::parallel::Execution;
use crate::params::ParameterSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    #[default]
    MedianHeuristic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MMDConfig {
    pub bandwidth: Bandwidth,
}

impl MMDConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("mmd bandwidth must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_c: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_c must be finite and non-negative, got {}",
                self.lambda_c
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub event_nll: f64,
    pub trigger_nll: f64,
    pub contrastive: f64,
    pub lambda_c: f64,
    pub total: f64,
    /// Fewer than two classes were present, so the contrastive term was 0.
    pub contrastive_skipped: bool,
}

impl LossBreakdown {
    pub fn new(event_nll: f64, trigger_nll: f64, contrastive: f64, lambda_c: f64, contrastive_skipped: bool) -> Self {
        Self {
            event_nll,
            trigger_nll,
            contrastive,
            lambda_c,
            total: event_nll + trigger_nll + lambda_c * contrastive,
            contrastive_skipped,
        }
    }

    /// A loss with a single undifferentiated term.
    pub fn scalar(value: f64) -> Self {
        Self::new(value, 0.0, 0.0, 0.0, true)
    }

    pub fn is_finite(&self) -> bool {
        self.event_nll.is_finite() && self.trigger_nll.is_finite() && self.contrastive.is_finite() && self.total.is_finite()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Contract("mmd needs two nonempty sets".into()));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != d) {
        return Err(Error::Contract("mmd sets have mismatched dimensionality".into()));
    }
    Ok(d)
}

/// Median of the pairwise distances among distinct points; 1 when that is 0.
pub fn median_bandwidth(points: &[&[f64]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            d.push(sq_dist(points[i], points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// V-statistic MMD² estimate with a Gaussian kernel (diagonal terms included).
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], config: &MMDConfig) -> Result<f64> {
    check_sets(x, y)?;
    config.validate()?;
    let sigma = match config.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => {
            let all: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
            median_bandwidth(&all)
        }
    };
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += k(p, q);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok(mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y))
}

/// `−(1/(N(N−1))) Σ_{i≠j} D(X_i, X_j)`.
pub fn contrastive_loss(features_by_class: &[Vec<Vec<f64>>], config: &MMDConfig) -> Result<f64> {
    let n = features_by_class.len();
    if n < 2 {
        return Err(Error::Contract(format!("contrastive loss needs at least 2 classes, got {n}")));
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += mmd(&features_by_class[i], &features_by_class[j], config)?;
            }
        }
    }
    Ok(-s / (n * (n - 1)) as f64)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Mean over rows of `−log softmax(logits)[label]`.
pub fn event_nll(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows || logits.rows == 0 {
        return Err(Error::Contract(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    let mut s = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols {
            return Err(Error::Contract(format!("label {y} out of range for {} classes", logits.cols)));
        }
        s -= log_softmax_row(logits.row(r))[y];
    }
    Ok(s / labels.len() as f64)
}

/// Mean per-token binary NLL against the span's 0/1 targets.
pub fn trigger_nll(token_logits: &Tensor<f64>, span: TriggerSpan) -> Result<f64> {
    if token_logits.cols != 2 {
        return Err(Error::Contract("trigger logits need two columns".into()));
    }
    if !span.is_valid_for(token_logits.rows) {
        return Err(Error::Contract(format!(
            "span [{}, {}) invalid for {} tokens",
            span.start, span.end, token_logits.rows
        )));
    }
    event_nll(token_logits, &span.mask(token_logits.rows))
}

/// Records the MMD between two row subsets of a feature matrix whose pairwise
/// squared distances are `d2` (`b × b`).
fn mmd_node<S: Scalar>(g: &mut Graph<'_, S>, d2: NodeId, b: usize, xs: &[usize], ys: &[usize], config: &MMDConfig) -> NodeId {
    let idx: Vec<usize> = xs.iter().chain(ys).copied().collect();
    let m = idx.len();
    let flat: Vec<usize> = idx.iter().flat_map(|&r| idx.iter().map(move |&c| r * b + c)).collect();
    let sub = g.pick_entries(d2, &flat);
    let sub = g.reshape(sub, m, m);
    let arg = match config.bandwidth {
        Bandwidth::Fixed(s) => g.scale(sub, -1.0 / (2.0 * s * s)),
        Bandwidth::MedianHeuristic => match median_entries(g.value(sub), m) {
            None => g.scale(sub, -0.5),
            Some((picks, divisor)) => {
                let p = g.pick_entries(sub, &picks);
                let r = g.sqrt(p);
                let sum = g.sum(r);
                let sigma = g.scale(sum, 1.0 / divisor);
                let s2 = g.mul(sigma, sigma);
                let inv = g.recip(s2);
                let c = g.scale(inv, -0.5);
                g.mul_scalar(sub, c)
            }
        },
    };
    let kern = g.exp(arg);
    let w: Vec<f64> = xs
        .iter()
        .map(|_| 1.0 / xs.len() as f64)
        .chain(ys.iter().map(|_| -1.0 / ys.len() as f64))
        .collect();
    g.quad_form(kern, &w)
}

/// Flat indices (into an `m × m` distance matrix) of the entries whose
/// distances form the median over distinct pairs, and the count they are
/// averaged over. Zero entries are dropped (they add nothing to the sum and
/// their square root has no derivative). `None` when the median is zero.
fn median_entries<S: Scalar>(d2: &Tensor<S>, m: usize) -> Option<(Vec<usize>, f64)> {
    let mut pairs: Vec<(f64, usize)> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            pairs.push((d2.data[i * m + j].value(), i * m + j));
        }
    }
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = pairs.len();
    let mid: Vec<(f64, usize)> = if n % 2 == 1 {
        vec![pairs[n / 2]]
    } else {
        vec![pairs[n / 2 - 1], pairs[n / 2]]
    };
    let divisor = mid.len() as f64;
    let nonzero: Vec<usize> = mid.iter().filter(|(v, _)| *v > 0.0).map(|&(_, i)| i).collect();
    if nonzero.is_empty() {
        None
    } else {
        Some((nonzero, divisor))
    }
}

/// Records the contrastive term for `features` (`b × f`) grouped by `classes`.
/// Returns `None` when fewer than two classes are present.
pub fn contrastive_node<S: Scalar>(
    g: &mut Graph<'_, S>,
    features: NodeId,
    classes: &[usize],
    config: &MMDConfig,
) -> Option<NodeId> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in classes.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let sets: Vec<Vec<usize>> = groups.into_values().collect();
    let n = sets.len();
    if n < 2 {
        return None;
    }
    let b = classes.len();
    let d2 = g.pairwise_sq_dist(features);
    let mut acc: Option<NodeId> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = mmd_node(g, d2, b, &sets[i], &sets[j], config);
            acc = Some(match acc {
                None => d,
                Some(a) => g.add(a, d),
            });
        }
    }
    // both orderings of each unordered pair contribute the same value
    Some(g.scale(acc.expect("n >= 2"), -2.0 / (n * (n - 1)) as f64))
}

/// One inner- or outer-loop batch: examples with episode-local classes.
#[derive(Clone, Debug, PartialEq)]
pub struct EventBatch {
    pub examples: Vec<Example>,
    pub classes: Vec<usize>,
}

impl EventBatch {
    pub fn new(examples: Vec<Example>, classes: Vec<usize>) -> Result<Self> {
        if examples.len() != classes.len() || examples.is_empty() {
            return Err(Error::Contract("batch needs one class per example and at least one example".into()));
        }
        Ok(Self { examples, classes })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Consecutive chunks of at most `cap` examples.
    pub fn chunks(&self, cap: usize) -> Vec<EventBatch> {
        let cap = cap.max(1);
        self.examples
            .chunks(cap)
            .zip(self.classes.chunks(cap))
            .map(|(e, c)| EventBatch {
                examples: e.to_vec(),
                classes: c.to_vec(),
            })
            .collect()
    }
}

/// Total loss of a batch under an [`EventModel`] whose parameters include a
/// verbalizer head.
#[derive(Clone, Debug)]
pub struct EventObjective<'m, B: Backbone = TransformerBackbone> {
    pub model: &'m EventModel<B>,
    pub loss: LossConfig,
    pub mmd: MMDConfig,
    pub execution: Execution,
    /// Largest batch fed to a single loss evaluation.
    pub batch_cap: usize,
}

/// Values and gradients of one batch evaluation.
pub struct BatchEval<S> {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor<S>>,
    /// `b × f` event features.
    pub features: Tensor<f64>,
    pub logits: Tensor<f64>,
}

impl<'m, B: Backbone> EventObjective<'m, B> {
    pub fn new(model: &'m EventModel<B>, loss: LossConfig, mmd: MMDConfig, execution: Execution) -> Self {
        Self {
            model,
            loss,
            mmd,
            execution,
            batch_cap: 50,
        }
    }

    /// Forward and backward over a batch. Example encoders run (in parallel
    /// when enabled) on independent tapes; a small head tape joins their
    /// features for the verbalizer and the contrastive term, and its feature
    /// gradients are pushed back through each example tape. Parameter
    /// gradients are reduced in example order, so results do not depend on
    /// the execution mode.
    pub fn evaluate<S: Scalar>(&self, params: &[Tensor<S>], batch: &EventBatch) -> Result<BatchEval<S>> {
        let model = self.model;
        let nb = batch.len();
        if nb == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if params.len() < model.num_shared() + 2 {
            return Err(Error::Contract("parameters lack a verbalizer head".into()));
        }
        let (vw, vb) = model.verbalizer_indices();
        let n_way = params[vw].cols;
        if let Some(&c) = batch.classes.iter().find(|&&c| c >= n_way) {
            return Err(Error::Contract(format!("class {c} out of range for a {n_way}-way head")));
        }

        let tapes: Vec<Result<(Graph<'_, S>, NodeId, NodeId)>> = self.execution.map(&batch.examples, |ex| {
            let mut g = Graph::new(params);
            let n = model.forward_example(&mut g, ex)?;
            Ok((g, n.features, n.trigger_nll))
        });
        let tapes: Vec<(Graph<'_, S>, NodeId, NodeId)> = tapes.into_iter().collect::<Result<_>>()?;

        let fdim = tapes[0].0.shape(tapes[0].1).1;
        let mut feats = Tensor::<S>::zeros(nb, fdim);
        let mut trig = S::zero();
        for (r, (g, f, t)) in tapes.iter().enumerate() {
            feats.row_mut(r).copy_from_slice(&g.value(*f).data);
            trig += g.value(*t).data[0];
        }
        let trig = trig.scale(1.0 / nb as f64);

        let mut head = Graph::new(params);
        let x = head.input(feats);
        let w = head.param(vw);
        let b = head.param(vb);
        let h = head.gelu(x);
        let logits = head.matmul(h, w);
        let logits = head.add_row(logits, b);
        let logp = head.log_softmax_rows(logits);
        let picked = head.pick_per_row(logp, &batch.classes);
        let mean = head.mean(picked);
        let nll = head.scale(mean, -1.0);
        let con = contrastive_node(&mut head, x, &batch.classes, &self.mmd);
        let lambda = self.loss.lambda_c;
        let total = match con {
            Some(c) if lambda != 0.0 => {
                let wc = head.scale(c, lambda);
                head.add(nll, wc)
            }
            _ => nll,
        };

        let mut grads: Vec<Tensor<S>> = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        let node_grads = head.backward(&[(total, Tensor::scalar(S::one()))], &mut grads);
        let dfeat = node_grads[x.index()].clone().unwrap_or_else(|| Tensor::zeros(nb, fdim));

        let inv_b = S::from_f64(1.0 / nb as f64);
        let partial: Vec<Vec<Tensor<S>>> = self.execution.map_indexed(nb, |r| {
            let (g, f, t) = &tapes[r];
            let mut pg: Vec<Tensor<S>> = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
            let seeds = [
                (*f, Tensor::from_vec(1, fdim, dfeat.row(r).to_vec())),
                (*t, Tensor::scalar(inv_b)),
            ];
            g.backward(&seeds, &mut pg);
            pg
        });
        for pg in partial {
            for (a, b) in grads.iter_mut().zip(&pg) {
                a.add_assign(b);
            }
        }

        let breakdown = LossBreakdown::new(
            head.value(nll).data[0].value(),
            trig.value(),
            con.map_or(0.0, |c| head.value(c).data[0].value()),
            lambda,
            con.is_none(),
        );
        Ok(BatchEval {
            breakdown,
            grads,
            features: head.value(x).values(),
            logits: head.value(logits).values(),
        })
    }

    /// Loss values only.
    pub fn loss(&self, params: &ParameterSet, batch: &EventBatch) -> Result<LossBreakdown> {
        Ok(self.evaluate(&params.lift::<f64>(), batch)?.breakdown)
    }

    fn batch_of(&self, task: &Task, examples: &[Example]) -> Result<Vec<EventBatch>> {
        let classes = examples.iter().map(|e| task.local(e)).collect();
        Ok(EventBatch::new(examples.to_vec(), classes)?.chunks(self.batch_cap))
    }
}

impl<'m, B: Backbone> Objective for EventObjective<'m, B> {
    type Batch = EventBatch;

    fn gradient<S: Scalar>(&self, params: &[Tensor<S>], batch: &EventBatch) -> Result<(LossBreakdown, Vec<Tensor<S>>)> {
        let e = self.evaluate(params, batch)?;
        Ok((e.breakdown, e.grads))
    }
}

impl<'m, B: Backbone> EpisodeObjective for EventObjective<'m, B> {
    fn few_shot_task(&self, theta: &ParameterSet, task: &Task) -> Result<MetaTask<EventBatch>> {
        if task.support.is_empty() {
            return Err(Error::Contract("few-shot task has an empty support set".into()));
        }
        let mut query = self.batch_of(task, &task.query)?;
        Ok(MetaTask {
            init: self.model.with_head(theta, task.n_way()),
            support: self.batch_of(task, &task.support)?,
            query: query.swap_remove(0),
            query_head: None,
            task_id: task.task_id,
        })
    }

    fn zero_shot_task(&self, theta: &ParameterSet, support: &Task, query: &Task) -> Result<MetaTask<EventBatch>> {
        if support.support.is_empty() || query.query.is_empty() {
            return Err(Error::Contract("zero-shot pair needs support and query examples".into()));
        }
        let mut q = self.batch_of(query, &query.query)?;
        Ok(MetaTask {
            init: self.model.with_head(theta, support.n_way()),
            support: self.batch_of(support, &support.support)?,
            query: q.swap_remove(0),
            query_head: Some(self.model.fresh_head(query.n_way())),
            task_id: support.task_id ^ query.task_id.rotate_left(1),
        })
    }
}
