//! Inner-loop adaptation with per-group, per-step learning rates and the
//! outer-loop meta-gradient, exact (through every inner step, using
//! Hessian-vector products) or first-order.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::data::{sample_disjoint_pair, sample_task, EpisodeSpec, LabelPool, Task};
use crate::encoder::VERBALIZER_GROUP;
use crate::error::{Error, Result};
use crate::objective::LossBreakdown;
use crate::parallel::Execution;
use crate::params::ParameterSet;
use crate::tensor::{Scalar, Tensor};

/// Lower bound enforced on every learned inner learning rate.
pub const ALPHA_MIN: f64 = 1e-8;

/// A differentiable loss over a parameter set.
pub trait Objective: Sync {
    type Batch: Send + Sync;

    /// Loss and gradient at `params`, generic so that dual numbers give
    /// Hessian-vector products.
    fn gradient<S: Scalar>(&self, params: &[Tensor<S>], batch: &Self::Batch) -> Result<(LossBreakdown, Vec<Tensor<S>>)>;

    fn value_and_grad(&self, params: &ParameterSet, batch: &Self::Batch) -> Result<(LossBreakdown, ParameterSet)> {
        let (loss, grads) = self.gradient(&params.lift::<f64>(), batch)?;
        Ok((loss, params.with_tensors(grads)))
    }

    /// `∇²L(params) · direction`, exact (forward-over-reverse).
    fn hvp(&self, params: &ParameterSet, batch: &Self::Batch, direction: &ParameterSet) -> Result<ParameterSet> {
        let (_, grads) = self.gradient(&params.lift_dual(direction), batch)?;
        let tangents = grads
            .into_iter()
            .map(|t| Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|d| d.du).collect()))
            .collect();
        Ok(params.with_tensors(tangents))
    }
}

/// One meta-training task in objective terms.
#[derive(Clone, Debug)]
pub struct MetaTask<B> {
    /// Starting point of adaptation: θ plus any fresh task-specific tensors.
    pub init: ParameterSet,
    /// Inner-loop batches, cycled over the inner steps.
    pub support: Vec<B>,
    pub query: B,
    /// Replaces same-named tensors of φ before the query is evaluated (a
    /// fresh head for a query whose labels differ from the support's). No
    /// gradient flows back through replaced tensors.
    pub query_head: Option<ParameterSet>,
    pub task_id: u64,
}

/// Objectives that can turn sampled episodes into meta tasks.
pub trait EpisodeObjective: Objective {
    fn few_shot_task(&self, theta: &ParameterSet, task: &Task) -> Result<MetaTask<Self::Batch>>;
    fn zero_shot_task(&self, theta: &ParameterSet, support: &Task, query: &Task) -> Result<MetaTask<Self::Batch>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveLRSchedule {
    pub groups: Vec<String>,
    /// `alpha[group][step]`
    pub alpha: Vec<Vec<f64>>,
    pub learnable: bool,
}

impl AdaptiveLRSchedule {
    /// `base` everywhere except the verbalizer group, which starts at
    /// `base · head_multiplier`.
    pub fn new(groups: &[String], steps: usize, base: f64, head_multiplier: f64, learnable: bool) -> Self {
        let alpha = groups
            .iter()
            .map(|g| {
                let a = if g == VERBALIZER_GROUP { base * head_multiplier } else { base };
                vec![a; steps]
            })
            .collect();
        Self {
            groups: groups.to_vec(),
            alpha,
            learnable,
        }
    }

    pub fn uniform(groups: &[String], steps: usize, value: f64) -> Self {
        Self::new(groups, steps, value, 1.0, false)
    }

    pub fn num_steps(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    fn group_index(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == group)
    }

    pub fn rate(&self, group: &str, step: usize) -> Option<f64> {
        self.group_index(group).and_then(|g| self.alpha[g].get(step).copied())
    }

    fn check_covers(&self, params: &ParameterSet, steps: usize) -> Result<()> {
        if steps > self.num_steps() {
            return Err(Error::Contract(format!(
                "{steps} inner steps requested, schedule has {}",
                self.num_steps()
            )));
        }
        for g in params.groups() {
            if self.group_index(&g).is_none() {
                return Err(Error::Contract(format!("no learning rates for parameter group {g}")));
            }
        }
        Ok(())
    }

    /// Clamps every rate to at least [`ALPHA_MIN`].
    pub fn project(&mut self) {
        for row in &mut self.alpha {
            for a in row {
                *a = a.max(ALPHA_MIN);
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.alpha.concat()
    }

    fn set_flat(&mut self, values: &[f64]) {
        let s = self.num_steps();
        for (row, chunk) in self.alpha.iter_mut().zip(values.chunks(s)) {
            row.copy_from_slice(chunk);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduler {
    #[default]
    None,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub tasks_per_meta_batch: usize,
    pub meta_lr: f64,
    pub inner_lr: f64,
    pub verbalizer_lr_multiplier: f64,
    pub alpha_lr: f64,
    pub learn_alpha: bool,
    pub second_order: bool,
    pub weight_decay: f64,
    pub scheduler: LrScheduler,
    pub total_iterations: usize,
    pub validate_every: usize,
    pub inner_batch_cap: usize,
    pub execution: Execution,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 50,
            tasks_per_meta_batch: 2,
            meta_lr: 1e-5,
            inner_lr: 1e-3,
            verbalizer_lr_multiplier: 10.0,
            alpha_lr: 1e-4,
            learn_alpha: true,
            second_order: false,
            weight_decay: 0.0,
            scheduler: LrScheduler::None,
            total_iterations: 250,
            validate_every: 25,
            inner_batch_cap: 50,
            execution: Execution::Parallel,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("meta: {m}")));
        if self.inner_steps == 0 {
            return fail("inner_steps must be at least 1");
        }
        if self.tasks_per_meta_batch == 0 {
            return fail("tasks_per_meta_batch must be at least 1");
        }
        if self.inner_batch_cap == 0 || self.validate_every == 0 {
            return fail("inner_batch_cap and validate_every must be positive");
        }
        for (name, v) in [
            ("meta_lr", self.meta_lr),
            ("inner_lr", self.inner_lr),
            ("alpha_lr", self.alpha_lr),
            ("verbalizer_lr_multiplier", self.verbalizer_lr_multiplier),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn schedule_for(&self, layout: &ParameterSet) -> AdaptiveLRSchedule {
        AdaptiveLRSchedule::new(
            &layout.groups(),
            self.inner_steps,
            self.inner_lr,
            self.verbalizer_lr_multiplier,
            self.learn_alpha,
        )
    }

    /// Meta learning rate at `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.scheduler {
            LrScheduler::None => self.meta_lr,
            LrScheduler::Cosine => {
                let t = (iteration as f64 / self.total_iterations.max(1) as f64).min(1.0);
                0.5 * self.meta_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam: gradient length mismatch");
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }

    pub fn step_set(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        assert!(params.same_layout(grads), "adam: layout mismatch");
        let mut flat: Vec<f64> = params.entries().iter().flat_map(|e| e.tensor.data.iter().copied()).collect();
        let g: Vec<f64> = grads.entries().iter().flat_map(|e| e.tensor.data.iter().copied()).collect();
        self.step(&mut flat, &g, lr);
        let mut off = 0;
        for e in params.entries_mut() {
            let n = e.tensor.len();
            e.tensor.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Recorded inner step: the point the gradient was taken at and the gradient.
#[derive(Clone, Debug)]
pub struct InnerStep {
    pub params: ParameterSet,
    pub grad: ParameterSet,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct Adapted {
    pub phi: ParameterSet,
    pub losses: Vec<LossBreakdown>,
    /// Kept only when graph tracking was requested.
    pub trajectory: Vec<InnerStep>,
}

/// `steps` gradient-descent updates from `theta`, step `s` using
/// `alpha[group][s]` for each parameter group and the support batch
/// `s mod support.len()`. `theta` is never modified.
pub fn inner_adapt<O: Objective>(
    objective: &O,
    theta: &ParameterSet,
    support: &[O::Batch],
    schedule: &AdaptiveLRSchedule,
    steps: usize,
    track_graph: bool,
) -> Result<Adapted> {
    if support.is_empty() {
        return Err(Error::Contract("inner adaptation needs a nonempty support set".into()));
    }
    schedule.check_covers(theta, steps)?;
    let mut phi = theta.clone();
    let mut losses = Vec::with_capacity(steps);
    let mut trajectory = Vec::new();
    for s in 0..steps {
        let batch = s % support.len();
        let (loss, grad) = objective.value_and_grad(&phi, &support[batch])?;
        losses.push(loss);
        let step = grad.scale_groups(|g| schedule.rate(g, s).expect("checked above"));
        let next = {
            let mut p = phi.clone();
            p.axpy(-1.0, &step);
            p
        };
        if track_graph {
            trajectory.push(InnerStep {
                params: std::mem::replace(&mut phi, next),
                grad,
                batch,
            });
        } else {
            phi = next;
        }
    }
    Ok(Adapted { phi, losses, trajectory })
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    /// Gradient with respect to the task's starting point (`init` layout).
    pub theta: ParameterSet,
    /// `d L_query / d alpha[group][step]`, second-order with a learnable schedule only.
    pub alpha: Option<Vec<Vec<f64>>>,
    pub query: LossBreakdown,
    pub support_losses: Vec<LossBreakdown>,
}

/// Gradient of the query loss after `config.inner_steps` adaptation steps.
pub fn meta_gradient<O: Objective>(
    objective: &O,
    task: &MetaTask<O::Batch>,
    schedule: &AdaptiveLRSchedule,
    config: &MetaConfig,
) -> Result<MetaGradient> {
    let steps = config.inner_steps;
    let adapted = if steps == 0 {
        Adapted {
            phi: task.init.clone(),
            losses: Vec::new(),
            trajectory: Vec::new(),
        }
    } else {
        inner_adapt(objective, &task.init, &task.support, schedule, steps, config.second_order)?
    };
    let query_params = match &task.query_head {
        Some(head) => adapted.phi.merged(head),
        None => adapted.phi.clone(),
    };
    let (query, gq) = objective.value_and_grad(&query_params, &task.query)?;
    let mut adjoint = adapted.phi.zeros_like();
    for e in adjoint.entries_mut() {
        let replaced = task.query_head.as_ref().is_some_and(|h| h.index_of(&e.name).is_some());
        if !replaced {
            e.tensor = gq.get(&e.name).expect("query params extend phi").clone();
        }
    }

    let mut alpha = None;
    if config.second_order && steps > 0 {
        let mut ga = schedule.learnable.then(|| vec![vec![0.0; schedule.num_steps()]; schedule.groups.len()]);
        for (s, rec) in adapted.trajectory.iter().enumerate().rev() {
            if let Some(ga) = ga.as_mut() {
                for (e, a) in rec.grad.entries().iter().zip(adjoint.entries()) {
                    let gi = schedule.group_index(&e.group).expect("checked by inner_adapt");
                    ga[gi][s] -= e.tensor.data.iter().zip(&a.tensor.data).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            let dir = adjoint.scale_groups(|g| schedule.rate(g, s).expect("checked by inner_adapt"));
            let hv = objective.hvp(&rec.params, &task.support[rec.batch], &dir)?;
            adjoint.axpy(-1.0, &hv);
        }
        alpha = ga;
    }
    Ok(MetaGradient {
        theta: adjoint,
        alpha,
        query,
        support_losses: adapted.losses,
    })
}

/// Meta-learned state: θ, the inner learning rates and both optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub theta: ParameterSet,
    pub schedule: AdaptiveLRSchedule,
    pub theta_opt: Adam,
    pub alpha_opt: Adam,
    pub iteration: usize,
    pub skipped_steps: usize,
}

impl MetaState {
    pub fn new(theta: ParameterSet, schedule: AdaptiveLRSchedule, config: &MetaConfig) -> Self {
        Self {
            theta,
            schedule,
            theta_opt: Adam::new(config.weight_decay),
            alpha_opt: Adam::new(0.0),
            iteration: 0,
            skipped_steps: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepOutcome {
    pub iteration: usize,
    pub task_losses: Vec<LossBreakdown>,
    pub task_ids: Vec<u64>,
    pub grad_norm: f64,
    pub lr: f64,
    /// The averaged gradient was not finite and no update was applied.
    pub skipped: bool,
}

/// Averages per-task meta-gradients and applies one optimizer update to θ
/// (and to the learning rates when they are meta-learned).
pub fn meta_step<O: Objective>(
    objective: &O,
    state: &mut MetaState,
    tasks: &[MetaTask<O::Batch>],
    config: &MetaConfig,
) -> Result<StepOutcome> {
    if tasks.is_empty() {
        return Err(Error::Contract("meta step needs at least one task".into()));
    }
    let grads: Vec<Result<MetaGradient>> =
        config.execution.map(tasks, |t| meta_gradient(objective, t, &state.schedule, config));
    let grads: Vec<MetaGradient> = grads.into_iter().collect::<Result<_>>()?;

    let inv = 1.0 / tasks.len() as f64;
    let mut avg = state.theta.zeros_like();
    for g in &grads {
        avg.axpy(inv, &g.theta.restrict_to(&state.theta)?);
    }
    let learn_alpha = config.second_order && config.learn_alpha && state.schedule.learnable;
    let alpha_avg: Option<Vec<f64>> = learn_alpha.then(|| {
        let mut acc = vec![0.0; state.schedule.flat().len()];
        for g in &grads {
            if let Some(a) = &g.alpha {
                for (x, y) in acc.iter_mut().zip(a.concat()) {
                    *x += inv * y;
                }
            }
        }
        acc
    });

    let lr = config.lr_at(state.iteration);
    let mut outcome = StepOutcome {
        iteration: state.iteration,
        task_losses: grads.iter().map(|g| g.query).collect(),
        task_ids: tasks.iter().map(|t| t.task_id).collect(),
        grad_norm: avg.norm(),
        lr,
        skipped: false,
    };
    let alpha_finite = alpha_avg.as_ref().is_none_or(|a| a.iter().all(|x| x.is_finite()));
    if !avg.is_finite() || !alpha_finite {
        log::warn!("non-finite meta-gradient at iteration {}; update skipped", state.iteration);
        state.skipped_steps += 1;
        state.iteration += 1;
        outcome.skipped = true;
        return Ok(outcome);
    }
    if lr != 0.0 {
        state.theta_opt.step_set(&mut state.theta, &avg, lr);
    }
    if let Some(ga) = alpha_avg {
        let mut flat = state.schedule.flat();
        state.alpha_opt.step(&mut flat, &ga, config.alpha_lr);
        state.schedule.set_flat(&flat);
        state.schedule.project();
    }
    state.iteration += 1;
    Ok(outcome)
}

/// One few-shot meta iteration over freshly sampled tasks.
pub fn few_shot_meta_step<O: EpisodeObjective>(
    objective: &O,
    state: &mut MetaState,
    pool: &LabelPool,
    spec: &EpisodeSpec,
    config: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let tasks = (0..config.tasks_per_meta_batch)
        .map(|_| {
            let t = sample_task(pool, spec, rng)?;
            objective.few_shot_task(&state.theta, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    meta_step(objective, state, &tasks, config)
}

/// Label sets of one zero-shot training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLabels {
    pub support: BTreeSet<usize>,
    pub query: BTreeSet<usize>,
}

/// One zero-shot meta iteration: each task adapts on a support task whose
/// labels are disjoint from its query task, and the query is scored with a
/// fresh head.
pub fn zero_shot_meta_step<O: EpisodeObjective>(
    objective: &O,
    state: &mut MetaState,
    pool: &LabelPool,
    spec: &EpisodeSpec,
    config: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(StepOutcome, Vec<PairLabels>)> {
    let mut labels = Vec::new();
    let tasks = (0..config.tasks_per_meta_batch)
        .map(|_| {
            let (s, q) = sample_disjoint_pair(pool, spec, rng)?;
            labels.push(PairLabels {
                support: s.labels(),
                query: q.labels(),
            });
            objective.zero_shot_task(&state.theta, &s, &q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((meta_step(objective, state, &tasks, config)?, labels))
}

/// Small analytic objectives for checking the meta-gradient machinery.
pub mod toy {
    use super::*;
    use crate::graph::Graph;

    /// Scalar parameters `theta.i`, each in its own group `layer.i`.
    pub fn scalar_params(values: &[f64]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (i, &v) in values.iter().enumerate() {
            p.push(format!("theta.{i}"), format!("layer.{i}"), Tensor::scalar(v));
        }
        p
    }

    #[derive(Clone, Debug)]
    pub enum ToyBatch {
        /// `Σ (θ_i − target)²`
        Quadratic { target: f64 },
        /// `slope · Σ θ_i`
        Linear { slope: f64 },
    }

    /// Separable losses over scalar parameters.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct Separable;

    impl Objective for Separable {
        type Batch = ToyBatch;

        fn gradient<S: Scalar>(&self, params: &[Tensor<S>], batch: &ToyBatch) -> Result<(LossBreakdown, Vec<Tensor<S>>)> {
            let grads = params
                .iter()
                .map(|t| {
                    t.map(|x| match *batch {
                        ToyBatch::Quadratic { target } => (x - S::from_f64(target)).scale(2.0),
                        ToyBatch::Linear { slope } => S::from_f64(slope),
                    })
                })
                .collect();
            let mut loss = 0.0;
            for t in params {
                for &x in &t.data {
                    loss += match *batch {
                        ToyBatch::Quadratic { target } => (x.value() - target).powi(2),
                        ToyBatch::Linear { slope } => slope * x.value(),
                    };
                }
            }
            Ok((LossBreakdown::scalar(loss), grads))
        }
    }

    /// `f(x) = w₂ · tanh(w₁ · x)` with mean squared error; parameters are
    /// `theta.0 = w₁` and `theta.1 = w₂`.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct TanhNet;

    impl Objective for TanhNet {
        type Batch = Vec<(f64, f64)>;

        fn gradient<S: Scalar>(&self, params: &[Tensor<S>], batch: &Self::Batch) -> Result<(LossBreakdown, Vec<Tensor<S>>)> {
            if params.len() != 2 || batch.is_empty() {
                return Err(Error::Contract("tanh net takes two scalars and a nonempty batch".into()));
            }
            let n = batch.len();
            let mut g = Graph::new(params);
            let x = g.input(Tensor::from_vec(n, 1, batch.iter().map(|p| S::from_f64(p.0)).collect()));
            let neg_y = g.input(Tensor::from_vec(n, 1, batch.iter().map(|p| S::from_f64(-p.1)).collect()));
            let (w1, w2) = (g.param(0), g.param(1));
            let h = g.matmul(x, w1);
            let h = g.tanh(h);
            let out = g.matmul(h, w2);
            let r = g.add(out, neg_y);
            let sq = g.mul(r, r);
            let loss = g.mean(sq);
            let mut grads: Vec<Tensor<S>> = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
            g.backward(&[(loss, Tensor::scalar(S::one()))], &mut grads);
            Ok((LossBreakdown::scalar(g.value(loss).data[0].value()), grads))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn cfg(steps: usize, second_order: bool) -> MetaConfig {
        MetaConfig {
            inner_steps: steps,
            second_order,
            execution: Execution::Sequential,
            ..MetaConfig::default()
        }
    }

    fn quad_task(theta: f64) -> MetaTask<ToyBatch> {
        MetaTask {
            init: scalar_params(&[theta]),
            support: vec![ToyBatch::Quadratic { target: 0.0 }],
            query: ToyBatch::Quadratic { target: 1.0 },
            query_head: None,
            task_id: 0,
        }
    }

    fn value(p: &ParameterSet) -> f64 {
        p.tensor(0).data[0]
    }

    #[test]
    fn inner_adapt_worked_examples() {
        let theta = scalar_params(&[1.0]);
        let support = [ToyBatch::Quadratic { target: 0.0 }];
        let sched = AdaptiveLRSchedule::uniform(&theta.groups(), 2, 0.1);
        let one = inner_adapt(&Separable, &theta, &support, &sched, 1, false).unwrap();
        assert!((value(&one.phi) - 0.8).abs() < 1e-15);
        let two = inner_adapt(&Separable, &theta, &support, &sched, 2, true).unwrap();
        assert!((value(&two.phi) - 0.64).abs() < 1e-15);
        let zero = AdaptiveLRSchedule::uniform(&theta.groups(), 2, 0.0);
        assert_eq!(inner_adapt(&Separable, &theta, &support, &zero, 2, false).unwrap().phi, theta);
        assert!(inner_adapt(&Separable, &theta, &[], &sched, 1, false).is_err());
        assert!(inner_adapt(&Separable, &theta, &support, &sched, 3, false).is_err());
    }

    #[test]
    fn toy_meta_gradients() {
        let sched = AdaptiveLRSchedule::uniform(&scalar_params(&[0.0]).groups(), 1, 0.1);
        let so = meta_gradient(&Separable, &quad_task(1.0), &sched, &cfg(1, true)).unwrap();
        let fo = meta_gradient(&Separable, &quad_task(1.0), &sched, &cfg(1, false)).unwrap();
        assert!((value(&so.theta) + 0.32).abs() < 1e-12);
        assert!((value(&fo.theta) + 0.4).abs() < 1e-12);

        // composite objective by central differences
        let composite = |t: f64| {
            let phi = t - 0.1 * 2.0 * t;
            (phi - 1.0) * (phi - 1.0)
        };
        let eps = 1e-5;
        let fd = (composite(1.0 + eps) - composite(1.0 - eps)) / (2.0 * eps);
        assert!((fd - value(&so.theta)).abs() < 1e-8);
    }

    #[test]
    fn zero_steps_and_linear_losses_collapse_the_modes() {
        let sched = AdaptiveLRSchedule::uniform(&scalar_params(&[0.0]).groups(), 3, 0.1);
        let so = meta_gradient(&Separable, &quad_task(0.3), &sched, &cfg(0, true)).unwrap();
        let fo = meta_gradient(&Separable, &quad_task(0.3), &sched, &cfg(0, false)).unwrap();
        assert_eq!(so.theta, fo.theta);
        assert!((value(&so.theta) - 2.0 * (0.3 - 1.0)).abs() < 1e-15);

        let lin = MetaTask {
            support: vec![ToyBatch::Linear { slope: 0.7 }],
            ..quad_task(0.3)
        };
        let so = meta_gradient(&Separable, &lin, &sched, &cfg(3, true)).unwrap();
        let fo = meta_gradient(&Separable, &lin, &sched, &cfg(3, false)).unwrap();
        assert_eq!(so.theta, fo.theta);
    }

    #[test]
    fn first_order_gradient_is_the_query_gradient_at_phi() {
        let sched = AdaptiveLRSchedule::uniform(&scalar_params(&[0.0, 0.0]).groups(), 2, 0.05);
        let task = MetaTask {
            init: scalar_params(&[0.4, -0.2]),
            support: vec![vec![(0.5, 0.2), (-1.0, 0.3)]],
            query: vec![(0.1, -0.4), (1.5, 0.9)],
            query_head: None,
            task_id: 1,
        };
        let fo = meta_gradient(&TanhNet, &task, &sched, &cfg(2, false)).unwrap();
        let phi = inner_adapt(&TanhNet, &task.init, &task.support, &sched, 2, false).unwrap().phi;
        let (_, direct) = TanhNet.value_and_grad(&phi, &task.query).unwrap();
        assert_eq!(fo.theta, direct);
    }

    #[test]
    fn tracking_does_not_change_values_or_theta() {
        let sched = AdaptiveLRSchedule::uniform(&scalar_params(&[0.0, 0.0]).groups(), 4, 0.3);
        let theta = scalar_params(&[0.9, -1.3]);
        let before = theta.checksum();
        let batch = vec![vec![(0.5, 0.2), (-1.0, 0.3), (2.0, -0.5)]];
        let a = inner_adapt(&TanhNet, &theta, &batch, &sched, 4, false).unwrap();
        let b = inner_adapt(&TanhNet, &theta, &batch, &sched, 4, true).unwrap();
        assert_eq!(theta.checksum(), before);
        for (x, y) in a.phi.entries().iter().zip(b.phi.entries()) {
            assert!((x.tensor.data[0] - y.tensor.data[0]).abs() <= 1e-7);
        }
        assert_eq!(b.trajectory.len(), 4);
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let groups = scalar_params(&[0.0, 0.0]).groups();
        let mut sched = AdaptiveLRSchedule::uniform(&groups, 2, 0.2);
        sched.learnable = true;
        sched.alpha[1][0] = 0.35;
        let task = MetaTask {
            init: scalar_params(&[0.7, 0.4]),
            support: vec![vec![(0.5, 0.2), (-1.0, 0.3)], vec![(1.5, -0.1)]],
            query: vec![(0.1, -0.4), (1.5, 0.9)],
            query_head: None,
            task_id: 2,
        };
        let c = cfg(2, true);
        let mg = meta_gradient(&TanhNet, &task, &sched, &c).unwrap();
        let ga = mg.alpha.unwrap();
        let eps = 1e-6;
        #[allow(clippy::needless_range_loop)]
        for g in 0..2 {
            for s in 0..2 {
                let at = |d: f64| {
                    let mut sc = sched.clone();
                    sc.alpha[g][s] += d;
                    let phi = inner_adapt(&TanhNet, &task.init, &task.support, &sc, 2, false).unwrap().phi;
                    TanhNet.value_and_grad(&phi, &task.query).unwrap().0.total
                };
                let fd = (at(eps) - at(-eps)) / (2.0 * eps);
                assert!((fd - ga[g][s]).abs() <= 1e-6 * fd.abs().max(1e-3), "alpha[{g}][{s}]: {fd} vs {}", ga[g][s]);
            }
        }
    }

    #[test]
    fn meta_step_contracts() {
        let theta = scalar_params(&[1.0]);
        let sched = AdaptiveLRSchedule::new(&theta.groups(), 1, 0.1, 10.0, true);
        let mut c = cfg(1, true);
        c.tasks_per_meta_batch = 2;

        // identical tasks average to either one
        let g = meta_gradient(&Separable, &quad_task(1.0), &sched, &c).unwrap();
        let mut state = MetaState::new(theta.clone(), sched.clone(), &c);
        let out = meta_step(&Separable, &mut state, &[quad_task(1.0), quad_task(1.0)], &c).unwrap();
        assert!((out.grad_norm - g.theta.norm()).abs() < 1e-15);

        let mut frozen = MetaState::new(theta.clone(), sched.clone(), &MetaConfig { meta_lr: 0.0, ..c.clone() });
        meta_step(&Separable, &mut frozen, &[quad_task(1.0)], &MetaConfig { meta_lr: 0.0, ..c.clone() }).unwrap();
        assert_eq!(frozen.theta, theta);

        // huge alpha steps drive rates below zero without projection
        let mut wild = MetaState::new(theta.clone(), sched, &MetaConfig { alpha_lr: 10.0, ..c.clone() });
        for _ in 0..20 {
            meta_step(&Separable, &mut wild, &[quad_task(1.0)], &MetaConfig { alpha_lr: 10.0, ..c.clone() }).unwrap();
            assert!(wild.schedule.flat().iter().all(|&a| a >= ALPHA_MIN));
        }
    }

    #[test]
    fn non_finite_gradients_skip_the_update() {
        let theta = scalar_params(&[1.0]);
        let sched = AdaptiveLRSchedule::uniform(&theta.groups(), 1, 0.1);
        let c = cfg(1, false);
        let mut state = MetaState::new(theta.clone(), sched, &c);
        let task = MetaTask {
            query: ToyBatch::Linear { slope: f64::NAN },
            ..quad_task(1.0)
        };
        let out = meta_step(&Separable, &mut state, &[task], &c).unwrap();
        assert!(out.skipped);
        assert_eq!(state.theta, theta);
        assert_eq!(state.skipped_steps, 1);
    }

    #[test]
    fn second_order_matches_finite_differences_on_tanh_net() {
        for seed in 0..5 {
            let mut rng = seeded_rng(seed, &[]);
            let pts = |rng: &mut ChaCha8Rng, n| -> Vec<(f64, f64)> {
                (0..n).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0))).collect()
            };
            let init = scalar_params(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let task = MetaTask {
                init: init.clone(),
                support: vec![pts(&mut rng, 4)],
                query: pts(&mut rng, 4),
                query_head: None,
                task_id: seed,
            };
            let sched = AdaptiveLRSchedule::uniform(&init.groups(), 3, 0.1);
            let c = cfg(3, true);
            let mg = meta_gradient(&TanhNet, &task, &sched, &c).unwrap();
            for i in 0..2 {
                let at = |d: f64| {
                    let mut p = init.clone();
                    p.entries_mut()[i].tensor.data[0] += d;
                    let phi = inner_adapt(&TanhNet, &p, &task.support, &sched, 3, false).unwrap().phi;
                    TanhNet.value_and_grad(&phi, &task.query).unwrap().0.total
                };
                let eps = 1e-5;
                let fd = (at(eps) - at(-eps)) / (2.0 * eps);
                let an = mg.theta.tensor(i).data[0];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-4), "seed {seed} param {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn cosine_schedule_anneals_to_zero() {
        let c = MetaConfig {
            scheduler: LrScheduler::Cosine,
            total_iterations: 10,
            meta_lr: 1.0,
            ..MetaConfig::default()
        };
        assert_eq!(c.lr_at(0), 1.0);
        assert!((c.lr_at(5) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(10).abs() < 1e-12);
        assert_eq!(MetaConfig::default().lr_at(100), 1e-5);
    }
}
