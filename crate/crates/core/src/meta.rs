//! Few-shot adaptation for new phones: per-phone meta-tasks, first-order MAML
//! meta-training, support-set fine-tuning, and the pre-training and
//! direct-training baselines.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, PhoneDataset, Sample};
use crate::error::{Error, Result};
use crate::estimator::{
    estimator_network, init_params, mae_encoded, mean_nll_grad, train_samples, EncodedSet,
    TrainConfig,
};
use crate::nn::{sgd_step_in_place, GradientVector, OptimizerKind, OptimizerState, ParamVector};
use crate::rng::{derive, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub phone_id: String,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

/// A task with its inputs already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTask {
    pub support: EncodedSet,
    pub query: EncodedSet,
}

impl EncodedTask {
    pub fn new(task: &Task, norm: &NormStats) -> Self {
        Self {
            support: EncodedSet::new(&task.support, norm),
            query: EncodedSet::new(&task.query, norm),
        }
    }
}

pub fn encode_tasks(tasks: &[Task], norm: &NormStats) -> Vec<EncodedTask> {
    tasks.iter().map(|t| EncodedTask::new(t, norm)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Task-level (inner) learning rate.
    pub alpha: f64,
    /// Meta learning rate.
    pub beta: f64,
    /// Tasks per meta batch.
    pub task_batch: usize,
    /// Inner steps during meta-training.
    pub s1: usize,
    /// Fine-tuning steps at validation and deployment.
    pub s2: usize,
    pub meta_optimizer: OptimizerKind,
    pub k_spt: usize,
    pub k_qry: usize,
    pub max_epochs: usize,
    /// Epochs without meta-validation improvement before stopping.
    pub patience: usize,
    /// Global L2 bound on each inner-loop gradient, if any.
    pub inner_clip: Option<f64>,
    /// Reserved: differentiating through the inner loop is not implemented.
    pub second_order: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-2,
            task_batch: 100,
            s1: 5,
            s2: 20,
            meta_optimizer: OptimizerKind::Adam,
            k_spt: 5,
            k_qry: 15,
            max_epochs: 200,
            patience: 20,
            inner_clip: Some(20.0),
            second_order: false,
            seed: 0,
        }
    }
}

impl MetaConfig {
    /// Inner loop used during meta-training.
    pub fn inner(&self) -> Adaptation {
        Adaptation {
            alpha: self.alpha,
            steps: self.s1,
            clip: self.inner_clip,
        }
    }

    /// Fine-tuning used for validation and deployment.
    pub fn fine_tune(&self) -> Adaptation {
        Adaptation {
            alpha: self.alpha,
            steps: self.s2,
            clip: self.inner_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::contract("alpha and beta must be > 0"));
        }
        if self.task_batch == 0 || self.k_spt == 0 || self.k_qry == 0 {
            return Err(Error::contract("task batch, k_spt and k_qry must be >= 1"));
        }
        if self.inner_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::contract("inner gradient clip must be > 0"));
        }
        if self.second_order {
            return Err(Error::contract(
                "second-order meta-gradients are not implemented",
            ));
        }
        Ok(())
    }
}

/// `n_tasks` tasks, each from one uniformly chosen phone; the first `k_spt`
/// drawn rows form the support set, the remaining `k_qry` the query set.
pub fn build_task_set(
    datasets: &[PhoneDataset],
    k_spt: usize,
    k_qry: usize,
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<Task>> {
    if datasets.is_empty() {
        return Err(Error::contract("no phones to build tasks from"));
    }
    let need = k_spt + k_qry;
    if let Some(d) = datasets.iter().find(|d| d.len() < need) {
        return Err(Error::contract(format!(
            "phone `{}` has {} samples, tasks need {need}",
            d.phone_id,
            d.len()
        )));
    }
    let mut r = rng(seed);
    Ok((0..n_tasks)
        .map(|_| {
            let d = datasets.choose(&mut r).expect("non-empty");
            let rows: Vec<Sample> = d.samples.choose_multiple(&mut r, need).copied().collect();
            Task {
                phone_id: d.phone_id.clone(),
                support: rows[..k_spt].to_vec(),
                query: rows[k_spt..].to_vec(),
            }
        })
        .collect())
}

/// Inner-loop settings: SGD learning rate, step count and optional gradient
/// norm bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub alpha: f64,
    pub steps: usize,
    pub clip: Option<f64>,
}

impl Adaptation {
    pub fn new(alpha: f64, steps: usize) -> Self {
        Self {
            alpha,
            steps,
            clip: None,
        }
    }
}

/// `steps` full-batch SGD steps on the support NLL from a copy of `theta`.
pub fn maml_adapt(
    theta: &ParamVector,
    support: &EncodedSet,
    alpha: f64,
    steps: usize,
) -> Result<ParamVector> {
    adapt(theta, support, &Adaptation::new(alpha, steps))
}

/// As [`maml_adapt`], rescaling any gradient whose L2 norm exceeds the clip.
pub fn adapt(theta: &ParamVector, support: &EncodedSet, how: &Adaptation) -> Result<ParamVector> {
    if support.is_empty() {
        return Err(Error::contract("empty support set"));
    }
    let mut p = theta.clone();
    for _ in 0..how.steps {
        let (_, mut g) = mean_nll_grad(&p, support, None)?;
        if let Some(c) = how.clip {
            let norm = g.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > c {
                g.scale(c / norm);
            }
        }
        sgd_step_in_place(&mut p, &g, how.alpha)?;
    }
    Ok(p)
}

/// Query-set NLL gradient at the adapted parameters, taken as the task's
/// first-order meta-gradient.
pub fn task_meta_gradient(
    theta: &ParamVector,
    task: &EncodedTask,
    inner: &Adaptation,
) -> Result<(f64, GradientVector)> {
    let adapted = adapt(theta, &task.support, inner)?;
    mean_nll_grad(&adapted, &task.query, None)
}

/// Sum of first-order meta-gradients over `tasks`, in order. `theta` is only
/// read.
pub fn meta_batch_gradient(
    theta: &ParamVector,
    tasks: &[&EncodedTask],
    inner: &Adaptation,
) -> Result<GradientVector> {
    let mut sum = GradientVector::zeros(theta.layout().clone());
    for t in tasks {
        let (_, g) = task_meta_gradient(theta, t, inner)?;
        sum.accumulate(&g)?;
    }
    Ok(sum)
}

/// Mean query MAE over tasks after `s2` fine-tuning steps on each support set.
pub fn meta_validate(
    theta: &ParamVector,
    tasks: &[EncodedTask],
    alpha: f64,
    s2: usize,
) -> Result<f64> {
    meta_validate_with(theta, tasks, &Adaptation::new(alpha, s2))
}

pub fn meta_validate_with(
    theta: &ParamVector,
    tasks: &[EncodedTask],
    how: &Adaptation,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::contract("no validation tasks"));
    }
    let mut total = 0.0;
    for t in tasks {
        let adapted = adapt(theta, &t.support, how)?;
        total += mae_encoded(&adapted, &t.query)?;
    }
    Ok(total / tasks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaEpoch {
    pub epoch: usize,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetaTrace {
    pub records: Vec<MetaEpoch>,
    pub best_epoch: usize,
}

/// Applies one meta step with the summed gradient.
pub fn meta_step(
    theta: &mut ParamVector,
    opt: &mut OptimizerState,
    summed: &GradientVector,
) -> Result<()> {
    opt.step(theta, summed)?;
    if !theta.is_finite() {
        return Err(Error::Training(
            "meta update produced non-finite parameters".into(),
        ));
    }
    Ok(())
}

/// First-order MAML. Each epoch shuffles the tasks and walks them in batches
/// of `task_batch`, applying one meta step per batch. With validation tasks,
/// the parameters with the best meta-validation MAE are returned and training
/// stops after `patience` epochs without improvement; without them, all
/// `max_epochs` run and the final parameters are returned.
pub fn maml_train(
    tasks: &[EncodedTask],
    init: &ParamVector,
    config: &MetaConfig,
    validation: Option<&[EncodedTask]>,
) -> Result<(ParamVector, MetaTrace)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::contract("no training tasks"));
    }
    let mut theta = init.clone();
    let mut opt = OptimizerState::new(config.meta_optimizer, config.beta, theta.len());
    let mut trace = MetaTrace::default();
    let mut best = theta.clone();
    let mut best_val = f64::INFINITY;
    if let Some(v) = validation {
        best_val = meta_validate_with(&theta, v, &config.fine_tune())?;
        trace.records.push(MetaEpoch {
            epoch: 0,
            val_mae: best_val,
        });
    }
    let mut shuffle_rng = rng(derive(config.seed, 0));
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        if validation.is_some() && since_best >= config.patience {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.task_batch) {
            let refs: Vec<&EncodedTask> = batch.iter().map(|&i| &tasks[i]).collect();
            let g = meta_batch_gradient(&theta, &refs, &config.inner())?;
            meta_step(&mut theta, &mut opt, &g)?;
        }
        if let Some(v) = validation {
            let val_mae = meta_validate_with(&theta, v, &config.fine_tune())?;
            trace.records.push(MetaEpoch { epoch, val_mae });
            if val_mae < best_val {
                best_val = val_mae;
                best = theta.clone();
                trace.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
    }
    if validation.is_none() {
        trace.best_epoch = config.max_epochs;
        best = theta;
    }
    Ok((best, trace))
}

/// Pre-training baseline: ordinary estimator training on the pooled
/// contributor data.
pub fn pretrain_baseline(
    contributors: &[PhoneDataset],
    norm: &NormStats,
    config: &TrainConfig,
) -> Result<ParamVector> {
    let pooled: Vec<Sample> = contributors
        .iter()
        .flat_map(|d| d.samples.iter().copied())
        .collect();
    Ok(train_samples(&pooled, norm, None, config)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 200,
            seed: 0,
        }
    }
}

/// Direct-training baseline: fresh seeded parameters, full-batch Adam on the
/// few available samples.
pub fn direct_train_baseline(
    samples: &[Sample],
    norm: &NormStats,
    config: &DirectConfig,
) -> Result<ParamVector> {
    if samples.is_empty() {
        return Err(Error::contract("direct training needs at least one sample"));
    }
    let set = EncodedSet::new(samples, norm);
    let mut p = init_params(&set.targets, config.seed);
    let mut opt = OptimizerState::new(OptimizerKind::Adam, config.lr, p.len());
    for _ in 0..config.steps {
        let (_, g) = mean_nll_grad(&p, &set, None)?;
        opt.step(&mut p, &g)?;
    }
    Ok(p)
}

pub fn fresh_theta(seed: u64) -> ParamVector {
    estimator_network().init_params(&mut rng(seed))
}
