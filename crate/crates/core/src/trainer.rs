//! Two-stage optimization: caption pre-training of the prototype extractor
//! and projector, then instruction fine-tuning with adapters.
//!
//! Data order is a pure function of `(seed, epoch)`, so a run is fully
//! described by its plan, its dataset, and the step counter.

use std::collections::BTreeMap;

use autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Stage, TurnSequence};
use crate::error::{Error, Result};
use crate::language::log_prob;
use crate::model::SqLlava;
use crate::params::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update at step `t` (1-based). Weight decay is decoupled and
/// applied before the moment update.
pub fn adamw_update(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamW,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..w.len() {
        w[i] -= lr * cfg.weight_decay * w[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Optimizer moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `ceil(warmup_ratio · total)` steps, then cosine decay to 0.
    CosineWarmup {
        warmup_ratio: f64,
    },
}

impl Schedule {
    /// Multiplier on the base rate for 0-based `step` out of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::CosineWarmup { warmup_ratio } => {
                let warm = (warmup_ratio * total as f64).ceil() as usize;
                if step < warm {
                    return (step + 1) as f64 / warm as f64;
                }
                let span = total.saturating_sub(warm).max(1);
                let progress = ((step - warm) as f64 / span as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    /// Base learning rate per trainable group.
    pub lr: BTreeMap<ParamGroup, f64>,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Stops early when set; the schedule still spans the full plan.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamW,
}

impl TrainPlan {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr: [(ParamGroup::Prototype, 2e-3), (ParamGroup::Projector, 2e-3)].into(),
            schedule: Schedule::Constant,
            batch_size: 256,
            epochs: 1,
            seed: 0,
            grad_clip: Some(1.0),
            max_steps: None,
            optimizer: AdamW::default(),
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            lr: [
                (ParamGroup::Adapter, 2e-4),
                (ParamGroup::Prototype, 2e-5),
                (ParamGroup::Projector, 2e-5),
            ]
            .into(),
            schedule: Schedule::CosineWarmup { warmup_ratio: 0.03 },
            batch_size: 128,
            epochs: 1,
            seed: 0,
            grad_clip: Some(1.0),
            max_steps: None,
            optimizer: AdamW::default(),
        }
    }

    pub fn trainable_groups(stage: Stage) -> &'static [ParamGroup] {
        match stage {
            Stage::Pretrain => &[ParamGroup::Prototype, ParamGroup::Projector],
            Stage::Finetune => &[
                ParamGroup::Adapter,
                ParamGroup::Prototype,
                ParamGroup::Projector,
            ],
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        ParamGroup::of(name).is_some_and(|g| Self::trainable_groups(self.stage).contains(&g))
    }

    pub fn validate(&self) -> Result<()> {
        let groups = Self::trainable_groups(self.stage);
        for g in groups {
            match self.lr.get(g) {
                Some(lr) if lr.is_finite() && *lr >= 0.0 => {}
                Some(lr) => {
                    return Err(Error::Config(format!(
                        "learning rate {lr} for {}",
                        g.as_str()
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "missing learning rate for trainable group `{}`",
                        g.as_str()
                    )))
                }
            }
        }
        if let Some(g) = self.lr.keys().find(|g| !groups.contains(g)) {
            return Err(Error::Config(format!(
                "group `{}` is frozen in the {:?} stage and cannot have a learning rate",
                g.as_str(),
                self.stage
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if let Schedule::CosineWarmup { warmup_ratio } = self.schedule {
            if !(0.0..=1.0).contains(&warmup_ratio) {
                return Err(Error::Config(format!(
                    "warmup_ratio {warmup_ratio} outside [0, 1]"
                )));
            }
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Length of the schedule.
    pub fn scheduled_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    /// Number of steps actually run.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.scheduled_steps(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn lr_at(&self, group: ParamGroup, step: usize, n: usize) -> f64 {
        self.lr.get(&group).copied().unwrap_or(0.0)
            * self.schedule.factor(step, self.scheduled_steps(n))
    }

    /// Sample indices for 0-based `step` over a dataset of `n` records.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        if spe == 0 {
            return Vec::new();
        }
        let order = epoch_order(self.seed, step / spe, n);
        let b = step % spe;
        order[b * self.batch_size..((b + 1) * self.batch_size).min(n)].to_vec()
    }
}

pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(b"sqllava-order");
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// A rendered record with its pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seq: TurnSequence,
    pub pixels: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSplit {
    /// Masked cross-entropy over the union mask, as computed on the tape.
    pub total: f64,
    /// Question-token share, recomputed from logits.
    pub question: f64,
    /// Answer-token share, recomputed from logits.
    pub answer: f64,
}

/// Next-token targets: position `i` predicts token `i + 1`.
pub fn shifted_targets(seq: &TurnSequence) -> (Vec<usize>, Vec<bool>) {
    let n = seq.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        targets[i] = seq.token_ids[i + 1] as usize;
        mask[i] = seq.loss_mask[i + 1];
    }
    (targets, mask)
}

/// Splits the masked negative log-likelihood into question and answer parts
/// by walking spans turn by turn; both parts share the union normalizer.
pub fn split_loss(logits: &Tensor, seq: &TurnSequence) -> Result<(f64, f64)> {
    let (_, v) = logits.dims2()?;
    let count = seq.loss_mask.iter().skip(1).filter(|m| **m).count();
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    let (mut q, mut a) = (0.0, 0.0);
    for span in &seq.spans {
        if !(span.kind.is_question() || span.kind.is_answer()) {
            continue;
        }
        for p in span.start.max(1)..span.start + span.len {
            if !seq.loss_mask[p] {
                continue;
            }
            let row = &logits.data()[(p - 1) * v..p * v];
            let nll = -log_prob(row, seq.token_ids[p] as usize);
            if span.kind.is_question() {
                q += nll;
            } else {
                a += nll;
            }
        }
    }
    Ok((q / count as f64, a / count as f64))
}

/// Forward and backward for one record. Returns the loss split and the
/// gradient of every trainable parameter (zeros when unreachable).
pub fn sample_gradients(
    model: &SqLlava,
    sample: &Sample,
) -> Result<(LossSplit, BTreeMap<String, Vec<f64>>)> {
    let seq = &sample.seq;
    let mut fw = model.forward_ctx();
    let logits = model.logits(
        &mut fw,
        &seq.token_ids,
        seq.image_span(),
        Some(&sample.pixels),
    )?;
    let (targets, mask) = shifted_targets(seq);
    let loss = fw.graph.cross_entropy(logits, &targets, &mask)?;
    let total = fw.graph.value(loss).data()[0];
    if !total.is_finite() {
        return Err(Error::Numeric {
            sample_id: seq.id.clone(),
            what: format!("loss is {total}"),
        });
    }
    let (question, answer) = split_loss(fw.graph.value(logits), seq)?;
    let mut grads = fw.graph.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, t) in model.params.iter() {
        if t.requires_grad() {
            let g = grads
                .take_by_name(name)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            out.insert(name.to_string(), g);
        }
    }
    Ok((
        LossSplit {
            total,
            question,
            answer,
        },
        out,
    ))
}

/// Union-mask loss and its split on one record, without gradients.
pub fn sample_loss(model: &SqLlava, sample: &Sample) -> Result<LossSplit> {
    let seq = &sample.seq;
    let mut fw = model.forward_ctx();
    let logits = model.logits(
        &mut fw,
        &seq.token_ids,
        seq.image_span(),
        Some(&sample.pixels),
    )?;
    let (targets, mask) = shifted_targets(seq);
    let loss = fw.graph.cross_entropy(logits, &targets, &mask)?;
    let total = fw.graph.value(loss).data()[0];
    let (question, answer) = split_loss(fw.graph.value(logits), seq)?;
    Ok(LossSplit {
        total,
        question,
        answer,
    })
}

/// Mean loss over `samples`.
pub fn evaluate(model: &SqLlava, samples: &[Sample]) -> Result<LossSplit> {
    let parts: Vec<LossSplit> = samples
        .par_iter()
        .map(|s| sample_loss(model, s))
        .collect::<Result<_>>()?;
    let n = parts.len().max(1) as f64;
    Ok(LossSplit {
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        question: parts.iter().map(|p| p.question).sum::<f64>() / n,
        answer: parts.iter().map(|p| p.answer).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_q: f64,
    pub loss_a: f64,
    pub lr: f64,
}

/// Optimizer state plus the step counter of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub plan: TrainPlan,
    pub state: OptState,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            plan,
            state: OptState::default(),
            step: 0,
        })
    }

    pub fn resume(plan: TrainPlan, state: OptState, step: usize) -> Result<Self> {
        plan.validate()?;
        Ok(Self { plan, state, step })
    }

    /// Freezes everything outside the stage's trainable groups.
    pub fn prepare(&self, model: &mut SqLlava) {
        model.params.set_trainable(|n| self.plan.is_trainable(n));
    }

    /// One optimizer update on `batch`. `n` is the dataset size used by the schedule.
    pub fn step_batch(
        &mut self,
        model: &mut SqLlava,
        batch: &[&Sample],
        n: usize,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(s) = batch.iter().find(|s| s.seq.stage != self.plan.stage) {
            return Err(Error::Pipeline(format!(
                "record `{}` was rendered for the {:?} stage, plan is {:?}",
                s.seq.id, s.seq.stage, self.plan.stage
            )));
        }
        self.prepare(model);
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut report = LossSplit::default();
        // Fan out in fixed-size chunks and reduce in sample order.
        let chunk = rayon::current_num_threads().max(1);
        for group in batch.chunks(chunk) {
            let results: Vec<_> = group
                .par_iter()
                .map(|s| sample_gradients(model, s))
                .collect::<Result<_>>()?;
            for (loss, grads) in results {
                report.total += loss.total;
                report.question += loss.question;
                report.answer += loss.answer;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in sum.values_mut() {
            g.iter_mut().for_each(|x| *x *= inv);
        }
        let norm = sum.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                sample_id: batch[0].seq.id.clone(),
                what: format!("gradient norm is {norm}"),
            });
        }
        if let Some(clip) = self.plan.grad_clip {
            if norm > clip {
                let f = clip / norm;
                sum.values_mut().flatten().for_each(|x| *x *= f);
            }
        }
        let step = self.step;
        self.state.t += 1;
        let t = self.state.t;
        for (name, g) in &sum {
            let group = ParamGroup::of(name).expect("trainable names carry a group prefix");
            let lr = self.plan.lr_at(group, step, n);
            let w = model.params.get_mut(name)?;
            let len = w.numel();
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; len]);
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; len]);
            adamw_update(w.data_mut(), g, m, v, t, lr, &self.plan.optimizer);
        }
        self.step += 1;
        let lr = self
            .plan
            .lr
            .keys()
            .map(|g| self.plan.lr_at(*g, step, n))
            .fold(0.0, f64::max);
        Ok(StepReport {
            step: self.step,
            stage: self.plan.stage,
            loss_total: report.total * inv,
            loss_q: report.question * inv,
            loss_a: report.answer * inv,
            lr,
        })
    }

    /// Runs the next scheduled step over `samples`.
    pub fn step(&mut self, model: &mut SqLlava, samples: &[Sample]) -> Result<StepReport> {
        let idx = self.plan.batch_indices(self.step, samples.len());
        let batch: Vec<&Sample> = idx.iter().map(|i| &samples[*i]).collect();
        self.step_batch(model, &batch, samples.len())
    }

    /// Trains until `until` completed steps (or the plan's end), calling
    /// `on_step` after each update.
    pub fn run(
        &mut self,
        model: &mut SqLlava,
        samples: &[Sample],
        until: Option<usize>,
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let end = self.plan.total_steps(samples.len());
        let end = until.map_or(end, |u| u.min(end));
        let mut reports = Vec::new();
        while self.step < end {
            let r = self.step(model, samples)?;
            on_step(&r)?;
            reports.push(r);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = AdamW::default();
        let mut w = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut w, &[1.0], &mut m, &mut v, 1, 0.1, &cfg);
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((1.0 - w[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn adamw_zero_gradient_is_a_fixed_point() {
        let cfg = AdamW::default();
        let mut w = [0.3, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..5 {
            adamw_update(&mut w, &[0.0, 0.0], &mut m, &mut v, t, 0.1, &cfg);
        }
        assert_eq!(w, [0.3, -2.0]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamW {
            weight_decay: 0.5,
            ..AdamW::default()
        };
        let mut w = [2.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut w, &[0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(w[0], 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn default_plans() {
        let p = TrainPlan::pretrain();
        assert_eq!(p.lr[&ParamGroup::Projector], 2e-3);
        assert_eq!(p.schedule, Schedule::Constant);
        assert_eq!((p.batch_size, p.epochs), (256, 1));
        let f = TrainPlan::finetune();
        assert_eq!(f.lr[&ParamGroup::Adapter], 2e-4);
        assert_eq!(f.lr[&ParamGroup::Prototype], 2e-5);
        assert_eq!(f.lr[&ParamGroup::Projector], 2e-5);
        assert_eq!((f.batch_size, f.epochs), (128, 1));
        p.validate().unwrap();
        f.validate().unwrap();
    }

    #[test]
    fn frozen_group_learning_rate_is_rejected() {
        let mut p = TrainPlan::pretrain();
        p.lr.insert(ParamGroup::LanguageModel, 1e-3);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut f = TrainPlan::finetune();
        f.lr.remove(&ParamGroup::Adapter);
        assert!(matches!(f.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = Schedule::CosineWarmup { warmup_ratio: 0.1 };
        assert!((s.factor(0, 100) - 0.1).abs() < 1e-12);
        assert!((s.factor(9, 100) - 1.0).abs() < 1e-12);
        assert!((s.factor(10, 100) - 1.0).abs() < 1e-12);
        assert!(s.factor(99, 100) < 0.001);
        for i in 10..99 {
            assert!(s.factor(i + 1, 100) <= s.factor(i, 100));
        }
    }

    #[test]
    fn batch_indices_cover_each_epoch_once() {
        let mut p = TrainPlan::finetune();
        p.batch_size = 3;
        p.epochs = 2;
        let n = 10;
        for epoch in 0..2 {
            let mut seen: Vec<usize> = (0..4)
                .flat_map(|b| p.batch_indices(epoch * 4 + b, n))
                .collect();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
        assert_ne!(epoch_order(0, 0, n), epoch_order(0, 1, n));
        assert_eq!(epoch_order(5, 3, n), epoch_order(5, 3, n));
    }

    #[test]
    fn plan_toml_round_trip() {
        let p = TrainPlan::finetune();
        let text = toml::to_string(&p).unwrap();
        let back: TrainPlan = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
