//! Optimization loop: linear warm-up into cosine decay, AdamW with
//! decoupled weight decay on matrices, per-group learning rates, and
//! proportional multi-task sampling over the synthetic mixture.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, TaskKind};
use crate::data::{
    fixed_prompt, gen_caption_sample, gen_qa_sample, sample_rng, AnswerSpace, CaptionSample, QASample, Split,
};
use crate::error::{Error, Result};
use crate::fusion::QaVitModel;
use crate::head::Mode;
use crate::registry::{LrGroup, ParameterRegistry};
use crate::tensor::Element;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_proj_mult")]
    pub projection_lr_multiplier: f64,
    /// Stability cap on the projection group's learning rate.
    #[serde(default = "d_proj_cap")]
    pub projection_lr_cap: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "d_total")]
    pub total_steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    /// Global-norm gradient clip; null disables.
    #[serde(default = "d_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "d_log_every")]
    pub log_every: u64,
    /// Mid-run checkpoint interval in steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "d_one")]
    pub qa_loss_weight: f64,
    #[serde(default = "d_one")]
    pub caption_loss_weight: f64,
}

fn d_base_lr() -> f64 {
    3e-4
}
fn d_proj_mult() -> f64 {
    100.0
}
fn d_proj_cap() -> f64 {
    3e-2
}
fn d_warmup() -> u64 {
    100
}
fn d_total() -> u64 {
    3000
}
fn d_batch() -> usize {
    32
}
fn d_wd() -> f64 {
    0.05
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> Option<f64> {
    Some(1.0)
}
fn d_log_every() -> u64 {
    50
}
fn d_one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.total_steps > 0 && self.warmup_steps == self.total_steps {
            return Err(Error::Config("warmup_steps must be strictly below total_steps".into()));
        }
        if self.base_lr <= 0.0 || self.projection_lr_multiplier <= 0.0 || self.projection_lr_cap <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..0.5).contains(&(1.0 - self.adam_beta1)) && self.adam_beta1 >= 1.0 {
            return Err(Error::Config("adam_beta1 must be in (0,1)".into()));
        }
        Ok(())
    }

    /// Projection-group learning rate for a given base-group rate.
    pub fn projection_lr(&self, lr: f64) -> f64 {
        (lr * self.projection_lr_multiplier).min(self.projection_lr_cap)
    }
}

/// Learning rate at `step`: linear warm-up from 0 to `base_lr` over
/// `warmup_steps`, then cosine decay to exactly `0.01·base_lr` at
/// `total_steps`. The boundary values are exact by construction.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::OutOfRange {
            op: "lr_at",
            detail: format!("step {} outside 0..={}", step, cfg.total_steps),
        });
    }
    let base = cfg.base_lr;
    if step < cfg.warmup_steps {
        return Ok(base * step as f64 / cfg.warmup_steps as f64);
    }
    if step == cfg.warmup_steps {
        return Ok(base);
    }
    if step == cfg.total_steps {
        return Ok(0.01 * base);
    }
    let min_lr = 0.01 * base;
    let t = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    pub size: f64,
    pub task: TaskKind,
}

/// Proportional sampling weights over the dataset mixture.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub datasets: Vec<DatasetSpec>,
    probabilities: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(datasets: Vec<DatasetSpec>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::EmptyMixture);
        }
        let total: f64 = datasets.iter().map(|d| d.size).sum();
        if total <= 0.0 || datasets.iter().any(|d| d.size <= 0.0) {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        let probabilities = datasets.iter().map(|d| d.size / total).collect();
        Ok(MixtureSpec { datasets, probabilities })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

/// Categorical draw proportional to dataset size.
pub fn sample_dataset<'a>(mixture: &'a MixtureSpec, rng: &mut ChaCha8Rng) -> &'a DatasetSpec {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (d, &p) in mixture.datasets.iter().zip(&mixture.probabilities) {
        acc += p;
        if u < acc {
            return d;
        }
    }
    mixture.datasets.last().expect("mixture non-empty")
}

/// First/second moment buffers for every trainable parameter plus the step
/// counter. Frozen parameters never receive state.
pub struct OptimizerState<T: Element> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub step: u64,
}

impl<T: Element> Default for OptimizerState<T> {
    fn default() -> Self {
        OptimizerState { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }
}

/// One homogeneous training batch.
pub enum Batch<T: Element> {
    Qa(Vec<QASample<T>>),
    Caption(Vec<CaptionSample<T>>),
}

/// Scale gradients in place so their global L2 norm is at most `clip`.
pub fn clip_global_norm<T: Element>(registry: &ParameterRegistry<T>, clip: f64) {
    let mut sq = 0.0f64;
    for (_, e) in registry.trainable() {
        if let Some(g) = e.tensor.grad() {
            for v in g {
                let v = v.to_f64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = T::from_f64(clip / norm);
        for (_, e) in registry.trainable() {
            e.tensor.accum_grad_with(|buf| {
                for v in buf.iter_mut() {
                    *v = *v * scale;
                }
            });
        }
    }
}

/// AdamW update with decoupled weight decay (matrices only) and per-group
/// learning rates. Parameters without a gradient this step are skipped.
pub fn adamw_step<T: Element>(
    registry: &ParameterRegistry<T>,
    opt: &mut OptimizerState<T>,
    lr_base: f64,
    lr_projection: f64,
    cfg: &TrainConfig,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.adam_beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.adam_beta2.powi(t));
    let eps = T::from_f64(cfg.adam_eps);

    for (name, entry) in registry.trainable() {
        let Some(grad) = entry.tensor.grad() else { continue };
        let lr = match entry.lr_group {
            LrGroup::Base => lr_base,
            LrGroup::ProjectionX100 => lr_projection,
        };
        let lr_t = T::from_f64(lr);
        let decay = if entry.tensor.shape().len() >= 2 { T::from_f64(cfg.weight_decay) } else { T::zero() };
        let n = entry.tensor.numel();
        let m = opt.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = opt.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let mut data = entry.tensor.to_vec();
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let update = lr_t * (m_hat / (v_hat.sqrt() + eps) + decay * data[i]);
            data[i] = data[i] - update;
        }
        entry.tensor.set_data(&data);
    }
}

/// Forward/backward over one homogeneous batch, then a clipped AdamW step.
/// Returns the mean task loss. Gradients are zeroed afterwards.
pub fn train_step<T: Element>(
    model: &QaVitModel<T>,
    batch: &Batch<T>,
    opt: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    step: u64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let lr = lr_at(step, cfg)?;
    let mut mean_loss = 0.0f64;
    let fixed = model.cfg.pt.then(|| fixed_prompt(&model.vocab, model.cfg.text.k_max));

    match batch {
        Batch::Qa(samples) => {
            let inv = 1.0 / samples.len() as f64;
            for s in samples {
                let q = fixed.as_ref().unwrap_or(&s.question);
                let logits = model.qa_logits(&s.image, q, &mut Mode::Train { rng: dropout_rng })?;
                let loss = logits.cross_entropy(&[s.answer_id])?;
                mean_loss += loss.item().to_f64() * inv;
                loss.scale(cfg.qa_loss_weight * inv)?.backward()?;
            }
        }
        Batch::Caption(samples) => {
            let inv = 1.0 / samples.len() as f64;
            for s in samples {
                let q = fixed.as_ref().unwrap_or(&s.instruction);
                let logits = model.caption_logits(&s.image, q, &mut Mode::Train { rng: dropout_rng })?;
                let target: Vec<T> = s.target.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
                let loss = logits.bce_with_logits(&target)?;
                mean_loss += loss.item().to_f64() * inv;
                loss.scale(cfg.caption_loss_weight * inv)?.backward()?;
            }
        }
    }

    if !mean_loss.is_finite() {
        model.registry.zero_grads();
        return Err(Error::TrainingFault { step });
    }
    if let Some(clip) = cfg.grad_clip {
        clip_global_norm(&model.registry, clip);
    }
    adamw_step(&model.registry, opt, lr, cfg.projection_lr(lr), cfg);
    model.registry.zero_grads();
    Ok(mean_loss)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(rows: &[LogRow], log_every: u64) -> String {
    let mut out = String::from("step,task,loss,lr\n");
    for row in rows {
        if log_every <= 1 || row.step % log_every == 0 || row.step + 1 == rows.len() as u64 {
            out.push_str(&format!("{},{},{},{}\n", row.step, row.task, row.loss, row.lr));
        }
    }
    out
}

/// Stepwise training driver; owns the optimizer state so callers can
/// checkpoint and resume at step boundaries.
pub struct Trainer<'a, T: Element> {
    pub model: &'a QaVitModel<T>,
    pub data: &'a DataConfig,
    pub cfg: &'a TrainConfig,
    pub seed: u64,
    pub opt: OptimizerState<T>,
    mixture: MixtureSpec,
    space: AnswerSpace,
    pub rows: Vec<LogRow>,
}

impl<'a, T: Element> Trainer<'a, T> {
    pub fn new(model: &'a QaVitModel<T>, data: &'a DataConfig, cfg: &'a TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let mixture = MixtureSpec::new(data.mixture.clone())?;
        let space = AnswerSpace::new(&data.question_forms, &data.grid);
        Ok(Trainer { model, data, cfg, seed, opt: OptimizerState::default(), mixture, space, rows: Vec::new() })
    }

    /// Resume from a loaded optimizer state; the next step index is
    /// `opt.step`.
    pub fn with_state(mut self, opt: OptimizerState<T>) -> Self {
        self.opt = opt;
        self
    }

    pub fn step_index(&self) -> u64 {
        self.opt.step
    }

    pub fn finished(&self) -> bool {
        self.opt.step >= self.cfg.total_steps
    }

    /// Generate the batch for a step. Batches are a pure function of
    /// (seed, step), which is what makes resume exact.
    pub fn batch_for_step(&self, step: u64) -> Batch<T> {
        let mut pick_rng = sample_rng(self.seed, Split::Mixture, step);
        let dataset = sample_dataset(&self.mixture, &mut pick_rng);
        let b = self.cfg.batch_size as u64;
        match dataset.task {
            TaskKind::Qa => Batch::Qa(
                (0..b)
                    .map(|i| {
                        let mut rng = sample_rng(self.seed, Split::TrainQa, step * b + i);
                        gen_qa_sample(
                            &self.data.grid,
                            &self.data.question_forms,
                            &self.space,
                            &self.model.vocab,
                            self.model.cfg.text.k_max,
                            &mut rng,
                        )
                    })
                    .collect(),
            ),
            TaskKind::Caption => Batch::Caption(
                (0..b)
                    .map(|i| {
                        let mut rng = sample_rng(self.seed, Split::TrainCaption, step * b + i);
                        gen_caption_sample(&self.data.grid, &self.model.vocab, self.model.cfg.text.k_max, &mut rng)
                    })
                    .collect(),
            ),
        }
    }

    pub fn run_step(&mut self) -> Result<&LogRow> {
        let step = self.opt.step;
        let batch = self.batch_for_step(step);
        let task = match &batch {
            Batch::Qa(_) => "qa",
            Batch::Caption(_) => "caption",
        };
        let lr = lr_at(step, self.cfg)?;
        let mut dropout_rng = sample_rng(self.seed, Split::Dropout, step);
        let loss = train_step(self.model, &batch, &mut self.opt, self.cfg, step, &mut dropout_rng)?;
        self.rows.push(LogRow { step, task: task.into(), loss, lr });
        Ok(self.rows.last().expect("just pushed"))
    }

    /// Run to completion, invoking `on_step` after every step (for
    /// mid-run checkpointing).
    pub fn run(&mut self, mut on_step: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.finished() {
            self.run_step()?;
            on_step(self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ParamStatus;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn cfg(warmup: u64, total: u64) -> TrainConfig {
        TrainConfig { warmup_steps: warmup, total_steps: total, ..TrainConfig::default() }
    }

    #[test]
    fn lr_boundaries_are_exact() {
        let c = cfg(100, 3000);
        assert_eq!(lr_at(100, &c).unwrap(), c.base_lr);
        assert_eq!(lr_at(3000, &c).unwrap(), 0.01 * c.base_lr);
        assert_eq!(lr_at(50, &c).unwrap(), 0.5 * c.base_lr);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert!(lr_at(3001, &c).is_err());
    }

    #[test]
    fn lr_is_continuous_at_warmup() {
        let c = cfg(100, 3000);
        let left = lr_at(99, &c).unwrap();
        let right = lr_at(101, &c).unwrap();
        let at = lr_at(100, &c).unwrap();
        assert!((left - at).abs() < c.base_lr * 0.02);
        assert!((right - at).abs() < c.base_lr * 0.02);
        // Tighter: the analytic limits agree at the boundary.
        let t = 1.0 / 2900.0f64;
        let cos_next = 0.01 * c.base_lr + 0.5 * (c.base_lr - 0.01 * c.base_lr) * (1.0 + (std::f64::consts::PI * t).cos());
        assert!((right - cos_next).abs() < 1e-12);
    }

    #[test]
    fn lr_decays_monotonically_after_warmup() {
        let c = cfg(10, 200);
        let mut prev = lr_at(10, &c).unwrap();
        for s in 11..=200 {
            let now = lr_at(s, &c).unwrap();
            assert!(now <= prev + 1e-15);
            prev = now;
        }
    }

    #[test]
    fn projection_lr_cap_binds() {
        let mut c = cfg(0, 10);
        c.base_lr = 1e-3;
        assert!((c.projection_lr(1e-3) - 3e-2).abs() < 1e-15);
        c.base_lr = 3e-4;
        assert!((c.projection_lr(3e-4) - 3e-2).abs() < 1e-15);
        assert!((c.projection_lr(1e-5) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn mixture_single_dataset_always_wins() {
        let m = MixtureSpec::new(vec![DatasetSpec { id: "qa".into(), size: 1.0, task: TaskKind::Qa }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_dataset(&m, &mut rng).id, "qa");
        }
    }

    #[test]
    fn mixture_frequencies_match_sizes() {
        let m = MixtureSpec::new(vec![
            DatasetSpec { id: "a".into(), size: 2_300_000.0, task: TaskKind::Qa },
            DatasetSpec { id: "b".into(), size: 700_000.0, task: TaskKind::Caption },
            DatasetSpec { id: "c".into(), size: 100_000.0, task: TaskKind::Qa },
        ])
        .unwrap();
        let expect = [2.3 / 3.1, 0.7 / 3.1, 0.1 / 3.1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            let d = sample_dataset(&m, &mut rng);
            let idx = match d.id.as_str() {
                "a" => 0,
                "b" => 1,
                _ => 2,
            };
            counts[idx] += 1;
        }
        for (c, e) in counts.iter().zip(&expect) {
            assert!((*c as f64 / n as f64 - e).abs() < 0.01);
        }
    }

    #[test]
    fn mixture_equal_sizes_uniform() {
        let m = MixtureSpec::new(vec![
            DatasetSpec { id: "a".into(), size: 5.0, task: TaskKind::Qa },
            DatasetSpec { id: "b".into(), size: 5.0, task: TaskKind::Caption },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_dataset(&m, &mut rng).id == "a").count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn empty_mixture_is_an_error() {
        assert!(matches!(MixtureSpec::new(vec![]), Err(Error::EmptyMixture)));
    }

    #[test]
    fn adamw_scalar_probe_moves_toward_zero() {
        // Single step on loss = θ²/2: the update must shrink θ with
        // |Δθ| ≤ lr·(1+ε)-ish.
        let theta = Tensor::<f64>::scalar_param(0.7);
        let mut reg = ParameterRegistry::new();
        reg.register("theta", &theta, ParamStatus::Trainable, LrGroup::Base);
        let loss = theta.mul(&theta).unwrap().scale(0.5).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let mut opt = OptimizerState::default();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adamw_step(&reg, &mut opt, 0.01, 0.01, &cfg);
        let after = theta.item();
        assert!(after < 0.7 && after > 0.7 - 0.011, "after = {}", after);
        assert!(opt.m.contains_key("theta") && opt.v.contains_key("theta"));
    }

    #[test]
    fn lr_zero_leaves_params_bitwise_unchanged() {
        let theta = Tensor::<f64>::param(&[2, 2], vec![0.25, -0.5, 1.0, -0.125]).unwrap();
        let before = theta.to_vec();
        let mut reg = ParameterRegistry::new();
        reg.register("theta", &theta, ParamStatus::Trainable, LrGroup::Base);
        theta.mul(&theta).unwrap().sum().unwrap().backward().unwrap();
        let mut opt = OptimizerState::default();
        adamw_step(&reg, &mut opt, 0.0, 0.0, &TrainConfig::default());
        assert_eq!(theta.to_vec(), before);
        // Moments still advanced.
        assert_eq!(opt.step, 1);
    }
}
