//! Downstream stand-in for the VL pipeline: projection MLP, answer head,
//! low-rank adapters and the freeze protocol.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{LrGroup, ParamStatus, ParameterRegistry};
use crate::tensor::{trunc_normal, Element, Tensor};
use crate::vit::{mat, zeros_vec, INIT_STD};

/// Dropout source for a forward pass. Evaluation disables all dropout.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Train { rng } => Some(rng),
            Mode::Eval => None,
        }
    }
}

/// Low-rank adapter on a linear layer: `W + (alpha/r)·B·A` with `B`
/// zero-initialized so the adapted layer starts as the base layer.
pub struct LoraAdapter<T: Element> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub scale: f64,
    pub dropout_p: f64,
}

/// Linear layer `[d_in×d_out]` with optional LoRA path.
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub adapter: Option<LoraAdapter<T>>,
}

impl<T: Element> Linear<T> {
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear { weight: mat(d_in, d_out, rng), bias: zeros_vec(d_out), adapter: None }
    }

    pub fn register(&self, name: &str, reg: &mut ParameterRegistry<T>, status: ParamStatus, group: LrGroup) {
        reg.register(&format!("{name}.weight"), &self.weight, status, group);
        reg.register(&format!("{name}.bias"), &self.bias, status, group);
    }

    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode<'_>) -> Result<Tensor<T>> {
        let base = x.matmul(&self.weight)?.add_bias(&self.bias)?;
        let Some(ad) = &self.adapter else { return Ok(base) };
        let h = match (ad.dropout_p > 0.0, mode.rng()) {
            (true, Some(rng)) => x.dropout(ad.dropout_p, rng)?,
            _ => x.clone(),
        };
        let low = h.matmul(&ad.a.transpose()?)?.matmul(&ad.b.transpose()?)?;
        base.add(&low.scale(ad.scale)?)
    }
}

/// Two linear layers mapping `C -> D2 -> D2` with gelu between.
pub struct ProjectionHead<T: Element> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> ProjectionHead<T> {
    pub fn init(c: usize, d2: usize, rng: &mut ChaCha8Rng) -> Self {
        ProjectionHead { fc1: Linear::init(c, d2, rng), fc2: Linear::init(d2, d2, rng) }
    }

    pub fn register(&self, reg: &mut ParameterRegistry<T>) {
        self.fc1.register("head.proj.fc1", reg, ParamStatus::Trainable, LrGroup::ProjectionX100);
        self.fc2.register("head.proj.fc2", reg, ParamStatus::Trainable, LrGroup::ProjectionX100);
    }
}

/// Rowwise projection of fused visual tokens into the head width.
pub fn project_features<T: Element>(
    f_vq: &Tensor<T>,
    head: &ProjectionHead<T>,
    mode: &mut Mode<'_>,
) -> Result<Tensor<T>> {
    let h = head.fc1.forward(f_vq, mode)?.gelu()?;
    head.fc2.forward(&h, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// No path from the question to the logits except through fusion.
    VisualOnly,
    /// Pooled question embedding added before classification.
    VisualPlusQuestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Mean,
    Cls,
}

pub struct AnswerHead<T: Element> {
    pub mode: HeadMode,
    pub pool: PoolKind,
    pub classifier: Linear<T>,
    /// `C_text -> D2`, present only in visual-plus-question mode.
    pub q_map: Option<Linear<T>>,
}

impl<T: Element> AnswerHead<T> {
    pub fn init(mode: HeadMode, pool: PoolKind, d2: usize, c_text: usize, answers: usize, rng: &mut ChaCha8Rng) -> Self {
        let q_map = match mode {
            HeadMode::VisualOnly => None,
            HeadMode::VisualPlusQuestion => Some(Linear::init(c_text, d2, rng)),
        };
        AnswerHead { mode, pool, classifier: Linear::init(d2, answers, rng), q_map }
    }

    pub fn register(&self, reg: &mut ParameterRegistry<T>) {
        self.classifier.register("head.answer", reg, ParamStatus::Trainable, LrGroup::Base);
        if let Some(q) = &self.q_map {
            q.register("head.qmap", reg, ParamStatus::Trainable, LrGroup::Base);
        }
    }
}

fn pool<T: Element>(projected: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    match kind {
        PoolKind::Mean => projected.mean_pool_rows(),
        PoolKind::Cls => projected.slice_rows(0, 1),
    }
}

/// Classify pooled projected features into answer logits `[1×A]`.
///
/// `q_embed` must be given exactly when the head mode is
/// visual-plus-question; passing it to a visual-only head is a contract
/// violation.
pub fn answer_logits<T: Element>(
    projected: &Tensor<T>,
    q_embed: Option<&Tensor<T>>,
    head: &AnswerHead<T>,
    mode: &mut Mode<'_>,
) -> Result<Tensor<T>> {
    let pooled = pool(projected, head.pool)?;
    let pooled = match (head.mode, q_embed) {
        (HeadMode::VisualOnly, None) => pooled,
        (HeadMode::VisualOnly, Some(_)) => {
            return Err(Error::ModeMismatch("visual_only head must not receive a question embedding".into()))
        }
        (HeadMode::VisualPlusQuestion, Some(q)) => {
            let q_mapped = head.q_map.as_ref().expect("q_map exists in vpq mode").forward(q, mode)?;
            pooled.add(&q_mapped)?
        }
        (HeadMode::VisualPlusQuestion, None) => {
            return Err(Error::ModeMismatch("visual_plus_question head requires a question embedding".into()))
        }
    };
    head.classifier.forward(&pooled, mode)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lora_dropout")]
    pub dropout: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
}

fn default_rank() -> usize {
    16
}

fn default_alpha() -> f64 {
    32.0
}

fn default_lora_dropout() -> f64 {
    0.05
}

fn default_targets() -> Vec<String> {
    vec!["head.proj.fc1".into(), "head.proj.fc2".into(), "head.answer".into()]
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            enabled: false,
            rank: default_rank(),
            alpha: default_alpha(),
            dropout: default_lora_dropout(),
            targets: default_targets(),
        }
    }
}

/// Attach adapters to the named linear layers. The base weights become
/// frozen; the adapters register as trainable with `scale = alpha/r`.
pub fn apply_lora<T: Element>(
    layers: &mut [(String, &mut Linear<T>)],
    reg: &mut ParameterRegistry<T>,
    targets: &[String],
    r: usize,
    alpha: f64,
    dropout_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let mut attached = Vec::new();
    for target in targets {
        let (_, layer) = layers
            .iter_mut()
            .find(|(name, _)| name == target)
            .ok_or_else(|| Error::UnknownTarget(target.clone()))?;
        let (d_in, d_out) = layer.weight.dims2("apply_lora")?;
        let limit = d_in.min(d_out);
        if r == 0 || r > limit {
            return Err(Error::RankTooLarge { r, limit });
        }
        let a = Tensor::param(&[r, d_in], trunc_normal(r * d_in, INIT_STD, rng)).unwrap();
        let b = Tensor::param(&[d_out, r], vec![T::zero(); d_out * r]).unwrap();
        reg.register(&format!("lora.{target}.a"), &a, ParamStatus::Adapter, LrGroup::Base);
        reg.register(&format!("lora.{target}.b"), &b, ParamStatus::Adapter, LrGroup::Base);
        reg.set_status(&format!("{target}.weight"), ParamStatus::Frozen)?;
        reg.set_status(&format!("{target}.bias"), ParamStatus::Frozen)?;
        layer.adapter = Some(LoraAdapter { a, b, scale: alpha / r as f64, dropout_p });
        attached.push(target.clone());
    }
    Ok(attached)
}

/// Freeze every backbone parameter; question pathway, gates, parallel
/// projections, heads and adapters stay trainable. Idempotent.
pub fn freeze_backbone<T: Element>(reg: &mut ParameterRegistry<T>) {
    let names: Vec<String> = reg.names().filter(|n| n.starts_with("vit.")).cloned().collect();
    for name in names {
        reg.set_status(&name, ParamStatus::Frozen).expect("vit params registered");
    }
}

/// Full-finetune control: unfreeze the backbone.
pub fn unfreeze_backbone<T: Element>(reg: &mut ParameterRegistry<T>) {
    let names: Vec<String> = reg.names().filter(|n| n.starts_with("vit.")).cloned().collect();
    for name in names {
        reg.set_status(&name, ParamStatus::Trainable).expect("vit params registered");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn lora_scale_is_alpha_over_r() {
        let mut r = rng(0);
        let mut layer = Linear::<f64>::init(32, 32, &mut r);
        let mut reg = ParameterRegistry::new();
        layer.register("head.answer", &mut reg, ParamStatus::Trainable, LrGroup::Base);
        let mut layers = [("head.answer".to_string(), &mut layer)];
        apply_lora(&mut layers, &mut reg, &["head.answer".to_string()], 16, 32.0, 0.05, &mut r).unwrap();
        assert_eq!(layer.adapter.as_ref().unwrap().scale, 2.0);
        assert_eq!(reg.get("head.answer.weight").unwrap().status, ParamStatus::Frozen);
        assert_eq!(reg.get("lora.head.answer.a").unwrap().status, ParamStatus::Adapter);
    }

    #[test]
    fn lora_is_identity_at_init() {
        let mut r = rng(1);
        let mut base = Linear::<f64>::init(8, 6, &mut r);
        let before = {
            let x = Tensor::from_vec(&[2, 8], (0..16).map(|i| i as f64 * 0.1 - 0.8).collect()).unwrap();
            base.forward(&x, &mut Mode::Eval).unwrap().to_vec()
        };
        let mut reg = ParameterRegistry::new();
        base.register("head.answer", &mut reg, ParamStatus::Trainable, LrGroup::Base);
        let mut layers = [("head.answer".to_string(), &mut base)];
        apply_lora(&mut layers, &mut reg, &["head.answer".to_string()], 4, 32.0, 0.0, &mut r).unwrap();
        for trial in 0..100 {
            let x = Tensor::from_vec(&[2, 8], (0..16).map(|i| ((i + trial) as f64 * 0.37).sin()).collect()).unwrap();
            let base_out = x.matmul(&base.weight).unwrap().add_bias(&base.bias).unwrap().to_vec();
            let adapted = base.forward(&x, &mut Mode::Eval).unwrap().to_vec();
            for (a, b) in adapted.iter().zip(&base_out) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let _ = before;
    }

    #[test]
    fn lora_full_rank_matches_direct_formula() {
        let mut r = rng(2);
        let d = 5;
        let mut layer = Linear::<f64>::init(d, d, &mut r);
        let mut reg = ParameterRegistry::new();
        layer.register("head.answer", &mut reg, ParamStatus::Trainable, LrGroup::Base);
        let mut layers = [("head.answer".to_string(), &mut layer)];
        apply_lora(&mut layers, &mut reg, &["head.answer".to_string()], d, 2.0 * d as f64, 0.0, &mut r).unwrap();
        // Randomize both factors so the low-rank path is non-trivial.
        let ad = layer.adapter.as_ref().unwrap();
        let mut rr = rng(3);
        let mut rand_fill = |t: &Tensor<f64>| {
            let v: Vec<f64> = (0..t.numel()).map(|_| rr.gen::<f64>() - 0.5).collect();
            t.set_data(&v);
        };
        rand_fill(&ad.a);
        rand_fill(&ad.b);
        assert_eq!(ad.scale, 2.0);

        let x = Tensor::from_vec(&[1, d], vec![0.3, -0.2, 0.9, 0.4, -1.1]).unwrap();
        let got = layer.forward(&x, &mut Mode::Eval).unwrap().to_vec();

        let xv = x.to_vec();
        let (w, b) = (layer.weight.to_vec(), layer.bias.to_vec());
        let (av, bv) = (ad.a.to_vec(), ad.b.to_vec());
        let mut expect = b.clone();
        for j in 0..d {
            for i in 0..d {
                expect[j] += xv[i] * w[i * d + j];
            }
        }
        // + 2.0 * B·A·x
        let mut ax = vec![0.0; d];
        for rr_ in 0..d {
            for i in 0..d {
                ax[rr_] += av[rr_ * d + i] * xv[i];
            }
        }
        for j in 0..d {
            let mut acc = 0.0;
            for rr_ in 0..d {
                acc += bv[j * d + rr_] * ax[rr_];
            }
            expect[j] += 2.0 * acc;
        }
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-5, "{} vs {}", g, e);
        }
    }

    #[test]
    fn lora_rank_and_target_errors() {
        let mut r = rng(4);
        let mut layer = Linear::<f64>::init(4, 4, &mut r);
        let mut reg = ParameterRegistry::new();
        layer.register("head.answer", &mut reg, ParamStatus::Trainable, LrGroup::Base);
        {
            let mut layers = [("head.answer".to_string(), &mut layer)];
            assert!(matches!(
                apply_lora(&mut layers, &mut reg, &["head.answer".to_string()], 5, 32.0, 0.0, &mut r),
                Err(Error::RankTooLarge { .. })
            ));
        }
        let mut layers = [("head.answer".to_string(), &mut layer)];
        assert!(matches!(
            apply_lora(&mut layers, &mut reg, &["nope".to_string()], 2, 32.0, 0.0, &mut r),
            Err(Error::UnknownTarget(_))
        ));
    }

    #[test]
    fn projection_zero_weights_zero_output() {
        let mut r = rng(5);
        let head = ProjectionHead::<f64>::init(8, 16, &mut r);
        for t in [&head.fc1.weight, &head.fc1.bias, &head.fc2.weight, &head.fc2.bias] {
            t.set_data(&vec![0.0; t.numel()]);
        }
        let x = Tensor::from_vec(&[3, 8], (0..24).map(|i| i as f64).collect()).unwrap();
        let out = project_features(&x, &head, &mut Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[3, 16]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn visual_only_rejects_question_embedding() {
        let mut r = rng(6);
        let head = AnswerHead::<f64>::init(HeadMode::VisualOnly, PoolKind::Mean, 4, 8, 3, &mut r);
        let proj = Tensor::from_vec(&[2, 4], vec![0.1; 8]).unwrap();
        let q = Tensor::from_vec(&[1, 8], vec![0.5; 8]).unwrap();
        assert!(matches!(
            answer_logits(&proj, Some(&q), &head, &mut Mode::Eval),
            Err(Error::ModeMismatch(_))
        ));
        assert!(answer_logits(&proj, None, &head, &mut Mode::Eval).is_ok());
    }

    #[test]
    fn single_class_head_gives_length_one_logits() {
        let mut r = rng(7);
        let head = AnswerHead::<f64>::init(HeadMode::VisualOnly, PoolKind::Mean, 4, 8, 1, &mut r);
        let proj = Tensor::from_vec(&[2, 4], vec![0.3; 8]).unwrap();
        let logits = answer_logits(&proj, None, &head, &mut Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[1, 1]);
    }

    #[test]
    fn pooling_is_identity_on_constant_rows() {
        let mut r = rng(8);
        let head = AnswerHead::<f64>::init(HeadMode::VisualOnly, PoolKind::Mean, 3, 8, 2, &mut r);
        let row = [0.4, -0.7, 1.2];
        let proj = Tensor::from_vec(&[5, 3], row.repeat(5)).unwrap();
        let logits = answer_logits(&proj, None, &head, &mut Mode::Eval).unwrap().to_vec();
        let (w, b) = (head.classifier.weight.to_vec(), head.classifier.bias.to_vec());
        for j in 0..2 {
            let expect = b[j] + row[0] * w[j] + row[1] * w[2 + j] + row[2] * w[4 + j];
            assert!((logits[j] - expect).abs() < 1e-12);
        }
    }
}
