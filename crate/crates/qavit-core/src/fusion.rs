//! The fusion mechanism: projected question tokens are concatenated into
//! selected frozen self-attention layers, the visual slice of the attention
//! output is kept, and a zero-initialized tanh-gated parallel projection
//! blends the result back into the residual stream.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{
    answer_logits, apply_lora, freeze_backbone, project_features, unfreeze_backbone, AnswerHead, HeadMode, Linear,
    Mode, ProjectionHead,
};
use crate::question::{
    encode_question, project_question, PerLayerProjector, QuestionTokens, TextEncoderWeights, Vocab,
};
use crate::registry::{LrGroup, ParamStatus, ParameterRegistry};
use crate::tensor::{trunc_normal, Element, Tensor};
use crate::vit::{
    attention_core, block_mlp, encode_image, linear, patchify_embed, vit_block, AttnWeights, LnParams, ViTConfig,
    VitWeights, INIT_STD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Early,
    Late,
    Sparse,
    All,
    Custom,
}

/// Which layers receive question tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionPlan {
    pub mode: FusionMode,
    pub l: usize,
    pub indices: Vec<usize>,
}

/// Derive the fused-layer index set. `late` takes the top `l` layers,
/// `early` the bottom `l`, `sparse` every second layer starting at 1 so the
/// lowest layer stays untouched, `all` every layer.
pub fn plan_fusion(mode: FusionMode, n: usize, l: usize) -> Result<FusionPlan> {
    if matches!(mode, FusionMode::Early | FusionMode::Late) && l > n {
        return Err(Error::Config(format!("fusion L={} exceeds depth N={}", l, n)));
    }
    let indices: Vec<usize> = match mode {
        FusionMode::None => Vec::new(),
        FusionMode::Early => (0..l).collect(),
        FusionMode::Late => (n - l..n).collect(),
        FusionMode::Sparse => (1..n).step_by(2).collect(),
        FusionMode::All => (0..n).collect(),
        FusionMode::Custom => {
            return Err(Error::Config("custom fusion requires an explicit layer list".into()))
        }
    };
    let l = indices.len();
    Ok(FusionPlan { mode, l, indices })
}

impl FusionPlan {
    pub fn custom(indices: &[usize], n: usize) -> Result<Self> {
        let mut sorted: Vec<usize> = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&bad) = sorted.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("fusion layer {} out of range for depth {}", bad, n)));
        }
        Ok(FusionPlan { mode: FusionMode::Custom, l: sorted.len(), indices: sorted })
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.indices.contains(&layer)
    }

    pub fn first_fused(&self) -> Option<usize> {
        self.indices.first().copied()
    }
}

/// Trainable gate and parallel projection of one fused layer, plus shared
/// handles onto the layer's frozen layernorm and attention weights.
pub struct FusedLayerWeights<T: Element> {
    pub beta: Tensor<T>,
    pub pg_w: Tensor<T>,
    pub pg_b: Tensor<T>,
    pub ln1: LnParams<T>,
    pub attn: AttnWeights<T>,
    pub heads: usize,
}

impl<T: Element> FusedLayerWeights<T> {
    fn init(block_ln1: &LnParams<T>, block_attn: &AttnWeights<T>, c: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        FusedLayerWeights {
            beta: Tensor::scalar_param(T::zero()),
            pg_w: Tensor::param(&[c, c], trunc_normal(c * c, INIT_STD, rng)).unwrap(),
            pg_b: Tensor::param(&[c], vec![T::zero(); c]).unwrap(),
            ln1: LnParams { gamma: block_ln1.gamma.clone(), beta: block_ln1.beta.clone() },
            attn: block_attn.share(),
            heads,
        }
    }
}

/// Frozen attention over the concatenation of layernormed visual rows and
/// layernormed projected question rows, returning the visual slice of the
/// pre-projection attention output (queries are computed for visual rows
/// only; see the slice-equivalence test for the full-then-slice form).
pub fn fused_attention<T: Element>(
    f_v: &Tensor<T>,
    f_q: &Tensor<T>,
    w: &FusedLayerWeights<T>,
) -> Result<Tensor<T>> {
    let (_, c) = f_v.dims2("fused_attention")?;
    let (_, cq) = f_q.dims2("fused_attention")?;
    if c != cq {
        return Err(Error::ShapeMismatch {
            op: "fused_attention",
            detail: format!("visual width {} vs text width {}", c, cq),
        });
    }
    let h = w.ln1.apply(f_v)?;
    let hq = w.ln1.apply(f_q)?;
    let kv = h.concat_rows(&hq)?;
    attention_core(&h, &kv, &w.attn, w.heads)
}

/// `P(f') + P_g(f') · tanh(beta)`: the frozen output projection plus the
/// gated parallel projection. At `beta = 0` the gate vanishes and the
/// output equals the frozen path exactly.
pub fn gated_projection<T: Element>(f_prime: &Tensor<T>, w: &FusedLayerWeights<T>) -> Result<Tensor<T>> {
    let base = linear(f_prime, &w.attn.w_o, &w.attn.b_o)?;
    let parallel = linear(f_prime, &w.pg_w, &w.pg_b)?;
    let gate = w.beta.tanh()?;
    base.add(&parallel.mul_scalar(&gate)?)
}

/// The assembled model: frozen ViT backbone, fusion plan, question pathway,
/// gated projections, heads, and the parameter registry covering every
/// parameter exactly once.
pub struct QaVitModel<T: Element> {
    pub cfg: ModelConfig,
    pub vit: VitWeights<T>,
    pub plan: FusionPlan,
    pub fused: BTreeMap<usize, FusedLayerWeights<T>>,
    pub text: TextEncoderWeights<T>,
    pub projectors: PerLayerProjector<T>,
    pub proj_head: ProjectionHead<T>,
    pub answer_head: AnswerHead<T>,
    pub caption_head: Linear<T>,
    pub registry: ParameterRegistry<T>,
    pub vocab: Vocab,
    pub answer_count: usize,
    pub caption_classes: usize,
}

impl<T: Element> QaVitModel<T> {
    /// Build and initialize a model. RNG consumption order is fixed
    /// (backbone, fused layers, text encoder, projectors, heads, adapters)
    /// so a given seed always produces identical weights.
    pub fn new(
        cfg: &ModelConfig,
        vocab: Vocab,
        answer_count: usize,
        caption_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vit_cfg = &cfg.vit;
        let vit = VitWeights::init(vit_cfg, &mut rng);

        let plan = cfg.fusion_plan()?;
        let mut fused = BTreeMap::new();
        for &layer in &plan.indices {
            let block = &vit.blocks[layer];
            fused.insert(
                layer,
                FusedLayerWeights::init(&block.ln1, &block.attn, vit_cfg.width, vit_cfg.heads, &mut rng),
            );
        }

        let text = TextEncoderWeights::init(
            cfg.text.source,
            vocab.len(),
            cfg.text.width,
            cfg.text.k_max,
            cfg.text.heads,
            &mut rng,
        );
        let projectors = PerLayerProjector::init(&plan.indices, cfg.text.width, vit_cfg.width, &mut rng);
        let proj_head = ProjectionHead::init(vit_cfg.width, cfg.head.d2, &mut rng);
        let answer_head = AnswerHead::init(cfg.head.mode, cfg.head.pool, cfg.head.d2, cfg.text.width, answer_count, &mut rng);
        let caption_head = Linear::init(cfg.head.d2, caption_classes, &mut rng);

        let mut registry = ParameterRegistry::new();
        vit.register(&mut registry, ParamStatus::Trainable);
        for (layer, fw) in &fused {
            // The gate and its parallel projection sit against a frozen
            // output projection; they join the boosted projection group.
            registry.register(&format!("fuse.{}.beta", layer), &fw.beta, ParamStatus::Trainable, LrGroup::ProjectionX100);
            registry.register(&format!("fuse.{}.pg.weight", layer), &fw.pg_w, ParamStatus::Trainable, LrGroup::ProjectionX100);
            registry.register(&format!("fuse.{}.pg.bias", layer), &fw.pg_b, ParamStatus::Trainable, LrGroup::ProjectionX100);
        }
        text.register(&mut registry);
        projectors.register(&mut registry);
        proj_head.register(&mut registry);
        answer_head.register(&mut registry);
        caption_head.register("head.caption", &mut registry, ParamStatus::Trainable, LrGroup::Base);

        let mut model = QaVitModel {
            cfg: cfg.clone(),
            vit,
            plan,
            fused,
            text,
            projectors,
            proj_head,
            answer_head,
            caption_head,
            registry,
            vocab,
            answer_count,
            caption_classes,
        };

        if model.cfg.freeze_backbone {
            freeze_backbone(&mut model.registry);
        } else {
            unfreeze_backbone(&mut model.registry);
        }
        if model.cfg.lora.enabled {
            let lora = model.cfg.lora.clone();
            model.apply_lora(&lora.targets, lora.rank, lora.alpha, lora.dropout, &mut rng)?;
        }
        Ok(model)
    }

    pub fn apply_lora(
        &mut self,
        targets: &[String],
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<String>> {
        let mut layers: Vec<(String, &mut Linear<T>)> = vec![
            ("head.proj.fc1".into(), &mut self.proj_head.fc1),
            ("head.proj.fc2".into(), &mut self.proj_head.fc2),
            ("head.answer".into(), &mut self.answer_head.classifier),
            ("head.caption".into(), &mut self.caption_head),
        ];
        if let Some(q) = self.answer_head.q_map.as_mut() {
            layers.push(("head.qmap".into(), q));
        }
        apply_lora(&mut layers, &mut self.registry, targets, rank, alpha, dropout, rng)
    }

    /// Assemble a model from a full run config: the vocabulary and the
    /// answer space derive from the data section.
    pub fn from_run_config(run: &crate::config::RunConfig) -> Result<Self> {
        let vocab = crate::data::build_vocab(&run.data.grid);
        let space = crate::data::AnswerSpace::new(&run.data.question_forms, &run.data.grid);
        QaVitModel::new(&run.model, vocab, space.total(), run.data.grid.color_count, run.seed)
    }

    pub fn vit_cfg(&self) -> &ViTConfig {
        &self.cfg.vit
    }

    /// Unconditioned encoder `V(I)`.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        encode_image(image, &self.vit, &self.cfg.vit)
    }

    /// Conditioned encoder `V(I|Q)`; equivalent to [`Self::encode_traced`]
    /// without keeping per-layer activations.
    pub fn encode_image_conditioned(&self, image: &Tensor<T>, q: &QuestionTokens) -> Result<Tensor<T>> {
        Ok(self.encode_traced(image, q)?.final_tokens)
    }

    /// Conditioned forward keeping every block's output tokens alive, for
    /// saliency and instrumentation.
    pub fn encode_traced(&self, image: &Tensor<T>, q: &QuestionTokens) -> Result<Trace<T>> {
        let x = patchify_embed(image, &self.vit.patch, &self.cfg.vit)?;
        self.run_blocks(x, q)
    }

    /// Run the block stack over prepared input tokens, substituting the
    /// attention sub-block at every fused layer. Question features are
    /// encoded once and re-projected per fused layer.
    pub fn run_blocks(&self, tokens: Tensor<T>, q: &QuestionTokens) -> Result<Trace<T>> {
        let f_q_prime = encode_question(q, &self.text)?;
        let mut x = tokens;
        let mut layer_tokens = Vec::with_capacity(self.vit.blocks.len());
        for (i, block) in self.vit.blocks.iter().enumerate() {
            x = match self.fused.get(&i) {
                None => vit_block(&x, block, self.cfg.vit.heads)?,
                Some(fw) => {
                    let f_q_i = project_question(&f_q_prime, i, &self.projectors)?;
                    let attn_pre = fused_attention(&x, &f_q_i, fw)?;
                    let gated = gated_projection(&attn_pre, fw)?;
                    let y = x.add(&gated)?;
                    block_mlp(&y, block)?
                }
            };
            layer_tokens.push(x.clone());
        }
        let final_tokens = self.vit.final_ln.apply(&x)?;
        Ok(Trace { f_q_prime, layer_tokens, final_tokens })
    }

    /// Answer logits computed from already-encoded final tokens.
    pub fn qa_logits_from_tokens(
        &self,
        final_tokens: &Tensor<T>,
        q: &QuestionTokens,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor<T>> {
        let projected = project_features(final_tokens, &self.proj_head, mode)?;
        let q_embed = match self.answer_head.mode {
            HeadMode::VisualOnly => None,
            HeadMode::VisualPlusQuestion => {
                let f_q_prime = encode_question(q, &self.text)?;
                Some(if q.is_empty() {
                    Tensor::zeros(&[1, self.cfg.text.width])
                } else {
                    f_q_prime.mean_pool_rows()?
                })
            }
        };
        answer_logits(&projected, q_embed.as_ref(), &self.answer_head, mode)
    }

    /// Projected token features `[M×D2]` for a conditioned forward.
    pub fn projected_features(&self, image: &Tensor<T>, q: &QuestionTokens, mode: &mut Mode<'_>) -> Result<Tensor<T>> {
        let f_vq = self.encode_image_conditioned(image, q)?;
        project_features(&f_vq, &self.proj_head, mode)
    }

    /// Answer logits `[1×A]` for a QA sample.
    pub fn qa_logits(&self, image: &Tensor<T>, q: &QuestionTokens, mode: &mut Mode<'_>) -> Result<Tensor<T>> {
        let final_tokens = self.encode_image_conditioned(image, q)?;
        self.qa_logits_from_tokens(&final_tokens, q, mode)
    }

    /// Multi-label caption logits `[1×color_count]`.
    pub fn caption_logits(&self, image: &Tensor<T>, instr: &QuestionTokens, mode: &mut Mode<'_>) -> Result<Tensor<T>> {
        let projected = self.projected_features(image, instr, mode)?;
        let pooled = projected.mean_pool_rows()?;
        self.caption_head.forward(&pooled, mode)
    }

    /// Named LoRA-capable layers, mirroring [`Self::apply_lora`] targets.
    pub fn lora_target_names(&self) -> Vec<String> {
        let mut names = vec![
            "head.proj.fc1".to_string(),
            "head.proj.fc2".to_string(),
            "head.answer".to_string(),
            "head.caption".to_string(),
        ];
        if self.answer_head.q_map.is_some() {
            names.push("head.qmap".to_string());
        }
        names
    }
}

pub struct Trace<T: Element> {
    pub f_q_prime: Tensor<T>,
    /// Output tokens of each block, in layer order.
    pub layer_tokens: Vec<Tensor<T>>,
    /// Final tokens after the closing layernorm.
    pub final_tokens: Tensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_late_takes_top_layers() {
        let p = plan_fusion(FusionMode::Late, 6, 2).unwrap();
        assert_eq!(p.indices, vec![4, 5]);
    }

    #[test]
    fn plan_early_takes_bottom_layers() {
        let p = plan_fusion(FusionMode::Early, 6, 2).unwrap();
        assert_eq!(p.indices, vec![0, 1]);
    }

    #[test]
    fn plan_sparse_every_second_from_one() {
        let p = plan_fusion(FusionMode::Sparse, 6, 0).unwrap();
        assert_eq!(p.indices, vec![1, 3, 5]);
    }

    #[test]
    fn plan_all_and_none() {
        assert_eq!(plan_fusion(FusionMode::All, 4, 0).unwrap().indices, vec![0, 1, 2, 3]);
        assert!(plan_fusion(FusionMode::None, 4, 0).unwrap().indices.is_empty());
    }

    #[test]
    fn plan_rejects_l_above_n() {
        assert!(plan_fusion(FusionMode::Late, 4, 5).is_err());
        assert!(plan_fusion(FusionMode::Early, 4, 5).is_err());
    }

    #[test]
    fn custom_plan_validates_and_sorts() {
        let p = FusionPlan::custom(&[5, 1, 1], 6).unwrap();
        assert_eq!(p.indices, vec![1, 5]);
        assert!(FusionPlan::custom(&[6], 6).is_err());
    }
}
