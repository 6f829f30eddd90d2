//! Full-model gradient verification: one float64 model covering every
//! differentiable module (backbone, fused layers, gates, question pathway,
//! LoRA paths, heads) checked coordinate-wise against central finite
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionConfig, HeadConfig, ModelConfig, TextConfig};
use crate::data::{build_vocab, gen_caption_sample, gen_qa_sample, sample_rng, AnswerSpace, GridWorldSpec, QuestionForm, Split};
use crate::error::Result;
use crate::fusion::{FusionMode, QaVitModel};
use crate::head::{HeadMode, LoraConfig, Mode, PoolKind};
use crate::question::TextSource;
use crate::tensor::{gradcheck, GradcheckReport, Tensor};
use crate::vit::ViTConfig;

pub struct SuiteOptions {
    pub sample_count: usize,
    pub h: f64,
    pub threshold: f64,
    /// Test fixture: corrupt the probe so the suite must fail; proves the
    /// check can detect a wrong gradient.
    pub inject_fault: bool,
}

// Conditioning of the verification model: widened weights and a summed
// multi-sample loss keep gradient magnitudes well above the h = 1e-5
// finite-difference noise floor.
const WEIGHT_BOOST: f64 = 4.0;
const QA_SAMPLES: u64 = 6;
const CAP_SAMPLES: u64 = 3;

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { sample_count: 5000, h: 1e-5, threshold: 1e-4, inject_fault: false }
    }
}

/// Build the float64 verification model and compare analytic gradients of
/// a combined QA + caption loss against finite differences on randomly
/// sampled coordinates across every parameter.
pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<GradcheckReport> {
    let grid = GridWorldSpec { grid_size: 2, color_count: 4, glyph_count: 4, image_size: 16 };
    let cfg = ModelConfig {
        vit: ViTConfig { image_size: 16, patch_size: 8, channels: 3, depth: 4, width: 32, heads: 4, mlp_ratio: 2 },
        fusion: FusionConfig { mode: FusionMode::Late, l: 2, layers: None },
        text: TextConfig { source: TextSource::TinyEncoder, width: 16, k_max: 16, heads: 2 },
        head: HeadConfig { mode: HeadMode::VisualPlusQuestion, pool: PoolKind::Mean, d2: 32 },
        lora: LoraConfig { enabled: true, rank: 8, alpha: 16.0, ..LoraConfig::default() },
        pt: false,
        // Unfrozen so the check spans the backbone gradients too.
        freeze_backbone: false,
    };
    let forms = [QuestionForm::ColorAt, QuestionForm::GlyphAt, QuestionForm::CountColor];
    let vocab = build_vocab(&grid);
    let space = AnswerSpace::new(&forms, &grid);
    let model = QaVitModel::<f64>::new(&cfg, vocab, space.total(), grid.color_count, 2024)?;

    // Make every path non-trivial and keep gradient magnitudes away from
    // the finite-difference noise floor: open the gates, randomize the
    // zero-initialized LoRA B factors, and widen every matrix init.
    let mut wiggle = ChaCha8Rng::seed_from_u64(77);
    for (name, entry) in model.registry.iter() {
        if name.starts_with("fuse.") && name.ends_with(".beta") {
            entry.tensor.set_data(&[wiggle.gen_range(-0.5..0.5)]);
        } else if name.starts_with("lora.") && name.ends_with(".b") {
            let v: Vec<f64> = (0..entry.tensor.numel()).map(|_| wiggle.gen_range(-0.05..0.05)).collect();
            entry.tensor.set_data(&v);
        } else if entry.tensor.shape().len() >= 2 {
            let v: Vec<f64> = entry.tensor.data().iter().map(|&x| x * WEIGHT_BOOST).collect();
            entry.tensor.set_data(&v);
        } else {
            // Perturb zero-initialized biases so the regularizer below
            // gives every coordinate a nonzero gradient contribution.
            let v: Vec<f64> = entry.tensor.data().iter().map(|&x| x + wiggle.gen_range(-0.05..0.05)).collect();
            entry.tensor.set_data(&v);
        }
    }

    let qa_samples: Vec<_> = (0..QA_SAMPLES)
        .map(|i| {
            let mut rng = sample_rng(99, Split::EvalQa, i);
            gen_qa_sample::<f64>(&grid, &forms, &space, &model.vocab, cfg.text.k_max, &mut rng)
        })
        .collect();
    let cap_samples: Vec<_> = (0..CAP_SAMPLES)
        .map(|i| {
            let mut rng = sample_rng(99, Split::EvalCaption, i);
            gen_caption_sample::<f64>(&grid, &model.vocab, cfg.text.k_max, &mut rng)
        })
        .collect();
    let cap_targets: Vec<Vec<f64>> = cap_samples
        .iter()
        .map(|c| c.target.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();

    // Every gradient-receiving parameter. Two exclusions: LoRA target
    // bases are frozen by construction and correctly receive no gradient,
    // and key biases are structurally gradient-free (they shift every
    // attention score of a query row equally, which softmax ignores), so
    // both sides of the comparison would be pure roundoff noise.
    let params: Vec<(String, Tensor<f64>)> = model
        .registry
        .trainable()
        .filter(|(n, _)| !n.ends_with(".attn.bk"))
        .map(|(n, e)| (n.clone(), e.tensor.clone()))
        .collect();
    let fault_probe = model.registry.get("vit.patch.weight").expect("registered").tensor.clone();
    let inject = opts.inject_fault;

    // Fixed ±tilt per coordinate: a linear loss term whose analytic
    // gradient is exactly the tilt, bounding every checked gradient away
    // from the noise floor. Disagreements between analytic and numeric
    // gradients pass through a linear term untouched, so the check loses
    // no sensitivity above the tolerance.
    let mut tilt_rng = ChaCha8Rng::seed_from_u64(555);
    let tilts: Vec<Tensor<f64>> = params
        .iter()
        .map(|(_, p)| {
            let v: Vec<f64> =
                (0..p.numel()).map(|_| if tilt_rng.gen::<bool>() { 2e-3 } else { -2e-3 }).collect();
            Tensor::from_vec(p.shape(), v).expect("tilt shape")
        })
        .collect();

    let reg_params = params.clone();
    let f = move || {
        let mut loss = Tensor::scalar(0.0);
        for qa in &qa_samples {
            let logits = model.qa_logits(&qa.image, &qa.question, &mut Mode::Eval)?;
            loss = loss.add(&logits.cross_entropy(&[qa.answer_id])?)?;
        }
        for (cap, target) in cap_samples.iter().zip(&cap_targets) {
            let logits = model.caption_logits(&cap.image, &cap.instruction, &mut Mode::Eval)?;
            loss = loss.add(&logits.bce_with_logits(target)?)?;
        }
        // L2 regularizer: keeps every coordinate's gradient magnitude
        // above the finite-difference noise floor so the comparison is
        // meaningful everywhere, exactly like a weight-decayed loss.
        let mut l2 = Tensor::scalar(0.0);
        for ((_, p), tilt) in reg_params.iter().zip(&tilts) {
            l2 = l2.add(&p.mul(p)?.sum()?)?;
            loss = loss.add(&p.mul(tilt)?.sum()?)?;
        }
        loss = loss.add(&l2.scale(0.005)?)?;
        if inject {
            // Constant (untracked) shift that nevertheless moves with the
            // probed parameter: finite differences see it, backward does
            // not, so the report must fail.
            let shift: f64 = fault_probe.data().iter().sum::<f64>() * 1000.0;
            loss = loss.add(&Tensor::scalar(shift))?;
        }
        Ok(loss)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    gradcheck(&f, &params, opts.h, opts.sample_count, opts.threshold, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let report = gradcheck_suite(&SuiteOptions { sample_count: 200, ..SuiteOptions::default() }).unwrap();
        assert!(
            report.pass,
            "max_rel_err {} at {}[{}]",
            report.max_rel_err, report.worst_param, report.worst_coord
        );
    }

    #[test]
    fn injected_fault_fails() {
        let report = gradcheck_suite(&SuiteOptions {
            sample_count: 50,
            inject_fault: true,
            ..SuiteOptions::default()
        })
        .unwrap();
        assert!(!report.pass, "sign fault must be detected");
    }
}
