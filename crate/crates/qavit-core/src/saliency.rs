//! Gradient-based saliency maps at patch resolution, plus binary PGM
//! export. The map weights the final fused layer's token activations by
//! the channel-averaged gradient of a target logit, clamps negatives and
//! max-normalizes — a transformer adaptation of class-activation mapping.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::QaVitModel;
use crate::head::Mode;
use crate::question::QuestionTokens;
use crate::tensor::Element;
use crate::vit::patchify_embed;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Patch-grid side length.
    pub grid: usize,
    /// Row-major non-negative relevance values in [0,1]; max is 1 unless
    /// the map is identically zero.
    pub values: Vec<f64>,
}

/// Relevance of each patch token for `target_class` under the question.
///
/// Gradients are taken with respect to the final fused layer's output
/// tokens (the last layer when no fusion is active); the CLS token is
/// dropped before reshaping to the patch grid.
pub fn saliency<T: Element>(
    model: &QaVitModel<T>,
    image: &crate::tensor::Tensor<T>,
    question: &QuestionTokens,
    target_class: usize,
) -> Result<SaliencyMap> {
    if target_class >= model.answer_count {
        return Err(Error::OutOfRange {
            op: "saliency",
            detail: format!("class {} out of {}", target_class, model.answer_count),
        });
    }
    if model.vit.blocks.is_empty() {
        return Err(Error::Config("saliency requires at least one transformer layer".into()));
    }

    // Track from the patch embedding so gradients reach intermediate
    // activations even with a fully frozen backbone.
    let tokens = patchify_embed(image, &model.vit.patch, &model.cfg.vit)?.detach();
    tokens.set_requires_grad(true);
    let trace = model.run_blocks(tokens, question)?;

    let target_layer = model.plan.indices.last().copied().unwrap_or(model.cfg.vit.depth - 1);
    let acts = &trace.layer_tokens[target_layer];

    let logits = model.qa_logits_from_tokens(&trace.final_tokens, question, &mut Mode::Eval)?;
    let target = logits.slice_cols(target_class, target_class + 1)?.sum()?;
    target.backward()?;

    let grid = model.cfg.vit.patch_grid();
    let c = model.cfg.vit.width;
    let m = model.cfg.vit.token_count();
    let grad = acts.grad().unwrap_or_else(|| vec![T::zero(); m * c]);
    let act_data = acts.to_vec();

    let mut values = Vec::with_capacity(m - 1);
    for i in 1..m {
        // channel-averaged gradient as the token weight
        let mut w = 0.0f64;
        let mut a_sum = 0.0f64;
        for j in 0..c {
            w += grad[i * c + j].to_f64();
            a_sum += act_data[i * c + j].to_f64();
        }
        w /= c as f64;
        values.push((w * a_sum).max(0.0));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v /= max;
        }
    }
    Ok(SaliencyMap { grid, values })
}

/// Quantized byte image of the map, nearest-neighbor upscaled.
pub fn pgm_bytes(map: &SaliencyMap, upscale: usize) -> Vec<u8> {
    let upscale = upscale.max(1);
    let side = map.grid * upscale;
    let mut out = format!("P5\n{} {}\n255\n", side, side).into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = map.values[(y / upscale) * map.grid + (x / upscale)];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Write the map as a binary PGM (P5, maxval 255).
pub fn export_pgm(map: &SaliencyMap, path: &Path, upscale: usize) -> Result<()> {
    fs::write(path, pgm_bytes(map, upscale))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_zero_payload() {
        let map = SaliencyMap { grid: 4, values: vec![0.0; 16] };
        let bytes = pgm_bytes(&map, 1);
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(&bytes[b"P5\n4 4\n255\n".len()..], &[0u8; 16]);
    }

    #[test]
    fn full_intensity_maps_to_255() {
        let map = SaliencyMap { grid: 1, values: vec![1.0] };
        let bytes = pgm_bytes(&map, 1);
        assert_eq!(*bytes.last().unwrap(), 255);
    }

    #[test]
    fn upscale_replicates_nearest_neighbor() {
        let map = SaliencyMap { grid: 2, values: vec![0.0, 1.0, 1.0, 0.0] };
        let bytes = pgm_bytes(&map, 2);
        let header = b"P5\n4 4\n255\n".len();
        let px = &bytes[header..];
        assert_eq!(px.len(), 16);
        assert_eq!(px[0], 0);
        assert_eq!(px[1], 0);
        assert_eq!(px[2], 255);
        assert_eq!(px[3], 255);
        assert_eq!(px[4], 0);
        assert_eq!(px[8], 255);
        assert_eq!(px[10], 0);
    }
}
