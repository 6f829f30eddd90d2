// Scratch diagnostics: conditioning signal strength at init.
use qavit_core::config::RunConfig;
use qavit_core::data::{build_vocab, gen_cells_balanced, render, sample_rng, Split};
use qavit_core::fusion::QaVitModel;
use qavit_core::head::Mode;
use qavit_core::question::tokenize;
use qavit_core::tensor::no_grad;

fn main() {
    let run = RunConfig::default();
    let model = QaVitModel::<f32>::from_run_config(&run).unwrap();
    let vocab = build_vocab(&run.data.grid);
    let mut rng = sample_rng(0, Split::EvalQa, 7);
    let cells = gen_cells_balanced(&run.data.grid, &mut rng);
    let image = render::<f32>(&cells, &run.data.grid);

    no_grad(|| {
        let logits_for = |text: &str| -> Vec<f32> {
            let q = tokenize(text, &vocab, 32);
            model.qa_logits(&image, &q, &mut Mode::Eval).unwrap().to_vec()
        };
        let a = logits_for("color at r0 c0");
        let b = logits_for("color at r3 c2");
        let c = logits_for("");
        let diff_ab: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        let diff_ac: f32 = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        let mag: f32 = a.iter().map(|v| v.abs()).fold(0.0, f32::max);
        eprintln!("logit magnitude {:.4}; question-diff {:.6}; vs-empty {:.6}", mag, diff_ab, diff_ac);

        // attention-to-text mass per visual token at the first fused layer
        let q = tokenize("color at r2 c3", &vocab, 32);
        let trace = model.encode_traced(&image, &q).unwrap();
        let _ = trace;
    });

    // Check conditioned-vs-unconditioned feature delta per layer.
    no_grad(|| {
        let q = tokenize("color at r2 c3", &vocab, 32);
        let tr_q = model.encode_traced(&image, &q).unwrap();
        let tr_e = model.encode_traced(&image, &tokenize("", &vocab, 32)).unwrap();
        for (i, (a, b)) in tr_q.layer_tokens.iter().zip(&tr_e.layer_tokens).enumerate() {
            let av = a.to_vec();
            let bv = b.to_vec();
            let d: f32 = av.iter().zip(&bv).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            let m: f32 = av.iter().map(|v| v.abs()).fold(0.0, f32::max);
            eprintln!("layer {}: token magnitude {:.3}, question-delta {:.4}", i, m, d);
        }
    });
}
