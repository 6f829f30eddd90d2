// Scratch: can the fused pathway learn answer = f(question alone)?
// Labels the sample with the asked row index (0..G), ignoring the image.
use qavit_core::config::RunConfig;
use qavit_core::data::{build_vocab, sample_rng, AnswerSpace, Split, gen_qa_sample};
use qavit_core::fusion::QaVitModel;
use qavit_core::head::Mode;
use qavit_core::question::tokenize;
use qavit_core::train::{adamw_step, clip_global_norm, lr_at, OptimizerState, TrainConfig};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let mut run = RunConfig::default();
    run.train.base_lr = lr;
    run.train.total_steps = steps;
    run.train.warmup_steps = 20;
    let model = QaVitModel::<f32>::from_run_config(&run).unwrap();
    let vocab = build_vocab(&run.data.grid);
    let space = AnswerSpace::new(&run.data.question_forms, &run.data.grid);
    let cfg: TrainConfig = run.train.clone();
    let mut opt = OptimizerState::default();
    let batch = 32u64;
    for step in 0..steps {
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for i in 0..batch {
            let mut rng = sample_rng(0, Split::TrainQa, step * batch + i);
            let s = gen_qa_sample::<f32>(&run.data.grid, &run.data.question_forms, &space, &vocab, 32, &mut rng);
            // label = asked row index (pure question function)
            let row_tok = s.question_text.split_whitespace().nth(2).unwrap();
            let label: usize = row_tok[1..].parse().unwrap();
            let logits = model.qa_logits(&s.image, &s.question, &mut Mode::Eval).unwrap();
            let lv = logits.to_vec();
            let am = lv.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            if am == label { hits += 1; }
            let loss = logits.cross_entropy(&[label]).unwrap();
            loss_sum += loss.item() as f64 / batch as f64;
            loss.scale(1.0 / batch as f64).unwrap().backward().unwrap();
        }
        clip_global_norm(&model.registry, 1.0);
        let l = lr_at(step, &cfg).unwrap();
        adamw_step(&model.registry, &mut opt, l, cfg.projection_lr(l), &cfg);
        model.registry.zero_grads();
        if step % 50 == 0 || step + 1 == steps {
            eprintln!("step {} loss {:.4} acc {:.3}", step, loss_sum, hits as f64 / batch as f64);
        }
    }
    let _ = tokenize("color at r0 c0", &vocab, 32);
}
