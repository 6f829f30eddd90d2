// Scratch calibration: step timing + short-run learnability.
use qavit_core::config::RunConfig;
use qavit_core::eval::{build_eval_set, evaluate};
use qavit_core::fusion::QaVitModel;
use qavit_core::train::Trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mode = args.get(2).cloned().unwrap_or_else(|| "late".into());
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let head = args.get(4).cloned().unwrap_or_else(|| "vo".into());
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut run = RunConfig::default();
    run.seed = seed;
    run.model.fusion.mode = match mode.as_str() {
        "none" => qavit_core::fusion::FusionMode::None,
        "early" => qavit_core::fusion::FusionMode::Early,
        "sparse" => qavit_core::fusion::FusionMode::Sparse,
        "all" => qavit_core::fusion::FusionMode::All,
        _ => qavit_core::fusion::FusionMode::Late,
    };
    if mode == "none" {
        run.model.fusion.l = 0;
    }
    if head == "vpq" {
        run.model.head.mode = qavit_core::head::HeadMode::VisualPlusQuestion;
    }
    if let Some(src) = args.get(6) {
        if src == "emb" {
            run.model.text.source = qavit_core::question::TextSource::EmbeddingOnly;
        }
    }
    run.train.base_lr = lr;
    run.train.total_steps = steps;
    run.train.warmup_steps = run.train.warmup_steps.min(steps / 10);
    run.data.eval_qa = 500;
    run.data.eval_caption = 100;

    let model = QaVitModel::<f32>::from_run_config(&run).unwrap();
    let mut trainer = Trainer::new(&model, &run.data, &run.train, run.seed).unwrap();
    let t0 = std::time::Instant::now();
    let mut qa_losses: Vec<f64> = Vec::new();
    while !trainer.finished() {
        let row = trainer.run_step().unwrap();
        if row.task == "qa" {
            qa_losses.push(row.loss);
        }
        let st = row.step;
        if st > 0 && st % 500 == 0 {
            let n = qa_losses.len().min(50).max(1);
            let recent: f64 = qa_losses.iter().rev().take(50).sum::<f64>() / n as f64;
            eprintln!("step {} qa_loss(ma50) {:.4} [{:.1?}]", st, recent, t0.elapsed());
        }
    }
    let set = build_eval_set::<f32>(&run.data, run.model.text.k_max, run.seed);
    let report = evaluate(&model, &set, run.seed, "calib").unwrap();
    let n = qa_losses.len().min(50).max(1);
    let recent: f64 = qa_losses.iter().rev().take(50).sum::<f64>() / n as f64;
    eprintln!(
        "RESULT mode={} lr={} head={} seed={} steps={} qa_loss_final={:.4} qa_acc={:.4} cap_acc={:.4} [{:.1?}]",
        mode, lr, head, seed, steps, recent, report.qa_acc, report.cap_acc, t0.elapsed()
    );
}
