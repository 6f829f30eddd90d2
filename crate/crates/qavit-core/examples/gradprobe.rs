// Scratch: per-group gradient norms on QA batches.
use qavit_core::config::RunConfig;
use qavit_core::fusion::QaVitModel;
use qavit_core::train::{Batch, Trainer};
use qavit_core::head::Mode;
use qavit_core::data::{sample_rng, Split};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut run = RunConfig::default();
    run.train.total_steps = steps.max(1);
    run.train.warmup_steps = 0;
    let model = QaVitModel::<f32>::from_run_config(&run).unwrap();
    let mut trainer = Trainer::new(&model, &run.data, &run.train, 0).unwrap();
    for _ in 0..steps { trainer.run_step().unwrap(); }

    // one forward/backward on a fresh QA batch, no update
    model.registry.zero_grads();
    let batch = trainer.batch_for_step(steps);
    if let Batch::Qa(samples) = &batch {
        let mut rng = sample_rng(0, Split::Dropout, steps + 1);
        let inv = 1.0 / samples.len() as f64;
        for s in samples {
            let logits = model.qa_logits(&s.image, &s.question, &mut Mode::Train { rng: &mut rng }).unwrap();
            let loss = logits.cross_entropy(&[s.answer_id]).unwrap();
            loss.scale(inv).unwrap().backward().unwrap();
        }
    } else {
        eprintln!("step {} drew caption; rerun", steps);
        return;
    }
    let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
    for (name, e) in model.registry.trainable() {
        if let Some(g) = e.tensor.grad() {
            let sq: f64 = g.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let key = name.split('.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(key).or_insert(0.0) += sq;
        }
    }
    for (k, sq) in groups {
        eprintln!("{:28} grad_norm {:.3e}", k, sq.sqrt());
    }
}
