// Scratch: kernel throughput vs full-step cost.
use qavit_core::config::RunConfig;
use qavit_core::fusion::QaVitModel;
use qavit_core::head::Mode;
use qavit_core::data::{build_vocab, gen_qa_sample, sample_rng, AnswerSpace, Split};
use qavit_core::tensor::Tensor;
use std::time::Instant;

fn bench_mm(m: usize, k: usize, n: usize, iters: usize) {
    let a = Tensor::<f32>::from_vec(&[m, k], (0..m*k).map(|i| (i as f32 * 0.001).sin()).collect()).unwrap();
    let b = Tensor::<f32>::from_vec(&[k, n], (0..k*n).map(|i| (i as f32 * 0.002).cos()).collect()).unwrap();
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..iters {
        let c = a.matmul(&b).unwrap();
        acc += c.data()[0];
    }
    let el = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * m as f64 * k as f64 * n as f64 * iters as f64) / el / 1e9;
    eprintln!("mm {}x{}x{}: {:.1} GFLOPS ({:.2} us/op) acc={}", m, k, n, gflops, el * 1e6 / iters as f64, acc);
}

fn main() {
    bench_mm(17, 64, 64, 20000);
    bench_mm(17, 64, 256, 10000);
    bench_mm(17, 256, 64, 10000);
    bench_mm(16, 192, 64, 10000);
    bench_mm(544, 64, 64, 2000);

    let run = RunConfig::default();
    let model = QaVitModel::<f32>::from_run_config(&run).unwrap();
    let vocab = build_vocab(&run.data.grid);
    let space = AnswerSpace::new(&run.data.question_forms, &run.data.grid);
    let mut rng = sample_rng(0, Split::TrainQa, 0);
    let s = gen_qa_sample::<f32>(&run.data.grid, &run.data.question_forms, &space, &vocab, 32, &mut rng);

    // forward only (no_grad)
    let t0 = Instant::now();
    let n = 200;
    for _ in 0..n {
        qavit_core::tensor::no_grad(|| model.qa_logits(&s.image, &s.question, &mut Mode::Eval).unwrap());
    }
    eprintln!("forward no_grad: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);

    // forward tracked
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = model.qa_logits(&s.image, &s.question, &mut Mode::Eval).unwrap();
    }
    eprintln!("forward tracked: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..n {
        let logits = model.qa_logits(&s.image, &s.question, &mut Mode::Eval).unwrap();
        let loss = logits.cross_entropy(&[s.answer_id]).unwrap();
        loss.backward().unwrap();
    }
    model.registry.zero_grads();
    eprintln!("forward+backward: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
}
