// Scratch: elementwise op costs.
use qavit_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let x = Tensor::<f32>::from_vec(&[17, 256], (0..17*256).map(|i| (i as f32 * 0.01).sin()).collect()).unwrap();
    let n = 20000;
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..n { acc += x.gelu().unwrap().data()[0]; }
    eprintln!("gelu 17x256: {:.2} us/op acc={}", t0.elapsed().as_secs_f64() * 1e6 / n as f64, acc);

    let s = Tensor::<f32>::from_vec(&[17, 23], (0..17*23).map(|i| (i as f32 * 0.07).cos()).collect()).unwrap();
    let t0 = Instant::now();
    for _ in 0..n { acc += s.softmax_rows().unwrap().data()[0]; }
    eprintln!("softmax 17x23: {:.2} us/op acc={}", t0.elapsed().as_secs_f64() * 1e6 / n as f64, acc);

    let l = Tensor::<f32>::from_vec(&[17, 64], vec![0.5; 17*64]).unwrap();
    let g = Tensor::<f32>::from_vec(&[64], vec![1.0; 64]).unwrap();
    let b = Tensor::<f32>::from_vec(&[64], vec![0.0; 64]).unwrap();
    let t0 = Instant::now();
    for _ in 0..n { acc += l.layernorm(&g, &b, 1e-5).unwrap().data()[0]; }
    eprintln!("layernorm 17x64: {:.2} us/op acc={}", t0.elapsed().as_secs_f64() * 1e6 / n as f64, acc);

    // graph-tracked small op overhead: add
    let a2 = Tensor::<f32>::param(&[17, 64], vec![0.1; 17*64]).unwrap();
    let b2 = Tensor::<f32>::param(&[17, 64], vec![0.2; 17*64]).unwrap();
    let t0 = Instant::now();
    for _ in 0..n { acc += a2.add(&b2).unwrap().data()[0]; }
    eprintln!("tracked add 17x64: {:.2} us/op acc={}", t0.elapsed().as_secs_f64() * 1e6 / n as f64, acc);
}
