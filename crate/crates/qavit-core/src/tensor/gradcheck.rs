//! Central finite-difference gradient checking, the independent oracle for
//! every analytic backward rule in this crate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub checked_coords: usize,
    pub pass: bool,
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences `(f(θ+h) - f(θ-h)) / 2h` on up to `sample_count`
/// randomly chosen coordinates.
///
/// `f` must be deterministic: it is re-evaluated many times with perturbed
/// parameter values. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn gradcheck(
    f: &dyn Fn() -> Result<Tensor<f64>>,
    params: &[(String, Tensor<f64>)],
    h: f64,
    sample_count: usize,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradcheckReport> {
    assert!((1e-7..=1e-3).contains(&h), "h must lie in [1e-7, 1e-3]");

    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    // Enumerate all coordinates, then keep a random subset when there are
    // more than sample_count of them (partial Fisher-Yates).
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, p)) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            coords.push((pi, ci));
        }
    }
    let take = sample_count.min(coords.len());
    for i in 0..take {
        let j = i + rng.gen_range(0..coords.len() - i);
        coords.swap(i, j);
    }
    coords.truncate(take);

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        checked_coords: take,
        pass: true,
    };

    for (pi, ci) in coords {
        let (name, p) = &params[pi];
        let mut buf = p.to_vec();
        let orig = buf[ci];

        buf[ci] = orig + h;
        p.set_data(&buf);
        let up = f()?.item();

        buf[ci] = orig - h;
        p.set_data(&buf);
        let down = f()?.item();

        buf[ci] = orig;
        p.set_data(&buf);

        let numeric = (up - down) / (2.0 * h);
        let a = analytic[pi][ci];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name.clone();
            report.worst_coord = ci;
        }
    }

    report.pass = report.max_rel_err < threshold;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let theta = Tensor::param(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let f = {
            let theta = theta.clone();
            move || {
                let sq = theta.mul(&theta)?;
                sq.scale(0.5)?.sum()
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = gradcheck(&f, &[("theta".into(), theta)], 1e-5, 100, 1e-9, &mut rng).unwrap();
        assert!(report.pass, "max_rel_err = {}", report.max_rel_err);
    }

    #[test]
    fn identical_runs_produce_identical_reports() {
        let run = |seed: u64| {
            let theta = Tensor::param(&[4], vec![0.1, 0.2, -0.4, 0.9]).unwrap();
            let f = {
                let theta = theta.clone();
                move || theta.gelu()?.sum()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gradcheck(&f, &[("theta".into(), theta)], 1e-5, 3, 1e-6, &mut rng).unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
        assert_eq!(a.worst_coord, b.worst_coord);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x * c) with the forward lying about c: analytic grads come from
        // scale(2.0) but the probe function uses scale(3.0).
        let theta = Tensor::param(&[2], vec![1.0, -1.0]).unwrap();
        theta.zero_grad();
        let wrong = theta.scale(2.0).unwrap().sum().unwrap();
        wrong.backward().unwrap();

        let f = {
            let theta = theta.clone();
            move || theta.scale(3.0)?.sum()
        };
        let loss = f().unwrap();
        let _ = loss; // analytic grads stay from the 2.0 pass
        let mut max_rel: f64 = 0.0;
        let h = 1e-5;
        let g = theta.grad().unwrap();
        for ci in 0..2 {
            let mut buf = theta.to_vec();
            let orig = buf[ci];
            buf[ci] = orig + h;
            theta.set_data(&buf);
            let up = f().unwrap().item();
            buf[ci] = orig - h;
            theta.set_data(&buf);
            let down = f().unwrap().item();
            buf[ci] = orig;
            theta.set_data(&buf);
            let numeric: f64 = (up - down) / (2.0 * h);
            let rel = (g[ci] - numeric).abs() / g[ci].abs().max(numeric.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel > 0.1, "a sign/scale bug must be visible: {}", max_rel);
    }
}
