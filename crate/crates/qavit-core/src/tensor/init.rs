//! Weight initialization helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Element;

/// Truncated normal: standard normal draws rescaled by `std`, resampled
/// until they land within two standard deviations.
pub fn trunc_normal<T: Element>(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller; both values used when they pass the truncation.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let z0 = r * (2.0 * std::f64::consts::PI * u2).cos();
        let z1 = r * (2.0 * std::f64::consts::PI * u2).sin();
        for z in [z0, z1] {
            if z.abs() <= 2.0 && out.len() < n {
                out.push(T::from_f64(z * std));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn respects_truncation_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = trunc_normal(10_000, 0.02, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-12));
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let va: Vec<f32> = trunc_normal(64, 0.02, &mut a);
        let vb: Vec<f32> = trunc_normal(64, 0.02, &mut b);
        assert_eq!(va, vb);
    }
}
