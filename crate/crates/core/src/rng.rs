//! Seeded random sampling.
//!
//! Determinism contract: one implementation, one seed, one call sequence ⇒
//! one output sequence. Bit-identity across implementations or library
//! versions is not promised. Parallel code must not share a generator;
//! it derives a child per worker via [`SeededRng::child`].

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// child_seed = hash(parent_seed, index)
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Seed derived by folding a tag path, e.g. `[purpose, epoch, batch, item]`.
pub fn derive_seed_path(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(root, |s, &i| derive_seed(s, i))
}

/// Deterministic seeded generator backing all sampling in the toolkit.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; derived from the parent *seed*, not the
    /// parent's stream position, so sibling order does not matter.
    pub fn child(&self, index: u64) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, index))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fair coin as a sign.
    pub fn sign(&mut self) -> f64 {
        if self.inner.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Gamma(alpha, 1) draw (Marsaglia–Tsang; boosted below alpha = 1).
    pub fn gamma(&mut self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma shape must be positive, got {alpha}"
            )));
        }
        let g = Gamma::new(alpha, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("gamma({alpha}): {e}")))?;
        Ok(g.sample(&mut self.inner))
    }

    /// Poisson draw; returns 0 for `lambda == 0`.
    pub fn poisson(&mut self, lambda: f64) -> Result<u64> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "poisson rate must be finite and nonnegative, got {lambda}"
            )));
        }
        if lambda == 0.0 {
            return Ok(0);
        }
        let p = Poisson::new(lambda)
            .map_err(|e| Error::InvalidArgument(format!("poisson({lambda}): {e}")))?;
        Ok(p.sample(&mut self.inner) as u64)
    }

    /// Uniform random permutation of `[0, n)` (Fisher–Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// Dirichlet(alpha, ..., alpha) draw of length `k`: k Gamma(alpha,1) draws,
/// normalized.
pub fn sample_dirichlet(rng: &mut SeededRng, k: usize, alpha: f64) -> Result<Tensor<f32>> {
    if k < 1 {
        return Err(Error::InvalidArgument("dirichlet needs k >= 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dirichlet alpha must be positive, got {alpha}"
        )));
    }
    loop {
        let draws: Vec<f64> = (0..k)
            .map(|_| rng.gamma(alpha))
            .collect::<Result<Vec<_>>>()?;
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 {
            return Tensor::new(vec![k], draws.iter().map(|&g| (g / sum) as f32).collect());
        }
        // all draws underflowed to zero; resample
    }
}

/// Beta(alpha, alpha) draw via two Gamma draws.
pub fn sample_beta(rng: &mut SeededRng, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta alpha must be positive, got {alpha}"
        )));
    }
    loop {
        let x = rng.gamma(alpha)?;
        let y = rng.gamma(alpha)?;
        if x + y > 0.0 {
            return Ok(x / (x + y));
        }
    }
}

/// Tensor of i.i.d. standard normal entries.
pub fn sample_gaussian<T: Element>(rng: &mut SeededRng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.normal()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<f64> = (0..1000).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..1000).map(|_| b.uniform()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn children_are_independent_of_parent_position() {
        let parent = SeededRng::new(7);
        let c1 = parent.child(3).seed();
        let mut parent2 = SeededRng::new(7);
        parent2.uniform();
        assert_eq!(parent2.child(3).seed(), c1);
        assert_ne!(parent.child(4).seed(), c1);
    }

    #[test]
    fn dirichlet_k1_is_unit() {
        let mut rng = SeededRng::new(1);
        let w = sample_dirichlet(&mut rng, 1, 0.3).unwrap();
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn dirichlet_is_probability_vector() {
        let mut rng = SeededRng::new(5);
        for &alpha in &[0.5, 1.0, 2.0] {
            for k in 1..=8 {
                let w = sample_dirichlet(&mut rng, k, alpha).unwrap();
                assert!(w.data().iter().all(|&v| v >= 0.0));
                let s: f32 = w.data().iter().sum();
                assert!((s - 1.0).abs() <= 1e-6, "sum {s} for k={k} alpha={alpha}");
            }
        }
    }

    // Monte-Carlo check against the Dirichlet mean alpha_i / sum(alpha).
    #[test]
    fn dirichlet_mean_matches_formula() {
        let mut rng = SeededRng::new(11);
        let n = 100_000;
        let mut mean = [0.0f64; 3];
        for _ in 0..n {
            let w = sample_dirichlet(&mut rng, 3, 1.0).unwrap();
            for (m, &v) in mean.iter_mut().zip(w.data()) {
                *m += v as f64;
            }
        }
        for m in &mean {
            assert!((m / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    // Beta(1,1) is Uniform[0,1]: mean 1/2, variance 1/12.
    #[test]
    fn beta_one_one_is_uniform() {
        let mut rng = SeededRng::new(13);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_beta(&mut rng, 1.0).unwrap()).collect();
        assert!(draws.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.005, "var {var}");
    }

    #[test]
    fn beta_rejects_nonpositive_alpha() {
        let mut rng = SeededRng::new(1);
        assert!(sample_beta(&mut rng, 0.0).is_err());
        assert!(sample_dirichlet(&mut rng, 3, -1.0).is_err());
    }

    // Law of large numbers on the standard normal sampler.
    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(17);
        let t: Tensor<f64> = sample_gaussian(&mut rng, &[1_000_000]);
        assert_eq!(t.shape(), &[1_000_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 1.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn gaussian_preserves_shape() {
        let mut rng = SeededRng::new(3);
        let t: Tensor<f32> = sample_gaussian(&mut rng, &[2, 3, 4, 5]);
        assert_eq!(t.shape(), &[2, 3, 4, 5]);
        assert_eq!(t.len(), 120);
    }

    #[test]
    fn permutation_is_bijection() {
        let mut rng = SeededRng::new(23);
        let p = rng.permutation(50);
        let mut seen = vec![false; 50];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
