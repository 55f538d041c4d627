//! Diagonal Gaussians: closed-form KL and reparameterised sampling.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_term, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound added to every softplus standard deviation.
pub const STD_FLOOR: f64 = 1e-4;

/// Diagonal Gaussian over `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        let g = Self { mean, stddev };
        g.validate()?;
        Ok(g)
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            stddev: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.stddev.len() {
            return Err(Error::InvalidDistribution(format!(
                "mean has {} entries, stddev {}",
                self.mean.len(),
                self.stddev.len()
            )));
        }
        if let Some(s) = self.stddev.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidDistribution(format!("stddev {s} is not positive")));
        }
        Ok(())
    }
}

/// `KL(q || p) = sum_i log(p_i/q_i) + (q_i^2 + (mu_q - mu_p)^2) / (2 p_i^2) - 1/2`.
pub fn gaussian_kl(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    if q.dim() != p.dim() {
        return Err(Error::Shape(format!(
            "KL between dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    Ok((0..q.dim())
        .map(|i| kl_term(q.mean[i], q.stddev[i], p.mean[i], p.stddev[i]))
        .sum())
}

/// Draw `mu + sigma * eps`, `eps ~ N(0, I)`.
pub fn gaussian_sample(dist: &Gaussian, rng: &mut Rng) -> Result<Vec<f64>> {
    dist.validate()?;
    Ok(dist
        .mean
        .iter()
        .zip(&dist.stddev)
        .map(|(m, s)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + s * eps
        })
        .collect())
}

/// Standard-normal noise of the given shape.
pub fn standard_noise(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect(),
    )
}

/// A batch of diagonal Gaussians living in a graph: row `k` of `mean` and
/// `stddev` is one distribution.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVar {
    pub mean: Var,
    pub stddev: Var,
}

impl GaussianVar {
    /// Split a `rows x 2d` head output into `(mean, softplus(raw) + floor)`.
    pub fn from_head(g: &mut Graph, head: Var) -> Self {
        let w = g.value(head).cols();
        debug_assert!(w % 2 == 0);
        let d = w / 2;
        let mean = g.slice_cols(head, 0, d);
        let raw = g.slice_cols(head, d, w);
        let sp = g.softplus(raw);
        let stddev = g.add_scalar(sp, STD_FLOOR);
        Self { mean, stddev }
    }

    /// Row `k` as a plain [`Gaussian`].
    pub fn extract(&self, g: &Graph, k: usize) -> Gaussian {
        Gaussian {
            mean: g.value(self.mean).row_slice(k).to_vec(),
            stddev: g.value(self.stddev).row_slice(k).to_vec(),
        }
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.mean).rows()
    }

    /// Rows `idx` of the batch.
    pub fn select(&self, g: &mut Graph, idx: Vec<usize>) -> Self {
        let mean = g.gather_rows(self.mean, idx.clone());
        let stddev = g.gather_rows(self.stddev, idx);
        Self { mean, stddev }
    }

    /// Reparameterised draw with externally supplied noise (`rows x d`).
    /// The noise enters as a constant, so gradients reach mean and stddev only.
    pub fn sample_with(&self, g: &mut Graph, noise: Tensor) -> Var {
        let eps = g.constant(noise);
        let scaled = g.mul(self.stddev, eps);
        g.add(self.mean, scaled)
    }

    /// `samples` reparameterised draws per row, stacked row-major as
    /// `(row, sample)`.
    pub fn sample_many(&self, g: &mut Graph, samples: usize, rng: &mut Rng) -> Var {
        let (n, d) = (g.value(self.mean).rows(), g.value(self.mean).cols());
        let idx: Vec<usize> = (0..n).flat_map(|r| std::iter::repeat_n(r, samples)).collect();
        let rep = self.select(g, idx);
        let noise = standard_noise(n * samples, d, rng);
        rep.sample_with(g, noise)
    }

    /// Summed KL between matching rows of `self` (q) and `p`.
    pub fn kl(&self, g: &mut Graph, p: &GaussianVar) -> Var {
        g.gaussian_kl(self.mean, self.stddev, p.mean, p.stddev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::SeedTree;

    #[test]
    fn kl_of_identical_is_zero() {
        let q = Gaussian::new(vec![0.3, -2.0], vec![0.5, 1.7]).unwrap();
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_shifted_unit() {
        let q = Gaussian::new(vec![1.0], vec![1.0]).unwrap();
        let p = Gaussian::new(vec![0.0], vec![1.0]).unwrap();
        assert!((gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_errors() {
        let q = Gaussian::standard(2);
        let p = Gaussian::standard(3);
        assert!(matches!(gaussian_kl(&q, &p), Err(Error::Shape(_))));
        let bad = Gaussian {
            mean: vec![0.0],
            stddev: vec![0.0],
        };
        assert!(gaussian_kl(&bad, &Gaussian::standard(1)).is_err());
        assert!(Gaussian::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn tiny_stddev_sample_is_mean() {
        let d = Gaussian::new(vec![1.5, -3.0], vec![1e-12, 1e-12]).unwrap();
        let mut rng = SeedTree::new(3).rng();
        let s = gaussian_sample(&d, &mut rng).unwrap();
        assert!((s[0] - 1.5).abs() < 1e-10 && (s[1] + 3.0).abs() < 1e-10);
    }

    #[test]
    fn sampling_is_seeded() {
        let d = Gaussian::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let a = gaussian_sample(&d, &mut SeedTree::new(4).rng()).unwrap();
        let b = gaussian_sample(&d, &mut SeedTree::new(4).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_within_four_standard_errors() {
        let d = Gaussian::new(vec![2.0, -1.0, 0.0], vec![0.5, 3.0, 1.0]).unwrap();
        let mut rng = SeedTree::new(99).rng();
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let s = gaussian_sample(&d, &mut rng).unwrap();
            for k in 0..3 {
                acc[k] += s[k];
            }
        }
        for k in 0..3 {
            let m = acc[k] / n as f64;
            assert!((m - d.mean[k]).abs() < 4.0 * d.stddev[k] / (n as f64).sqrt());
        }
    }

    #[test]
    fn sample_gradient_wrt_mean_is_identity_and_wrt_std_is_noise() {
        let mut store = ParamStore::new(0);
        store.insert("mu", Tensor::row(vec![0.1, 0.2, 0.3]));
        store.insert("sd", Tensor::row(vec![1.0, 2.0, 0.5]));
        let mut g = Graph::new();
        let dist = GaussianVar {
            mean: g.param(&store, "mu").unwrap(),
            stddev: g.param(&store, "sd").unwrap(),
        };
        let noise = standard_noise(1, 3, &mut SeedTree::new(8).rng());
        let z = dist.sample_with(&mut g, noise.clone());
        let s = g.sum(z);
        g.backward_into(s, &mut store, 1.0).unwrap();
        assert_eq!(store.grad("mu").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.grad("sd").unwrap().data(), noise.data());
    }
}
