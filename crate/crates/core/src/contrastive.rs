//! In-batch NT-Xent objective.
//!
//! A batch holds N = 2M embeddings laid out as interleaved pairs: rows `2i`
//! and `2i + 1` are an original segment and its replica. Every other row acts
//! as a negative. With `a(i, k) = z_i . z_k / tau`, the loss of the directed
//! pair `(i, j)` is `-log(exp a(i,j) / sum_{k != i} exp a(i,k))` and the batch
//! loss averages it over all N directed pairs.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.05;

/// How far a row norm may stray from 1 before the batch is rejected.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Index of the positive partner of row `i`.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// Row-major N x N matrix of pairwise inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape(format!("{} values for a {n}x{n} matrix", values.len())));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.n + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_batch<S: Scalar>(z: &Tensor<S>) -> Result<(usize, usize)> {
    let &[n, d] = z.shape() else {
        return Err(Error::shape(format!("embeddings must be [N, d], got {:?}", z.shape())));
    };
    if n < 2 || n % 2 != 0 {
        return Err(Error::arg(format!("batch size must be even and at least 2, got {n}")));
    }
    for (i, row) in z.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::Numerical(format!("embedding {i} has norm {norm}, expected 1")));
        }
    }
    Ok((n, d))
}

/// Inner products of all rows of a unit-norm `[N, d]` batch.
pub fn pairwise_similarity<S: Scalar>(z: &Tensor<S>) -> Result<SimilarityMatrix> {
    let (n, d) = check_batch(z)?;
    let data = z.data();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let s: f64 = (0..d).map(|c| data[i * d + c].f64() * data[k * d + c].f64()).sum();
            values[i * n + k] = s;
            values[k * n + i] = s;
        }
    }
    SimilarityMatrix::from_values(n, values)
}

/// Log-softmax denominator of row `i`: `log sum_{k != i} exp(s(i,k) / tau)`.
fn row_lse(sim: &SimilarityMatrix, i: usize, tau: f64) -> f64 {
    let m = (0..sim.n)
        .filter(|&k| k != i)
        .map(|k| sim.get(i, k) / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..sim.n)
        .filter(|&k| k != i)
        .map(|k| (sim.get(i, k) / tau - m).exp())
        .sum();
    m + s.ln()
}

/// Loss of the directed positive pair `(i, j)`.
pub fn pair_loss(sim: &SimilarityMatrix, i: usize, j: usize, tau: f64) -> f64 {
    row_lse(sim, i, tau) - sim.get(i, j) / tau
}

/// Batch loss: the mean of [`pair_loss`] over every row and its partner.
pub fn batch_loss(sim: &SimilarityMatrix, tau: f64) -> f64 {
    (0..sim.n).map(|i| pair_loss(sim, i, partner(i), tau)).sum::<f64>() / sim.n as f64
}

#[derive(Debug, Clone)]
pub struct LossOutput<S> {
    pub loss: f64,
    /// Gradient of the loss with respect to the embeddings, `[N, d]`.
    pub grad: Tensor<S>,
    /// Fraction of rows whose most similar other row is their partner.
    pub pair_accuracy: f64,
}

/// Batch loss and its gradient with respect to the unit-norm embeddings.
///
/// With `p(i, k)` the row-`i` softmax over `k != i`, the loss gradient on the
/// logits is `G(i, k) = (p(i,k) - [k = partner(i)]) / N`, and since each
/// logit is symmetric in its two rows, `dL/dZ = (G + G^T) Z / tau`.
pub fn ntxent<S: Scalar>(z: &Tensor<S>, tau: f64) -> Result<LossOutput<S>> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    let sim = pairwise_similarity(z)?;
    let (n, d) = (sim.n, z.shape()[1]);
    let mut g = vec![0.0; n * n];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..n {
        let j = partner(i);
        let lse = row_lse(&sim, i, tau);
        loss += lse - sim.get(i, j) / tau;
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for k in (0..n).filter(|&k| k != i) {
            let p = (sim.get(i, k) / tau - lse).exp();
            g[i * n + k] = (p - if k == j { 1.0 } else { 0.0 }) / n as f64;
            if sim.get(i, k) > best.0 {
                best = (sim.get(i, k), k);
            }
        }
        correct += usize::from(best.1 == j);
    }
    let data = z.data();
    let mut grad = vec![S::zero(); n * d];
    for i in 0..n {
        for k in (0..n).filter(|&k| k != i) {
            let w = (g[i * n + k] + g[k * n + i]) / tau;
            if w == 0.0 {
                continue;
            }
            for c in 0..d {
                grad[i * d + c] += S::of(w * data[k * d + c].f64());
            }
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite contrastive loss {loss}")));
    }
    Ok(LossOutput {
        loss,
        grad: Tensor::new(&[n, d], grad)?,
        pair_accuracy: correct as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor::new(&[n, d], data).unwrap()
    }

    /// Naive oracle: explicit softmax probability without stabilization.
    fn naive_loss(z: &Tensor<f64>, tau: f64) -> f64 {
        let (n, d) = (z.shape()[0], z.shape()[1]);
        let dot = |a: usize, b: usize| -> f64 { (0..d).map(|c| z.data()[a * d + c] * z.data()[b * d + c]).sum() };
        let mut total = 0.0;
        for i in 0..n {
            let j = if i % 2 == 0 { i + 1 } else { i - 1 };
            let num = (dot(i, j) / tau).exp();
            let den: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(i, k) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn two_identical_rows_give_zero_loss() {
        let z = Tensor::<f64>::new(&[2, 3], vec![0.6, 0.8, 0.0, 0.6, 0.8, 0.0]).unwrap();
        let out = ntxent(&z, DEFAULT_TAU).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.grad.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_similarity_gives_log_n_minus_one() {
        for n in [4usize, 8, 120] {
            let sim = SimilarityMatrix::from_values(n, vec![0.3; n * n]).unwrap();
            assert!((batch_loss(&sim, 0.05) - ((n - 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        // tau = 0.5 keeps exp() in range for the unstabilized oracle.
        let z = random_unit(8, 8, 1);
        let out = ntxent(&z, 0.5).unwrap();
        assert!((out.loss - naive_loss(&z, 0.5)).abs() < 1e-10);
        let sim = pairwise_similarity(&z).unwrap();
        let summed: f64 = (0..8).map(|i| pair_loss(&sim, i, partner(i), 0.5)).sum::<f64>() / 8.0;
        assert!((out.loss - summed).abs() < 1e-12);
        assert!((batch_loss(&sim, 0.5) - out.loss).abs() < 1e-12);
    }

    #[test]
    fn stable_at_small_temperature() {
        let z = random_unit(16, 8, 2);
        let out = ntxent(&z, 1e-3).unwrap();
        assert!(out.loss.is_finite() && out.grad.all_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (n, d, tau) = (4, 8, 0.05);
        let z = random_unit(n, d, 3);
        let analytic = ntxent(&z, tau).unwrap().grad;
        // Differentiate the similarity-based loss with raw (unnormalized)
        // perturbations, which is what the formula describes.
        let raw_loss = |z: &Tensor<f64>| -> f64 {
            let mut values = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    values[i * n + k] = (0..d).map(|c| z.data()[i * d + c] * z.data()[k * d + c]).sum();
                }
            }
            batch_loss(&SimilarityMatrix::from_values(n, values).unwrap(), tau)
        };
        let eps = 1e-6;
        for idx in 0..n * d {
            let mut p = z.clone();
            p.data_mut()[idx] += eps;
            let mut m = z.clone();
            m.data_mut()[idx] -= eps;
            let numeric = (raw_loss(&p) - raw_loss(&m)) / (2.0 * eps);
            let a = analytic.data()[idx];
            assert!((a - numeric).abs() <= 1e-6 * a.abs().max(1.0), "{idx}: {a} vs {numeric}");
        }
    }

    #[test]
    fn rejects_bad_batches() {
        assert!(ntxent(&random_unit(3, 4, 0), 0.05).is_err());
        let mut z = random_unit(4, 4, 0);
        z.data_mut()[0] += 0.1;
        assert!(matches!(ntxent(&z, 0.05), Err(Error::Numerical(_))));
        assert!(ntxent(&random_unit(4, 4, 0), 0.0).is_err());
    }

    #[test]
    fn lower_temperature_sharpens_the_loss_of_a_good_batch() {
        // Positives most similar in every row: loss falls as tau shrinks.
        let mut z = random_unit(8, 16, 4);
        for i in (0..8).step_by(2) {
            let (a, b) = z.data_mut().split_at_mut((i + 1) * 16);
            b[..16].copy_from_slice(&a[i * 16..]);
        }
        let losses: Vec<f64> = [1.0, 0.5, 0.1, 0.05].iter().map(|&t| ntxent(&z, t).unwrap().loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert_eq!(ntxent(&z, 0.05).unwrap().pair_accuracy, 1.0);
    }

    proptest! {
        #[test]
        fn shift_invariance(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let z = random_unit(6, 5, seed);
            let sim = pairwise_similarity(&z).unwrap();
            let shifted = SimilarityMatrix::from_values(6, sim.values().iter().map(|v| v + shift * 0.05).collect()).unwrap();
            prop_assert!((batch_loss(&sim, 0.05) - batch_loss(&shifted, 0.05)).abs() < 1e-9);
        }

        #[test]
        fn loss_bounded_when_partners_win(seed in 0u64..1000) {
            let z = random_unit(10, 6, seed);
            let out = ntxent(&z, 0.05).unwrap();
            prop_assert!(out.loss >= 0.0);
            // Partner maximal in every row bounds the loss by log(N - 1).
            let sim = pairwise_similarity(&z).unwrap();
            let argmax_ok = (0..10).all(|i| (0..10).filter(|&k| k != i).all(|k| sim.get(i, k) <= sim.get(i, partner(i))));
            if argmax_ok {
                prop_assert!(out.loss <= (9.0f64).ln() + 1e-12);
            }
            prop_assert!(out.grad.all_finite());
        }
    }
}
