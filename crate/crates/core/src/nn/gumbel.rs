use super::functional::{argmax_masked, softmax_masked};
use super::{Rng, Scalar, Tensor};
use crate::error::{invalid, Result};

/// Source of standard Gumbel perturbations.
pub trait GumbelNoise {
    fn draw(&mut self, n: usize) -> Vec<f64>;
}

impl GumbelNoise for Rng {
    fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gumbel()).collect()
    }
}

/// Noise-free perturbation: sampling degenerates to a tempered softmax and argmax.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl GumbelNoise for ZeroNoise {
    fn draw(&mut self, n: usize) -> Vec<f64> {
        vec![0.0; n]
    }
}

/// Replays a fixed sequence of perturbations, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct FixedNoise {
    values: Vec<f64>,
    cursor: usize,
}

impl FixedNoise {
    pub fn new(values: Vec<f64>) -> Self {
        FixedNoise { values, cursor: 0 }
    }
}

impl GumbelNoise for FixedNoise {
    fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = self.values[self.cursor % self.values.len()];
                self.cursor += 1;
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GumbelSample<F = f32> {
    /// `softmax((logits + g) / τ)` over the unmasked entries.
    pub soft: Tensor<F>,
    /// `argmax(logits + g)` over the unmasked entries.
    pub index: usize,
}

/// Draw one Gumbel-Softmax sample.
///
/// The hard index is the Gumbel-max sample, which is an exact draw from
/// `softmax(logits)`; `soft` is its temperature-`τ` relaxation.
pub fn gumbel_softmax_sample<F: Scalar>(
    logits: &Tensor<F>,
    mask: &[bool],
    tau: f64,
    noise: &mut dyn GumbelNoise,
) -> Result<GumbelSample<F>> {
    if !(tau > 0.0) {
        return Err(invalid!("Gumbel-Softmax temperature must be > 0, got {tau}"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid!("Gumbel-Softmax mask has no true entry"));
    }
    let g = noise.draw(logits.len());
    let perturbed: Vec<F> = logits
        .data()
        .iter()
        .zip(&g)
        .map(|(&x, &e)| x + F::lit(e))
        .collect();
    let index = argmax_masked(&perturbed, Some(mask)).expect("mask has a true entry");
    let tempered = Tensor::new(
        logits.shape().to_vec(),
        perturbed.iter().map(|&x| x / F::lit(tau)).collect(),
    )?;
    let soft = softmax_masked(&tempered, mask)?;
    Ok(GumbelSample { soft, index })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_tempered_softmax() {
        let logits = Tensor::<f64>::vector(vec![1.0, 0.5, -0.3]);
        let mask = [true; 3];
        let s = gumbel_softmax_sample(&logits, &mask, 0.5, &mut ZeroNoise).unwrap();
        let scaled = Tensor::vector(vec![2.0, 1.0, -0.6]);
        let expected = softmax_masked(&scaled, &mask).unwrap();
        for (a, b) in s.soft.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.index, 0);
    }

    #[test]
    fn hard_index_is_valid() {
        let logits = Tensor::<f32>::vector(vec![0.1, 3.0, -2.0, 0.0]);
        let mask = [true, false, true, true];
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let s = gumbel_softmax_sample(&logits, &mask, 0.1, &mut rng).unwrap();
            assert!(mask[s.index]);
            assert!(s.soft.data()[s.index] > 0.0);
            assert_eq!(s.soft.data()[1], 0.0);
        }
    }

    #[test]
    fn rejects_bad_temperature() {
        let logits = Tensor::<f32>::vector(vec![0.0, 0.0]);
        assert!(gumbel_softmax_sample(&logits, &[true, true], 0.0, &mut ZeroNoise).is_err());
        assert!(gumbel_softmax_sample(&logits, &[true, true], -1.0, &mut ZeroNoise).is_err());
    }
}
