//! Tape-free categorical utilities.

use super::tape::softmax_into;
use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Additive logit offset applied to masked-out entries before a softmax.
pub const MASK_NEG: f64 = -1e9;

/// Softmax restricted to `mask`; masked entries come out exactly zero.
pub fn softmax_masked<F: Scalar>(logits: &Tensor<F>, mask: &[bool]) -> Result<Tensor<F>> {
    if logits.len() != mask.len() {
        return Err(shape_err!(
            "{} logits vs {} mask entries",
            logits.len(),
            mask.len()
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid!("softmax mask has no true entry"));
    }
    let shifted: Vec<F> = logits
        .data()
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { x } else { x + F::lit(MASK_NEG) })
        .collect();
    let mut out = vec![F::zero(); shifted.len()];
    softmax_into(&shifted, &mut out);
    for (o, &m) in out.iter_mut().zip(mask) {
        if !m {
            *o = F::zero();
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Index of the largest unmasked value; ties resolve to the lowest index.
pub fn argmax_masked<F: Scalar>(values: &[F], mask: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, &v) in values.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `KL(q ‖ p)` over the unmasked entries.
pub fn kl_categorical<F: Scalar>(q: &Tensor<F>, p: &Tensor<F>, mask: &[bool]) -> Result<F> {
    if q.len() != p.len() || q.len() != mask.len() {
        return Err(shape_err!(
            "kl over {} / {} entries with {} mask entries",
            q.len(),
            p.len(),
            mask.len()
        ));
    }
    let mut s = F::zero();
    for i in 0..q.len() {
        let (qi, pi) = (q.data()[i], p.data()[i]);
        if qi <= F::zero() {
            continue;
        }
        if !mask[i] {
            return Err(invalid!("q has mass {qi:?} on masked entry {i}"));
        }
        if pi <= F::zero() {
            return Err(invalid!("support violation: q[{i}] > 0 but p[{i}] = 0"));
        }
        s = s + qi * (qi.ln() - pi.ln());
    }
    Ok(s)
}

/// Label-smoothed target: `1 − ε` on `gold`, `ε / (C − 1)` on every other class.
pub fn smoothed_target<F: Scalar>(classes: usize, gold: usize, eps: f64) -> Vec<F> {
    if classes == 1 {
        return vec![F::one()];
    }
    let off = eps / (classes - 1) as f64;
    (0..classes)
        .map(|j| F::lit(if j == gold { 1.0 - eps } else { off }))
        .collect()
}

/// Cross entropy of `probs` against the smoothed target for `gold`.
pub fn smoothed_cross_entropy<F: Scalar>(probs: &Tensor<F>, gold: usize, eps: f64) -> Result<F> {
    let c = probs.len();
    if gold >= c {
        return Err(invalid!("gold index {gold} out of range for {c} classes"));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(invalid!("smoothing {eps} outside [0, 1)"));
    }
    let target = smoothed_target::<F>(c, gold, eps);
    let mut s = F::zero();
    for (&t, &p) in target.iter().zip(probs.data()) {
        if t != F::zero() {
            s = s - t * p.ln();
        }
    }
    Ok(s)
}

/// Map a distribution over source positions onto the vocabulary:
/// `out[v] = Σ_{i : ids[i] = v} p[i]`.
pub fn scatter_copy<F: Scalar>(
    position_probs: &Tensor<F>,
    source_ids: &[usize],
    vocab: usize,
) -> Result<Tensor<F>> {
    if position_probs.len() != source_ids.len() {
        return Err(shape_err!(
            "{} positions vs {} ids",
            position_probs.len(),
            source_ids.len()
        ));
    }
    let mut out = vec![F::zero(); vocab];
    for (&p, &id) in position_probs.data().iter().zip(source_ids) {
        if id >= vocab {
            return Err(invalid!("source id {id} outside vocabulary of {vocab}"));
        }
        out[id] = out[id] + p;
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![xs.len()], xs).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_masked(&v(&[0.0, 0.0]), &[true, true]).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_masked(&v(&[1.0, 1.0, 7.0]), &[true, true, false]).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.0]);
        // e^2 / (e^2 + 1), computed independently
        let e2 = 2.0f64.exp();
        let s = softmax_masked(&v(&[2.0, 0.0]), &[true, true]).unwrap();
        assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.880797).abs() < 1e-6);
        assert!((s.data()[1] - 0.119203).abs() < 1e-6);
        assert!(softmax_masked(&v(&[1.0, 2.0]), &[false, false]).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax_masked(&[0.2, 0.5, 0.3], None), Some(1));
        assert_eq!(argmax_masked(&[0.5, 0.5], None), Some(0));
        assert_eq!(argmax_masked(&[0.9, 0.5], Some(&[false, true])), Some(1));
        assert_eq!(argmax_masked::<f64>(&[0.9], Some(&[false])), None);
    }

    #[test]
    fn kl_examples() {
        let m = [true, true];
        let p = v(&[0.3, 0.7]);
        assert_eq!(kl_categorical(&p, &p, &m).unwrap(), 0.0);
        let l = 5;
        let mut onehot = vec![0.0; l];
        onehot[2] = 1.0;
        let uni = vec![1.0 / l as f64; l];
        let k = kl_categorical(&v(&onehot), &v(&uni), &[true; 5]).unwrap();
        assert!((k - (l as f64).ln()).abs() < 1e-12);
        // 0.7 ln 1.4 + 0.3 ln 0.6
        let expected = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        let k = kl_categorical(&v(&[0.7, 0.3]), &v(&[0.5, 0.5]), &m).unwrap();
        assert!((k - expected).abs() < 1e-12);
        assert!((k - 0.082282).abs() < 1e-6);
        assert!(kl_categorical(&v(&[0.5, 0.5]), &v(&[1.0, 0.0]), &m).is_err());
    }

    #[test]
    fn smoothed_ce_examples() {
        assert_eq!(smoothed_cross_entropy(&v(&[1.0, 0.0, 0.0]), 0, 0.0).unwrap(), 0.0);
        let c = 6;
        let uni = vec![1.0 / c as f64; c];
        let ce = smoothed_cross_entropy(&v(&uni), 3, 0.0).unwrap();
        assert!((ce - (c as f64).ln()).abs() < 1e-12);
        // target [0.9, 1/30, 1/30, 1/30]
        let expected = -(0.9 * 0.7f64.ln() + 3.0 * (0.1 / 3.0) * 0.1f64.ln());
        let ce = smoothed_cross_entropy(&v(&[0.7, 0.1, 0.1, 0.1]), 0, 0.1).unwrap();
        assert!((ce - expected).abs() < 1e-12);
        assert!(smoothed_cross_entropy(&v(&[0.5, 0.5]), 2, 0.0).is_err());
    }

    #[test]
    fn scatter_examples() {
        let out = scatter_copy(&v(&[0.2, 0.3, 0.5]), &[5, 5, 9], 10).unwrap();
        assert!((out.data()[5] - 0.5).abs() < 1e-12);
        assert!((out.data()[9] - 0.5).abs() < 1e-12);
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let out = scatter_copy(&v(&[0.1, 0.6, 0.3]), &[2, 0, 1], 3).unwrap();
        assert_eq!(out.data(), &[0.6, 0.3, 0.1]);
        let out = scatter_copy(&v(&[1.0]), &[4], 6).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_normalized_under_fuzz(
            logits in prop::collection::vec(-50.0f32..50.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::nn::Rng::new(seed);
            let mut mask: Vec<bool> = logits.iter().map(|_| rng.uniform() < 0.7).collect();
            mask[rng.below(logits.len())] = true;
            let t = Tensor::vector(logits.clone());
            let s = softmax_masked(&t, &mask).unwrap();
            let total: f64 = s.data().iter().map(|&x| x as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            for (x, m) in s.data().iter().zip(&mask) {
                prop_assert!(x.is_finite());
                if !m { prop_assert_eq!(*x, 0.0); }
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_on_self(
            a in prop::collection::vec(-10.0f64..10.0, 2..20),
            b in prop::collection::vec(-10.0f64..10.0, 2..20),
        ) {
            let n = a.len().min(b.len());
            let mask = vec![true; n];
            let q = softmax_masked(&v(&a[..n]), &mask).unwrap();
            let p = softmax_masked(&v(&b[..n]), &mask).unwrap();
            prop_assert!(kl_categorical(&q, &p, &mask).unwrap() >= -1e-9);
            prop_assert!(kl_categorical(&q, &q, &mask).unwrap().abs() <= 1e-9);
        }
    }
}
