use crate::net::{Outputs, Real};

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[target]`.
pub fn cross_entropy<T: Real>(logits: &[T], target: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    lse - logits[target]
}

/// Summed binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
pub fn bce_with_logits<T: Real>(logits: &[T], targets: &[u8]) -> T {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            // max(z,0) - z t + ln(1 + e^{-|z|})
            let t = if t != 0 { T::one() } else { T::zero() };
            z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
        })
        .sum()
}

/// Answer cross-entropy plus `beta` times the rule BCE, for one sample.
pub fn loss_total<T: Real>(answer: &[T], label: usize, rule: &[T], rules: &[u8], beta: T) -> T {
    let ce = cross_entropy(answer, label);
    if beta == T::zero() {
        return ce;
    }
    ce + beta * bce_with_logits(rule, rules)
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Batch-mean loss with its gradients for the answer and rule logits.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub loss: T,
    pub answer_loss: T,
    pub correct: usize,
    pub d_answer: Vec<T>,
    pub d_rule: Vec<T>,
}

pub fn batch_loss<T: Real>(out: &Outputs<T>, labels: &[usize], rules: &[&[u8]], beta: T) -> BatchLoss<T> {
    let b = out.batch;
    let inv = T::one() / T::from_usize(b).unwrap();
    let mut res = BatchLoss {
        loss: T::zero(),
        answer_loss: T::zero(),
        correct: 0,
        d_answer: vec![T::zero(); b * out.n_a],
        d_rule: vec![T::zero(); b * out.rule_dim],
    };
    for i in 0..b {
        let logits = out.answer_row(i);
        let ce = cross_entropy(logits, labels[i]);
        res.answer_loss += ce * inv;
        res.loss += loss_total(logits, labels[i], out.rule_row(i), rules[i], beta) * inv;
        if out.predicted(i) == labels[i] {
            res.correct += 1;
        }
        let probs = softmax(logits);
        for (j, p) in probs.into_iter().enumerate() {
            let t = if j == labels[i] { T::one() } else { T::zero() };
            res.d_answer[i * out.n_a + j] = (p - t) * inv;
        }
        if beta != T::zero() {
            for (j, (&z, &t)) in out.rule_row(i).iter().zip(rules[i]).enumerate() {
                let t = if t != 0 { T::one() } else { T::zero() };
                res.d_rule[i * out.rule_dim + j] = beta * (sigmoid(z) - t) * inv;
            }
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_way_cross_entropy_is_ln2() {
        assert!((cross_entropy(&[0.3f64, 0.3], 1) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn beta_zero_is_pure_cross_entropy() {
        let l = loss_total(&[1.0f64, -2.0, 0.5], 2, &[5.0, -3.0], &[0, 1], 0.0);
        assert_eq!(l, cross_entropy(&[1.0, -2.0, 0.5], 2));
    }

    #[test]
    fn zero_rule_logits_give_bit_count_ln2() {
        let aux = bce_with_logits(&[0.0f64; 3], &[1, 0, 1]);
        assert!((aux - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let total = loss_total(&[0.0f64, 0.0], 0, &[0.0; 3], &[1, 0, 1], 1.0);
        assert!((total - 4.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(z, t) in &[(2.0f64, 1u8), (-1.5, 0), (0.3, 1), (-4.0, 1)] {
            let s = 1.0 / (1.0 + (-z).exp());
            let want = if t == 1 { -s.ln() } else { -(1.0 - s).ln() };
            assert!((bce_with_logits(&[z], &[t]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let a = softmax(&[1.0f32, 2.0, -3.0, 0.5]);
        let b = softmax(&[11.0f32, 12.0, 7.0, 10.5]);
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let answer = vec![0.2f64, -0.4, 1.1, 0.0, 0.3, -0.2];
        let rule = vec![0.5f64, -1.0, 2.0, 0.1];
        let out = Outputs { batch: 2, n_a: 3, rule_dim: 2, d: 0, answer, rule, pooled: vec![] };
        let labels = [2usize, 0];
        let rules: [&[u8]; 2] = [&[1, 0], &[0, 1]];
        let res = batch_loss(&out, &labels, &rules, 0.7);
        let h = 1e-6;
        for k in 0..6 {
            let mut up = out.clone();
            up.answer[k] += h;
            let mut dn = out.clone();
            dn.answer[k] -= h;
            let fd = (batch_loss(&up, &labels, &rules, 0.7).loss - batch_loss(&dn, &labels, &rules, 0.7).loss) / (2.0 * h);
            assert!((fd - res.d_answer[k]).abs() < 1e-8);
        }
        for k in 0..4 {
            let mut up = out.clone();
            up.rule[k] += h;
            let mut dn = out.clone();
            dn.rule[k] -= h;
            let fd = (batch_loss(&up, &labels, &rules, 0.7).loss - batch_loss(&dn, &labels, &rules, 0.7).loss) / (2.0 * h);
            assert!((fd - res.d_rule[k]).abs() < 1e-8);
        }
    }
}
