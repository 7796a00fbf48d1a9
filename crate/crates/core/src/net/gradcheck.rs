use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ModelConfig, NetError, Network};
use crate::train::loss::batch_loss;

/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding compare on an absolute scale.
const REL_FLOOR: f64 = 1e-6;
const MAX_RESAMPLES: usize = 20;
const BATCH: usize = 2;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub skipped_kinks: usize,
}

/// Compares analytic gradients of the total loss with central differences,
/// in double precision, on `trials` parameters. One parameter from every
/// tensor is checked first; the rest are drawn uniformly. Draws whose
/// perturbation flips a ReLU are redrawn.
pub fn grad_check(config: &ModelConfig, eps: f64, trials: usize, beta: f64, seed: u64) -> Result<GradCheckReport, NetError> {
    let mut net = Network::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let pix = config.input_h * config.input_w;
    let input: Vec<f64> = (0..BATCH * pix).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..config.n_a)).collect();
    let rule_bits: Vec<Vec<u8>> =
        (0..BATCH).map(|_| (0..config.rule_dim).map(|_| rng.random_range(0..2u8)).collect()).collect();
    let rules: Vec<&[u8]> = rule_bits.iter().map(|r| r.as_slice()).collect();

    let eval = |net: &mut Network<f64>| {
        let (out, tape) = net.forward_train(&input, BATCH).expect("input sized from config");
        let loss = batch_loss(&out, &labels, &rules, beta);
        (loss, tape)
    };
    let (base, tape) = eval(&mut net);
    let analytic = net.backward(&tape, &base.d_answer, &base.d_rule);
    let base_pattern = tape.relu_pattern();

    let mut order: Vec<usize> = net.layout.tensors.iter().map(|t| rng.random_range(t.range.clone())).collect();
    order.truncate(trials);
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst_param: 0, skipped_kinks: 0 };
    let mut idx = 0;
    while report.checked < trials {
        let k = if idx < order.len() { order[idx] } else { rng.random_range(0..net.layout.total) };
        idx += 1;
        let mut attempt = k;
        let mut fd = None;
        for _ in 0..=MAX_RESAMPLES {
            let orig = net.params[attempt];
            net.params[attempt] = orig + eps;
            let (up, tu) = eval(&mut net);
            net.params[attempt] = orig - eps;
            let (dn, td) = eval(&mut net);
            net.params[attempt] = orig;
            if tu.relu_pattern() == base_pattern && td.relu_pattern() == base_pattern {
                fd = Some((up.loss - dn.loss) / (2.0 * eps));
                break;
            }
            report.skipped_kinks += 1;
            attempt = rng.random_range(0..net.layout.total);
        }
        let Some(fd) = fd else { continue };
        let a = analytic[attempt];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst_param = attempt;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::model::tests::toy;
    use super::*;

    #[test]
    fn toy_gradients_match_finite_differences() {
        let r = grad_check(&toy(), 1e-5, 60, 1.0, 11).unwrap();
        assert_eq!(r.checked, 60);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn unused_aux_head_has_zero_gradient() {
        let cfg = toy();
        let mut net = Network::<f64>::new(cfg.clone(), 3).unwrap();
        let input: Vec<f64> = (0..2 * 1024).map(|i| (i as f64 * 0.3).sin().abs()).collect();
        let (out, tape) = net.forward_train(&input, 2).unwrap();
        let loss = batch_loss(&out, &[0, 1], &[&[1, 0, 1], &[0, 0, 1]], 0.0);
        let g = net.backward(&tape, &loss.d_answer, &loss.d_rule);
        let aux = net.layout.tensor("head.aux2.weight").unwrap().range.clone();
        assert!(g[aux].iter().all(|&v| v == 0.0));
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_canvas_gives_finite_gradients() {
        let mut net = Network::<f64>::new(toy(), 3).unwrap();
        let input = vec![1.0; 2 * 1024];
        let (out, tape) = net.forward_train(&input, 2).unwrap();
        let loss = batch_loss(&out, &[0, 1], &[&[1, 0, 1], &[0, 0, 1]], 1.0);
        let g = net.backward(&tape, &loss.d_answer, &loss.d_rule);
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
