//! Poisoning score, cost-sensitive weights, and the discrimination loss.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, BackwardRule, Tape, Tensor, Var};

/// Largest probability assigned to any class other than `label`.
pub fn poisoning_score(probs: &[f64], label: usize) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::Contract("poisoning score needs at least two classes".into()));
    }
    if label >= probs.len() {
        return Err(Error::Index(format!("label {label} out of range for {} classes", probs.len())));
    }
    Ok(probs
        .iter()
        .enumerate()
        .filter(|&(t, _)| t != label)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `exp(-alpha * q)` for a misclassified sample whose memorization value
/// exceeds `sigma`, `1` otherwise.
pub fn bat_weight(q: f64, mem: f64, predicted: usize, label: usize, alpha: f64, sigma: f64) -> f64 {
    if mem > sigma && predicted != label {
        (-alpha * q).exp()
    } else {
        1.0
    }
}

/// `Σ wᵢ Lᵢ / Σ wᵢ`; the weights are constants of the differentiation.
pub fn reweighted_adv_loss(tape: &mut Tape, per_sample_losses: Var, weights: &[f64]) -> Result<Var> {
    if weights.is_empty() {
        return Err(Error::Contract("reweighted loss of an empty batch".into()));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > 0.0 && w <= 1.0)) {
        return Err(Error::Contract(format!("weight {w} outside (0, 1]")));
    }
    tape.weighted_mean(per_sample_losses, weights)
}

/// Contrastive regularizer over the typical members of a batch.
///
/// For every ordered same-class pair `(i, j)`, `i ≠ j`, of typical samples the
/// term is `-log(exp(hᵢ·hⱼ/τ) / Σₖ exp(hᵢ·hₖ/τ))`, with `k` ranging over the
/// typical samples of other classes. Pairs whose anchor has no negatives are
/// skipped, and the loss is `0` when no pair remains. With
/// `include_positive` the positive term is added to the denominator.
pub fn discrimination_loss(
    tape: &mut Tape,
    representations: Var,
    labels: &[usize],
    typical: &[bool],
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let h = tape.value(representations);
    let (n, p) = h.dims2("discrimination_loss")?;
    if labels.len() != n || typical.len() != n {
        return Err(Error::dim(
            "discrimination_loss",
            format!("{n} representations, {} labels, {} typical flags", labels.len(), typical.len()),
        ));
    }
    let members: Vec<usize> = (0..n).filter(|&i| typical[i]).collect();
    let m = members.len();
    // similarities among typical members, indexed by position in `members`
    let mut sim = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let s = crate::tensor::dot_slices(h.row(members[a]), h.row(members[b])) / tau;
            sim[a * m + b] = s;
            sim[b * m + a] = s;
        }
    }

    let mut total = 0.0;
    let mut pairs = 0usize;
    // gradient of the summed (unnormalized) loss w.r.t. sim
    let mut gsim = vec![0.0; m * m];
    for a in 0..m {
        let ya = labels[members[a]];
        let negs: Vec<usize> = (0..m).filter(|&k| labels[members[k]] != ya).collect();
        let pos: Vec<usize> = (0..m).filter(|&j| j != a && labels[members[j]] == ya).collect();
        if negs.is_empty() || pos.is_empty() {
            continue;
        }
        let neg_sims: Vec<f64> = negs.iter().map(|&k| sim[a * m + k]).collect();
        if include_positive {
            for &j in &pos {
                let mut terms = neg_sims.clone();
                terms.push(sim[a * m + j]);
                let lse = log_sum_exp(&terms);
                total += lse - sim[a * m + j];
                gsim[a * m + j] += (sim[a * m + j] - lse).exp() - 1.0;
                for &k in &negs {
                    gsim[a * m + k] += (sim[a * m + k] - lse).exp();
                }
            }
        } else {
            let lse = log_sum_exp(&neg_sims);
            for &j in &pos {
                total += lse - sim[a * m + j];
                gsim[a * m + j] -= 1.0;
            }
            let count = pos.len() as f64;
            for &k in &negs {
                gsim[a * m + k] += count * (sim[a * m + k] - lse).exp();
            }
        }
        pairs += pos.len();
    }
    if pairs == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let inv = 1.0 / pairs as f64;
    gsim.iter_mut().for_each(|g| *g *= inv);
    let rule = DiscriminationBackward {
        members,
        gsim,
        tau,
        width: p,
    };
    tape.custom(
        "discrimination_loss",
        &[representations],
        Tensor::scalar(total * inv),
        Box::new(rule),
    )
}

struct DiscriminationBackward {
    members: Vec<usize>,
    gsim: Vec<f64>,
    tau: f64,
    width: usize,
}

impl BackwardRule for DiscriminationBackward {
    fn backward(&self, parents: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        // sim = H Hᵀ / τ on the member rows, so dH_a = Σ_b (G_ab + G_ba) H_b / τ
        let h = parents[0];
        let m = self.members.len();
        let p = self.width;
        let mut gh = vec![0.0; h.len()];
        let scale = grad_out[0] / self.tau;
        for a in 0..m {
            let ra = self.members[a];
            for b in 0..m {
                let coef = (self.gsim[a * m + b] + self.gsim[b * m + a]) * scale;
                if coef == 0.0 {
                    continue;
                }
                let hb = h.row(self.members[b]);
                for (g, v) in gh[ra * p..(ra + 1) * p].iter_mut().zip(hb) {
                    *g += coef * v;
                }
            }
        }
        vec![gh]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisoning_score_cases() {
        assert_eq!(poisoning_score(&[0.1, 0.7, 0.2], 0).unwrap(), 0.7);
        assert_eq!(poisoning_score(&[0.25; 4], 2).unwrap(), 0.25);
        assert_eq!(poisoning_score(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert!(matches!(poisoning_score(&[1.0], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn weight_cases() {
        let w = bat_weight(0.8, 0.5, 1, 0, 1.0, 0.15);
        assert!((w - (-0.8f64).exp()).abs() < 1e-15);
        assert!((w - 0.44933).abs() < 1e-5);
        assert_eq!(bat_weight(0.8, 0.15, 1, 0, 1.0, 0.15), 1.0);
        assert_eq!(bat_weight(0.9, 0.05, 1, 0, 3.0, 0.15), 1.0);
        assert_eq!(bat_weight(0.8, 0.5, 0, 0, 1.0, 0.15), 1.0);
    }

    #[test]
    fn reweighted_loss_cases() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::vector(vec![2.0, 4.0, 9.0]).unwrap(), true);
        let plain = reweighted_adv_loss(&mut t, l, &[1.0; 3]).unwrap();
        assert!((t.value(plain).item() - 5.0).abs() < 1e-15);

        let l2 = t.leaf(Tensor::vector(vec![2.0, 4.0]).unwrap(), true);
        let e = (-1f64).exp();
        let r = reweighted_adv_loss(&mut t, l2, &[1.0, e]).unwrap();
        assert!((t.value(r).item() - (2.0 + 4.0 * e) / (1.0 + e)).abs() < 1e-15);

        let one = t.leaf(Tensor::vector(vec![3.5]).unwrap(), true);
        let s = reweighted_adv_loss(&mut t, one, &[0.2]).unwrap();
        assert_eq!(t.value(s).item(), 3.5);

        assert!(reweighted_adv_loss(&mut t, l2, &[1.0, 0.0]).is_err());
        assert!(reweighted_adv_loss(&mut t, l2, &[]).is_err());
    }

    fn reps(t: &mut Tape, rows: usize, data: Vec<f64>) -> Var {
        let cols = data.len() / rows;
        t.leaf(Tensor::matrix(rows, cols, data).unwrap(), true)
    }

    #[test]
    fn hand_computed_single_pair() {
        let mut t = Tape::new();
        let h = reps(&mut t, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let l = discrimination_loss(&mut t, h, &[0, 0, 1], &[true; 3], 1.0, false).unwrap();
        assert!((t.value(l).item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_similarity_gives_log_k() {
        // anchor and positive at [1,0]; three singleton-class negatives with the same dot product
        let mut t = Tape::new();
        let h = reps(&mut t, 5, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, -3.0]);
        let l = discrimination_loss(&mut t, h, &[0, 0, 1, 2, 3], &[true; 5], 0.7, false).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_eligible_pair_gives_zero() {
        let mut t = Tape::new();
        let h = reps(&mut t, 3, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
        let l = discrimination_loss(&mut t, h, &[0, 1, 2], &[true; 3], 0.5, false).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let l = discrimination_loss(&mut t, h, &[0, 0, 0], &[true; 3], 0.5, false).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let l = discrimination_loss(&mut t, h, &[0, 0, 1], &[true, true, false], 0.5, false).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data: Vec<f64> = (0..18).map(|k| ((k * 37 % 11) as f64 / 7.0) - 0.6).collect();
        let labels = [0, 0, 1, 1, 2, 0];
        let typical = [true, true, true, false, true, true];
        for include in [false, true] {
            let f = |d: &[f64]| {
                let mut t = Tape::new();
                let h = reps(&mut t, 6, d.to_vec());
                let l = discrimination_loss(&mut t, h, &labels, &typical, 0.7, include).unwrap();
                t.value(l).item()
            };
            let mut t = Tape::new();
            let h = reps(&mut t, 6, data.clone());
            let l = discrimination_loss(&mut t, h, &labels, &typical, 0.7, include).unwrap();
            t.backward(l).unwrap();
            let g = t.grad(h).unwrap().to_vec();
            for k in 0..data.len() {
                let (mut a, mut b) = (data.clone(), data.clone());
                a[k] += 1e-5;
                b[k] -= 1e-5;
                let fd = (f(&a) - f(&b)) / 2e-5;
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "k={k} fd={fd} g={}", g[k]);
            }
        }
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let mut t = Tape::new();
        let h = reps(&mut t, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            discrimination_loss(&mut t, h, &[0, 1], &[true; 2], 0.0, false),
            Err(Error::Contract(_))
        ));
    }
}
